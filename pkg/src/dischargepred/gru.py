"""Multitask GRU over daily event sequences, with manual backpropagation and Adam.

Per step: the mean embedding of each channel's (or channel group's) tokens,
concatenated with standardized demographics, feeds one GRU layer; a linear
layer maps the hidden state to three logits (TASKS order).  Everything runs
in float64.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .errors import ConfigError, DataError, TrainingDivergence
from .features import SEQUENCE_CHANNELS, TASKS, DaySequence, SequenceBatch, batch_sequences, build_sequence, pad_batch
from .timeutil import DAY

log = logging.getLogger(__name__)

PER_FEATURE = "per_feature_25"
GROUPED = "grouped_50"
EMBED_DIMS = {PER_FEATURE: 25, GROUPED: 50}
GROUPS = (
    ("internal", ("diagnosis", "lab", "lab_result")),
    ("external", ("medication", "procedure", "encounter")),
)
SCHEDULES = ("round_robin", "random") + TASKS
MODEL_FORMAT = "dischargepred.gru"
MODEL_VERSION = 1


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.003
    dropout: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    embed_mode: str = PER_FEATURE
    embed_dim: int | None = None
    hidden: int = 64
    batch_size: int = 64
    task_schedule: str = "round_robin"
    bptt_truncate: int | None = None
    seed: int = 0

    def validate(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.embed_mode not in EMBED_DIMS:
            raise ConfigError(f"embed_mode must be one of {sorted(EMBED_DIMS)}")
        if self.hidden <= 0 or (self.embed_dim is not None and self.embed_dim <= 0):
            raise ConfigError("hidden size and embedding dim must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.task_schedule not in SCHEDULES:
            raise ConfigError(f"task_schedule must be one of {SCHEDULES}")
        if self.bptt_truncate is not None and self.bptt_truncate < 1:
            raise ConfigError("bptt_truncate must be >= 1")
        return self

    @property
    def dim(self) -> int:
        return self.embed_dim or EMBED_DIMS[self.embed_mode]


def channel_groups(embed_mode: str, channels) -> tuple:
    """(group name, member channels) pairs for the channels present."""
    channels = tuple(channels)
    if embed_mode == PER_FEATURE:
        return tuple((ch, (ch,)) for ch in channels)
    if embed_mode == GROUPED:
        out = tuple((g, tuple(c for c in members if c in channels)) for g, members in GROUPS)
        return tuple((g, m) for g, m in out if m)
    raise ConfigError(f"unknown embed_mode {embed_mode!r}")


@dataclass
class GruParameters:
    arrays: dict
    groups: tuple
    channel_sizes: dict
    embed_dim: int
    hidden: int
    demo_width: int
    age_mean: float = 0.0
    age_std: float = 1.0

    @property
    def input_width(self) -> int:
        return len(self.groups) * self.embed_dim + self.demo_width

    def group_size(self, g) -> int:
        return sum(self.channel_sizes[c] for c in dict(self.groups)[g])

    def channel_offset(self, g, ch) -> int:
        off = 0
        for c in dict(self.groups)[g]:
            if c == ch:
                return off
            off += self.channel_sizes[c]
        raise KeyError(ch)

    def copy(self) -> "GruParameters":
        return GruParameters({k: v.copy() for k, v in self.arrays.items()}, self.groups, dict(self.channel_sizes),
                             self.embed_dim, self.hidden, self.demo_width, self.age_mean, self.age_std)

    def check_shapes(self):
        H, D = self.hidden, self.input_width
        want = {"W": (D, 3 * H), "U": (H, 3 * H), "b": (3 * H,), "Wo": (H, 3), "bo": (3,)}
        for g, _ in self.groups:
            want[f"E_{g}"] = (self.group_size(g), self.embed_dim)
        for k, shape in want.items():
            if self.arrays[k].shape != shape:
                raise ConfigError(f"parameter {k} has shape {self.arrays[k].shape}, expected {shape}")


def _glorot(rng, fan_in, fan_out, shape):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def init_gru(channel_sizes: dict, demo_width: int, config: TrainConfig | None = None, seed: int | None = None,
             age_mean: float = 0.0, age_std: float = 1.0) -> GruParameters:
    config = (config or TrainConfig()).validate()
    if any(v < 0 for v in channel_sizes.values()) or demo_width < 0:
        raise ConfigError("vocabulary sizes and demographics width must be >= 0")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence([seed, 21]))
    groups = channel_groups(config.embed_mode, channel_sizes)
    e, H = config.dim, config.hidden
    sizes = {c: int(v) for c, v in channel_sizes.items()}
    D = len(groups) * e + demo_width
    arrays = {}
    for g, members in groups:
        arrays[f"E_{g}"] = rng.uniform(-0.05, 0.05, size=(sum(sizes[c] for c in members), e))
    # each gate block gets its own fan-in/fan-out limit
    arrays["W"] = np.concatenate([_glorot(rng, D, H, (D, H)) for _ in range(3)], axis=1)
    arrays["U"] = np.concatenate([_glorot(rng, H, H, (H, H)) for _ in range(3)], axis=1)
    arrays["b"] = np.zeros(3 * H)
    arrays["Wo"] = _glorot(rng, H, 3, (H, 3))
    arrays["bo"] = np.zeros(3)
    p = GruParameters(arrays, groups, sizes, e, H, demo_width, float(age_mean), float(age_std))
    p.check_shapes()
    return p


# ---------------------------------------------------------------- inputs


@dataclass
class GruInputs:
    """A padded batch turned into per-group averaging operators and standardized demographics."""

    mask: np.ndarray  # (B, T)
    avg: dict  # group -> csr (B*T, V_g) with weights 1/count per row, or None
    demo: np.ndarray  # (B, T, q)
    targets: np.ndarray
    defined: np.ndarray

    @property
    def shape(self):
        return self.mask.shape


def prepare_inputs(batch, params: GruParameters) -> GruInputs:
    if isinstance(batch, GruInputs):
        return batch
    if not isinstance(batch, SequenceBatch):
        seqs = list(batch)
        if not seqs:
            raise DataError("empty batch")
        batch = pad_batch(seqs, list(range(len(seqs))))
    B, T = batch.mask.shape
    if T == 0 or not batch.mask.any():
        raise DataError("batch contains only empty sequences")
    if batch.demographics.shape[2] != params.demo_width:
        raise DataError(f"demographics width {batch.demographics.shape[2]} != model {params.demo_width}")
    avg = {}
    for g, members in params.groups:
        rows, cols = [], []
        for ch in members:
            indptr, ids = batch.tokens[ch]
            if len(ids) and (ids.min() < 0 or ids.max() >= params.channel_sizes[ch]):
                raise DataError(f"channel {ch}: token id outside vocabulary")
            rows.append(np.repeat(np.arange(B * T), np.diff(indptr)))
            cols.append(ids + params.channel_offset(g, ch))
        r = np.concatenate(rows)
        V = params.group_size(g)
        if V == 0 or len(r) == 0:
            avg[g] = None
            continue
        cnt = np.bincount(r, minlength=B * T)
        A = sp.csr_matrix((1.0 / cnt[r], (r, np.concatenate(cols))), shape=(B * T, V))
        A.sum_duplicates()
        avg[g] = A
    demo = batch.demographics.copy()
    demo[:, :, 0] = (demo[:, :, 0] - params.age_mean) / params.age_std
    demo[~batch.mask] = 0.0
    return GruInputs(batch.mask.copy(), avg, demo, batch.targets, batch.defined)


# ---------------------------------------------------------------- forward / backward


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _dropout_mask(rng, mask, width, p):
    """Inverted-dropout multipliers; draws only for real steps, in (batch, step) order."""
    out = np.zeros((mask.size, width))
    flat = mask.reshape(-1)
    out[flat] = (rng.random((int(flat.sum()), width)) >= p) / (1.0 - p)
    return out


@dataclass
class _Cache:
    X: np.ndarray
    m_in: np.ndarray | None
    Xd: np.ndarray
    hs: np.ndarray  # (T+1, B, H), hs[0] = 0
    z: np.ndarray
    r: np.ndarray
    hh: np.ndarray
    m_out: np.ndarray | None
    Hd: np.ndarray
    logits: np.ndarray


def _forward(params: GruParameters, inp: GruInputs, train: bool, dropout: float, rng) -> _Cache:
    P = params.arrays
    B, T = inp.shape
    H, e = params.hidden, params.embed_dim
    parts = []
    for g, _ in params.groups:
        A = inp.avg[g]
        parts.append(np.zeros((B * T, e)) if A is None else A @ P[f"E_{g}"])
    X = np.concatenate(parts + [inp.demo.reshape(B * T, -1)], axis=1)
    use_drop = train and dropout > 0
    if use_drop and rng is None:
        raise ValueError("train-mode dropout needs a seeded rng")
    m_in = _dropout_mask(rng, inp.mask, X.shape[1], dropout) if use_drop else None
    m_out = _dropout_mask(rng, inp.mask, H, dropout) if use_drop else None
    Xd = X * m_in if use_drop else X
    XW = (Xd @ P["W"] + P["b"]).reshape(B, T, 3 * H)
    Uzr, Uh = P["U"][:, :2 * H], P["U"][:, 2 * H:]
    hs = np.zeros((T + 1, B, H))
    z = np.empty((T, B, H))
    r = np.empty((T, B, H))
    hh = np.empty((T, B, H))
    for t in range(T):
        h = hs[t]
        a = XW[:, t]
        zr = _sigmoid(a[:, :2 * H] + h @ Uzr)
        z[t], r[t] = zr[:, :H], zr[:, H:]
        hh[t] = np.tanh(a[:, 2 * H:] + (r[t] * h) @ Uh)
        hs[t + 1] = h + z[t] * (hh[t] - h)
    Hs = hs[1:].transpose(1, 0, 2).reshape(B * T, H)
    Hd = Hs * m_out if use_drop else Hs
    logits = (Hd @ P["Wo"] + P["bo"]).reshape(B, T, 3)
    return _Cache(X, m_in, Xd, hs, z, r, hh, m_out, Hd, logits)


def gru_forward(params: GruParameters, batch, dropout_mode: str = "eval", dropout: float = 0.0, rng=None):
    """Per-step head probabilities ``(B, T, 3)`` (NaN on padded steps) and the activation cache."""
    if dropout_mode not in ("train", "eval"):
        raise ValueError("dropout_mode must be 'train' or 'eval'")
    inp = prepare_inputs(batch, params)
    cache = _forward(params, inp, dropout_mode == "train", dropout, rng)
    probs = _sigmoid(cache.logits)
    probs[~inp.mask] = np.nan
    return probs, cache


def _backward(params, inp, cache, dlogits, bptt_truncate=None) -> dict:
    P = params.arrays
    B, T = inp.shape
    H = params.hidden
    dl = dlogits.reshape(B * T, 3)
    grads = {"Wo": cache.Hd.T @ dl, "bo": dl.sum(axis=0)}
    dHs = dl @ P["Wo"].T
    if cache.m_out is not None:
        dHs *= cache.m_out
    dHs = dHs.reshape(B, T, H)
    U = P["U"]
    Uzr, Uh = U[:, :2 * H], U[:, 2 * H:]
    dU = np.zeros_like(U)
    dA = np.empty((B, T, 3 * H))
    dh_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        hp, z, r, hh = cache.hs[t], cache.z[t], cache.r[t], cache.hh[t]
        dh = dHs[:, t] + dh_next
        dah = dh * z * (1.0 - hh * hh)
        dz = dh * (hh - hp)
        dhp = dh * (1.0 - z)
        drh = dah @ Uh.T
        dU[:, 2 * H:] += (r * hp).T @ dah
        dhp += drh * r
        dazr = np.concatenate([dz * z * (1.0 - z), drh * hp * r * (1.0 - r)], axis=1)
        dU[:, :2 * H] += hp.T @ dazr
        dhp += dazr @ Uzr.T
        dA[:, t, :2 * H] = dazr
        dA[:, t, 2 * H:] = dah
        dh_next = dhp
        if bptt_truncate and t % bptt_truncate == 0:
            dh_next = np.zeros_like(dhp)
    dA = dA.reshape(B * T, 3 * H)
    grads["U"] = dU
    grads["W"] = cache.Xd.T @ dA
    grads["b"] = dA.sum(axis=0)
    dX = dA @ P["W"].T
    if cache.m_in is not None:
        dX *= cache.m_in
    e = params.embed_dim
    for i, (g, _) in enumerate(params.groups):
        A = inp.avg[g]
        E = P[f"E_{g}"]
        grads[f"E_{g}"] = np.zeros_like(E) if A is None else np.asarray(A.T @ dX[:, i * e:(i + 1) * e])
    return grads


def gru_loss_and_grads(params: GruParameters, batch, active_task: str, dropout: float = 0.0, rng=None,
                       bptt_truncate=None):
    """Mean BCE of ``active_task`` over its defined, non-padded steps, and gradients for every parameter."""
    if active_task not in TASKS:
        raise ValueError(f"unknown task {active_task!r}")
    inp = prepare_inputs(batch, params)
    k = TASKS.index(active_task)
    valid = inp.defined[:, :, k] & inp.mask
    n = int(valid.sum())
    if n == 0:
        raise DataError(f"batch has no valid steps for task {active_task}")
    cache = _forward(params, inp, dropout > 0, dropout, rng)
    lg = cache.logits[:, :, k]
    y = inp.targets[:, :, k]
    loss = float(np.sum(np.where(valid, np.logaddexp(0.0, lg) - y * lg, 0.0)) / n)
    dlogits = np.zeros_like(cache.logits)
    dlogits[:, :, k] = np.where(valid, (_sigmoid(lg) - y) / n, 0.0)
    return loss, _backward(params, inp, cache, dlogits, bptt_truncate)


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros(cls, params: GruParameters) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()}, 0)


def adam_step(params: GruParameters, grads: dict, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """Bias-corrected Adam; returns new parameters and state, inputs untouched."""
    for k, g in grads.items():
        if g.shape != params.arrays[k].shape:
            raise ValueError(f"gradient {k} shape {g.shape} != parameter {params.arrays[k].shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise TrainingDivergence(f"non-finite gradient: {bad} entries of {k} at step {state.step + 1}",
                                     last_good=params)
    t = state.step + 1
    new = params.copy()
    m, v = {}, {}
    for k, g in grads.items():
        m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        mhat = m[k] / (1.0 - beta1 ** t)
        vhat = v[k] / (1.0 - beta2 ** t)
        new.arrays[k] = params.arrays[k] - lr * mhat / (np.sqrt(vhat) + eps)
    for k in params.arrays:
        if k not in m:
            m[k], v[k] = state.m[k].copy(), state.v[k].copy()
    return new, AdamState(m, v, t)


# ---------------------------------------------------------------- sequences for training / evaluation


def training_sequences(timelines: dict, vocab, train_examples, cutoff: int) -> list:
    """One sequence per train patient, ending at the later of the cutoff day and its last train anchor.

    The discharge head is supervised only at steps that are train anchors.
    """
    by_pid = {}
    for ex in train_examples:
        by_pid.setdefault(ex.patient_id, []).append(ex.anchor)
    out = []
    for pid in sorted(by_pid):
        anchors = np.asarray(sorted(by_pid[pid]), dtype=np.int64)
        end_day = max(cutoff // DAY, int(anchors[-1]) // DAY)
        seq = build_sequence(timelines[pid], vocab, end_day=end_day)
        keep = np.zeros(len(seq), dtype=bool)
        steps = np.searchsorted(seq.days, anchors // DAY - 1)
        keep[steps] = True
        seq.defined[:, 0] &= keep
        out.append(seq)
    return out


@dataclass
class EvalQueries:
    """Sequences to run plus (sequence, step) of each example, in example order."""

    sequences: list
    seq_of_example: np.ndarray
    step_of_example: np.ndarray
    labels: np.ndarray


def evaluation_queries(timelines: dict, vocab, examples) -> EvalQueries:
    pids = sorted({ex.patient_id for ex in examples})
    seqs = [build_sequence(timelines[pid], vocab) for pid in pids]
    pos = {pid: i for i, pid in enumerate(pids)}
    si = np.array([pos[ex.patient_id] for ex in examples], dtype=np.int64)
    st = np.array([seqs[pos[ex.patient_id]].step_of_anchor(ex.anchor) for ex in examples], dtype=np.int64)
    if np.any(st < 0):
        raise DataError("an anchor has no matching sequence step")
    return EvalQueries(seqs, si, st, np.array([ex.label for ex in examples], dtype=np.int64))


def predict_queries(params: GruParameters, queries: EvalQueries, batch_size: int = 128, task: str = TASKS[0]):
    k = TASKS.index(task)
    out = np.empty(len(queries.seq_of_example))
    order = np.argsort(queries.seq_of_example, kind="stable")
    wanted = {}
    for j in order:
        wanted.setdefault(int(queries.seq_of_example[j]), []).append(j)
    n = len(queries.sequences)
    with threadpool_limits(1):
        for a in range(0, n, batch_size):
            idx = list(range(a, min(n, a + batch_size)))
            probs, _ = gru_forward(params, pad_batch(queries.sequences, idx))
            for b, s in enumerate(idx):
                for j in wanted.get(s, ()):
                    out[j] = probs[b, queries.step_of_example[j], k]
    return out


# ---------------------------------------------------------------- training


@dataclass
class TrainLogRow:
    epoch: int
    task: str
    mean_loss: float
    n_batches: int
    val_auroc: float | None


@dataclass
class TrainResult:
    params: GruParameters
    log: list = field(default_factory=list)

    def epoch_loss(self, task=TASKS[0]) -> list:
        return [r.mean_loss for r in self.log if r.task == task]


def _task_for(schedule, step, rng):
    if schedule == "round_robin":
        return TASKS[step % len(TASKS)]
    if schedule == "random":
        return TASKS[int(rng.integers(len(TASKS)))]
    return schedule


def train_gru(train_sequences, config: TrainConfig, channel_sizes: dict, age_mean: float = 0.0,
              age_std: float = 1.0, validation: EvalQueries | None = None) -> TrainResult:
    """Adam over length-sorted batches, one task per batch; deterministic per seed."""
    config.validate()
    if not train_sequences:
        raise DataError("no training sequences")
    demo_width = train_sequences[0].demographics.shape[1]
    from .metrics import auroc

    with threadpool_limits(1):
        params = init_gru(channel_sizes, demo_width, config, age_mean=age_mean, age_std=age_std)
        batches = [prepare_inputs(b, params) for b in batch_sequences(train_sequences, config.batch_size)]
        state = AdamState.zeros(params)
        order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 31]))
        task_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 32]))
        result = TrainResult(params)
        step = 0
        for epoch in range(config.epochs):
            losses = {t: [] for t in TASKS}
            for j, bi in enumerate(order_rng.permutation(len(batches))):
                task = _task_for(config.task_schedule, step, task_rng)
                step += 1
                inp = batches[bi]
                k = TASKS.index(task)
                if not np.any(inp.defined[:, :, k] & inp.mask):
                    continue
                drop_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 33, epoch, j]))
                loss, grads = gru_loss_and_grads(params, inp, task, config.dropout, drop_rng, config.bptt_truncate)
                if not np.isfinite(loss):
                    raise TrainingDivergence(f"non-finite loss in epoch {epoch + 1}", last_good=result.params)
                params, state = adam_step(params, grads, state, config.learning_rate, config.beta1, config.beta2,
                                          config.eps)
                losses[task].append(loss)
            val = None
            if validation is not None and len(set(validation.labels.tolist())) == 2:
                val = auroc(predict_queries(params, validation), validation.labels)
            for t in TASKS:
                if losses[t]:
                    result.log.append(TrainLogRow(epoch + 1, t, float(np.mean(losses[t])), len(losses[t]), val))
            result.params = params
            log.info("gru epoch %d: %s val_auroc=%s", epoch + 1,
                     " ".join(f"{t}={np.mean(v):.4f}" for t, v in losses.items() if v), val)
    return result


# ---------------------------------------------------------------- persistence


def model_to_json(params: GruParameters, config: TrainConfig) -> str:
    body = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "config": asdict(config),
        "groups": [[g, list(m)] for g, m in params.groups],
        "channel_sizes": params.channel_sizes,
        "embed_dim": params.embed_dim,
        "hidden": params.hidden,
        "demo_width": params.demo_width,
        "age_mean": params.age_mean,
        "age_std": params.age_std,
        "shapes": {k: list(v.shape) for k, v in params.arrays.items()},
        "params": {k: v.ravel().tolist() for k, v in params.arrays.items()},
    }
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def model_from_json(text: str):
    d = json.loads(text)
    if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
        raise DataError("not a GRU model file of a supported version")
    arrays = {k: np.asarray(v, dtype=np.float64).reshape(d["shapes"][k]) for k, v in d["params"].items()}
    params = GruParameters(arrays, tuple((g, tuple(m)) for g, m in d["groups"]), d["channel_sizes"], d["embed_dim"],
                           d["hidden"], d["demo_width"], d["age_mean"], d["age_std"])
    params.check_shapes()
    return params, TrainConfig(**d["config"])


def write_train_log(path, result: TrainResult):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "task", "mean_loss", "n_batches", "val_auroc"])
        for r in result.log:
            w.writerow([r.epoch, r.task, repr(r.mean_loss), r.n_batches, "" if r.val_auroc is None else repr(r.val_auroc)])
