"""Code vocabulary, fixed-length count vectors and per-day sequences.

Fixed-vector layout: ``[recent block | historical block | demographics]``.
Both count blocks share one column order: diagnosis, procedure, medication,
lab code, lab code x result category.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .errors import DataError
from .timeutil import DAY

NORMAL, ABNORMAL, PANIC = "normal", "abnormal", "panic"
LAB_CATEGORIES = (NORMAL, ABNORMAL, PANIC)

FIXED_CHANNELS = ("diagnosis", "procedure", "medication", "lab", "lab_result")
SEQUENCE_CHANNELS = FIXED_CHANNELS + ("encounter",)
DEMOGRAPHIC_FIELDS = ("gender", "race", "ethnicity", "insurance")
OTHER = "other"
TASKS = ("discharge24", "inpatient_now", "inpatient_next")

RECENT_WINDOW = DAY
HISTORY_WINDOW = 180 * DAY
VOCAB_VERSION = 1
_YEAR = 365.25 * DAY


def categorize_lab(value, ref_range) -> str:
    """normal inside [low, high], panic beyond the panic bounds, abnormal otherwise."""
    low, high, panic_low, panic_high = ref_range
    if not math.isfinite(value):
        raise DataError(f"lab value must be finite, got {value!r}")
    if low <= value <= high:
        return NORMAL
    if value < panic_low or value > panic_high:
        return PANIC
    return ABNORMAL


def _lab_result_tokens(codes, values, lab_ranges):
    out = np.empty(len(codes), dtype=object)
    for i, (c, v) in enumerate(zip(codes, values)):
        rng = lab_ranges.get(c)
        out[i] = None if rng is None else f"{c}:{categorize_lab(float(v), rng)}"
    return out


@dataclass
class Vocabulary:
    channels: dict
    min_count: int
    demographics: dict
    age_mean: float = 0.0
    age_std: float = 1.0
    version: int = VOCAB_VERSION
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {ch: {tok: i for i, tok in enumerate(toks)} for ch, toks in self.channels.items()}

    def index(self, channel):
        return self._index[channel]

    def size(self, channel) -> int:
        return len(self.channels.get(channel, ()))

    @property
    def channel_offsets(self) -> dict:
        off, out = 0, {}
        for ch in FIXED_CHANNELS:
            out[ch] = off
            off += self.size(ch)
        return out

    @property
    def block_width(self) -> int:
        return sum(self.size(ch) for ch in FIXED_CHANNELS)

    @property
    def recent_offset(self) -> int:
        return 0

    @property
    def history_offset(self) -> int:
        return self.block_width

    @property
    def demographics_offset(self) -> int:
        return 2 * self.block_width

    @property
    def demographics_columns(self) -> list:
        cols = ["age_years"]
        for f in DEMOGRAPHIC_FIELDS:
            cols += [f"{f}={c}" for c in self.demographics[f]]
        return cols + ["surgery"]

    @property
    def demographics_width(self) -> int:
        return len(self.demographics_columns)

    @property
    def width(self) -> int:
        return self.demographics_offset + self.demographics_width

    def demographic_vector(self, patient: dict) -> np.ndarray:
        """One-hot categorical part (no age, no surgery flag)."""
        parts = []
        for f in DEMOGRAPHIC_FIELDS:
            cats = self.demographics[f]
            v = np.zeros(len(cats))
            tok = patient.get(f)
            v[cats.index(tok) if tok in cats else cats.index(OTHER)] = 1.0
            parts.append(v)
        return np.concatenate(parts)

    def to_json(self) -> str:
        return json.dumps(
            {
                "version": self.version,
                "min_count": self.min_count,
                "channels": self.channels,
                "demographics": self.demographics,
                "age_mean": self.age_mean,
                "age_std": self.age_std,
                "layout": self.layout(),
            },
            indent=1,
            sort_keys=True,
        )

    def layout(self) -> dict:
        return {
            "width": self.width,
            "block_width": self.block_width,
            "recent_offset": self.recent_offset,
            "history_offset": self.history_offset,
            "demographics_offset": self.demographics_offset,
            "channel_offsets": self.channel_offsets,
            "demographics_columns": self.demographics_columns,
        }

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        if d.get("version") != VOCAB_VERSION:
            raise DataError(f"unsupported vocabulary version {d.get('version')}")
        return cls(channels=d["channels"], min_count=d["min_count"], demographics=d["demographics"],
                   age_mean=d["age_mean"], age_std=d["age_std"])


def _event_tokens(events: pd.DataFrame, lab_ranges) -> dict:
    """Channel -> array of tokens (None where the event has no token in that channel)."""
    kind = events["kind"].to_numpy()
    code = events["code"].to_numpy()
    out = {}
    for ch in ("diagnosis", "procedure", "medication", "lab"):
        out[ch] = np.where(kind == ch, code, None)
    lab_res = np.full(len(events), None, dtype=object)
    is_lab = kind == "lab"
    if lab_ranges and is_lab.any():
        lab_res[is_lab] = _lab_result_tokens(code[is_lab], events["value"].to_numpy()[is_lab], lab_ranges)
    out["lab_result"] = lab_res
    out["encounter"] = np.where(np.isin(kind, ["encounter_start", "encounter_end"]), code, None)
    return out


def build_vocabulary(events: pd.DataFrame, min_count: int = 100, lab_ranges=None, patients=None,
                     age_years=None) -> Vocabulary:
    """Keep codes seen at least ``min_count`` times in the (training) events.

    Columns are sorted by token, so the result ignores event order.
    """
    channels = {}
    if len(events):
        toks = _event_tokens(events, lab_ranges or {})
        for ch in SEQUENCE_CHANNELS:
            counts = Counter(t for t in toks[ch] if t is not None)
            channels[ch] = sorted(t for t, n in counts.items() if n >= min_count)
    else:
        channels = {ch: [] for ch in SEQUENCE_CHANNELS}
    demographics = {}
    for f in DEMOGRAPHIC_FIELDS:
        seen = set() if patients is None or len(patients) == 0 else set(patients[f].astype(str))
        seen.discard(OTHER)
        demographics[f] = sorted(seen) + [OTHER]
    age_mean, age_std = 0.0, 1.0
    if age_years is not None and len(age_years):
        age_mean = float(np.mean(age_years))
        age_std = float(np.std(age_years)) or 1.0
    return Vocabulary(channels=channels, min_count=min_count, demographics=demographics,
                      age_mean=age_mean, age_std=age_std)


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray
    width: int

    def __post_init__(self):
        if len(self.indices) and (np.any(np.diff(self.indices) <= 0) or self.indices[-1] >= self.width
                                  or self.indices[0] < 0):
            raise ValueError("indices must be strictly increasing and < width")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.width)
        out[self.indices] = self.values
        return out


@dataclass
class PatientTimeline:
    """One patient's events, encoded against a vocabulary, plus encounters.

    ``cols_a``/``cols_b`` give each event's column inside a count block
    (``-1`` when out of vocabulary); lab events use both.  ``seq_tokens``
    gives the per-channel token index used by the sequence model.
    """

    patient_id: str
    birth_date: int
    demographics: dict
    timestamps: np.ndarray
    cols_a: np.ndarray
    cols_b: np.ndarray
    seq_tokens: dict
    encounters: list


def encode_timelines(events: pd.DataFrame, patients: pd.DataFrame, encounters, lab_ranges, vocab: Vocabulary,
                     patient_ids=None) -> dict:
    """Build a PatientTimeline per patient (restricted to ``patient_ids`` if given)."""
    if patient_ids is not None:
        wanted = set(patient_ids)
        events = events[events["patient_id"].isin(wanted)]
        patients = patients[patients["patient_id"].isin(wanted)]
    events = events.sort_values(["patient_id", "timestamp"], kind="stable")
    toks = _event_tokens(events, lab_ranges or {})
    offsets = vocab.channel_offsets
    cols_a = np.full(len(events), -1, dtype=np.int64)
    for ch in ("diagnosis", "procedure", "medication", "lab"):
        idx = vocab.index(ch)
        col = np.array([idx.get(t, -1) if t is not None else -1 for t in toks[ch]], dtype=np.int64)
        hit = col >= 0
        cols_a[hit] = col[hit] + offsets[ch]
    idx = vocab.index("lab_result")
    cols_b = np.array([idx.get(t, -1) if t is not None else -1 for t in toks["lab_result"]], dtype=np.int64)
    cols_b[cols_b >= 0] += offsets["lab_result"]
    seq = {}
    for ch in SEQUENCE_CHANNELS:
        idx = vocab.index(ch)
        seq[ch] = np.array([idx.get(t, -1) if t is not None else -1 for t in toks[ch]], dtype=np.int64)

    by_pid_enc = {}
    for enc in encounters:
        by_pid_enc.setdefault(enc.patient_id, []).append(enc)
    pid = events["patient_id"].to_numpy()
    ts = events["timestamp"].to_numpy().astype(np.int64)
    bounds = {}
    if len(pid):
        change = np.flatnonzero(pid[1:] != pid[:-1]) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [len(pid)]])
        bounds = {pid[s]: (s, e) for s, e in zip(starts, ends)}

    out = {}
    for row in patients.itertuples(index=False):
        s, e = bounds.get(row.patient_id, (0, 0))
        out[row.patient_id] = PatientTimeline(
            patient_id=row.patient_id,
            birth_date=int(row.birth_date),
            demographics={f: str(getattr(row, f)) for f in DEMOGRAPHIC_FIELDS},
            timestamps=ts[s:e],
            cols_a=cols_a[s:e],
            cols_b=cols_b[s:e],
            seq_tokens={ch: seq[ch][s:e] for ch in SEQUENCE_CHANNELS},
            encounters=sorted(by_pid_enc.get(row.patient_id, []), key=lambda x: x.admit),
        )
    return out


def _surgery_at(encounters, t) -> float:
    for enc in encounters:
        if enc.admit <= t < enc.discharge:
            return float(enc.surgery_flag)
    return 0.0


def featurize_day(timeline: PatientTimeline, anchor: int, vocab: Vocabulary) -> SparseVector:
    """Fixed-length vector for one (patient, anchor).

    Recent counts cover ``[anchor - 24h, anchor)``; historical counts cover
    ``[anchor - 180d, anchor - 24h)``.  Nothing at or after the anchor is read.
    """
    ts = timeline.timestamps
    dense = np.zeros(vocab.width)
    for lo, hi, off in ((anchor - RECENT_WINDOW, anchor, vocab.recent_offset),
                        (anchor - HISTORY_WINDOW, anchor - RECENT_WINDOW, vocab.history_offset)):
        sel = (ts >= lo) & (ts < hi)
        for cols in (timeline.cols_a[sel], timeline.cols_b[sel]):
            cols = cols[cols >= 0]
            np.add.at(dense, off + cols, 1.0)
    d0 = vocab.demographics_offset
    dense[d0] = (anchor - timeline.birth_date) / _YEAR
    cat = vocab.demographic_vector(timeline.demographics)
    dense[d0 + 1:d0 + 1 + len(cat)] = cat
    dense[d0 + 1 + len(cat)] = _surgery_at(timeline.encounters, anchor)
    nz = np.flatnonzero(dense)
    return SparseVector(indices=nz, values=dense[nz], width=vocab.width)


def featurize_examples(timelines: dict, examples, vocab: Vocabulary) -> sp.csr_matrix:
    """Vectorised featurize_day over many examples; rows follow ``examples`` order."""
    n = len(examples)
    width = vocab.width
    if n == 0:
        return sp.csr_matrix((0, width))
    order = sorted(timelines)
    pos = {pid: i for i, pid in enumerate(order)}
    lens = np.array([len(timelines[p].timestamps) for p in order], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(lens)[:-1]]).astype(np.int64)
    ts = np.concatenate([timelines[p].timestamps for p in order]) if lens.sum() else np.zeros(0, np.int64)
    ca = np.concatenate([timelines[p].cols_a for p in order]) if lens.sum() else np.zeros(0, np.int64)
    cb = np.concatenate([timelines[p].cols_b for p in order]) if lens.sum() else np.zeros(0, np.int64)
    pidx = np.repeat(np.arange(len(order), dtype=np.int64), lens)
    key = (pidx << 34) | ts

    ex_p = np.array([pos[e.patient_id] for e in examples], dtype=np.int64)
    anchor = np.array([e.anchor for e in examples], dtype=np.int64)

    def bound(t):
        return np.searchsorted(key, (ex_p << 34) | t, side="left")

    hi = bound(anchor)
    mid = bound(anchor - RECENT_WINDOW)
    lo = bound(anchor - HISTORY_WINDOW)

    rows, cols = [], []
    for a, b, off in ((mid, hi, vocab.recent_offset), (lo, mid, vocab.history_offset)):
        counts = b - a
        total = int(counts.sum())
        if total == 0:
            continue
        row = np.repeat(np.arange(n, dtype=np.int64), counts)
        first = np.repeat(a - np.concatenate([[0], np.cumsum(counts)[:-1]]), counts)
        ev = first + np.arange(total)
        for c in (ca[ev], cb[ev]):
            keep = c >= 0
            rows.append(row[keep])
            cols.append(c[keep] + off)

    d0 = vocab.demographics_offset
    birth = np.array([timelines[e.patient_id].birth_date for e in examples], dtype=np.int64)
    age = (anchor - birth) / _YEAR
    cat_cache = {}
    cat_rows = []
    for e in examples:
        pid = e.patient_id
        if pid not in cat_cache:
            cat_cache[pid] = vocab.demographic_vector(timelines[pid].demographics)
        cat_rows.append(cat_cache[pid])
    cat = np.array(cat_rows)
    surgery = np.array([_surgery_at(timelines[e.patient_id].encounters, e.anchor) for e in examples])
    demo = np.column_stack([age, cat, surgery])
    dr, dc = np.nonzero(demo)

    count_rows = np.concatenate(rows) if rows else np.zeros(0, np.int64)
    count_cols = np.concatenate(cols) if cols else np.zeros(0, np.int64)
    all_rows = np.concatenate([count_rows, dr])
    all_cols = np.concatenate([count_cols, dc + d0])
    all_vals = np.concatenate([np.ones(len(count_rows)), demo[dr, dc]])
    mat = sp.coo_matrix((all_vals, (all_rows, all_cols)), shape=(n, width)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def row_vector(matrix: sp.csr_matrix, i: int) -> SparseVector:
    a, b = matrix.indptr[i], matrix.indptr[i + 1]
    return SparseVector(indices=matrix.indices[a:b].astype(np.int64), values=matrix.data[a:b].copy(),
                        width=matrix.shape[1])


# ---------------------------------------------------------------- sequences


@dataclass
class DaySequence:
    """Per-day steps for one patient.

    ``tokens[ch]`` is ``(indptr, ids)`` over steps.  ``targets``/``defined``
    are ``(T, 3)`` in TASKS order.
    """

    patient_id: str
    days: np.ndarray
    tokens: dict
    demographics: np.ndarray
    targets: np.ndarray
    defined: np.ndarray

    def __len__(self):
        return len(self.days)

    def step_of_anchor(self, anchor: int) -> int:
        """Index of the step whose day ends at ``anchor``, or -1."""
        day = anchor // DAY - 1
        i = int(np.searchsorted(self.days, day))
        return i if i < len(self.days) and self.days[i] == day else -1


def _inpatient_at(encounters, t):
    for enc in encounters:
        if enc.admit <= t < enc.discharge:
            return enc
    return None


def build_sequence(timeline: PatientTimeline, vocab: Vocabulary, end_day=None) -> DaySequence:
    """Group a patient's events by UTC day, one step per day with events or a stay.

    Step targets at day D (with ``m`` the midnight ending D): discharge in
    ``(m, m + 24h]`` (defined only when inpatient at ``m``), inpatient at
    ``m``, inpatient at ``m + 24h``.
    """
    ts = timeline.timestamps
    ev_day = ts // DAY
    day_sets = [np.unique(ev_day)]
    for enc in timeline.encounters:
        first = min(enc.admit // DAY, -(-enc.admit // DAY) - 1)
        last = (enc.discharge - 1) // DAY
        day_sets.append(np.arange(first, last + 1))
    days = np.unique(np.concatenate(day_sets)) if day_sets else np.zeros(0, np.int64)
    if end_day is not None:
        days = days[days < end_day]
    if len(days) == 0:
        raise DataError(f"patient {timeline.patient_id}: no events or inpatient days before end day")
    days = days.astype(np.int64)

    step_of_event = np.searchsorted(days, ev_day)
    valid = (step_of_event < len(days))
    valid[valid] &= days[step_of_event[valid]] == ev_day[valid]
    tokens = {}
    for ch in SEQUENCE_CHANNELS:
        ids = timeline.seq_tokens[ch]
        keep = valid & (ids >= 0)
        steps = step_of_event[keep]
        order = np.argsort(steps, kind="stable")
        indptr = np.concatenate([[0], np.cumsum(np.bincount(steps, minlength=len(days)))])
        tokens[ch] = (indptr.astype(np.int64), ids[keep][order].astype(np.int64))

    cat = vocab.demographic_vector(timeline.demographics)
    T = len(days)
    ends = (days + 1) * DAY
    demo = np.zeros((T, 2 + len(cat)))
    demo[:, 0] = (ends - timeline.birth_date) / _YEAR
    demo[:, 1:1 + len(cat)] = cat
    targets = np.zeros((T, 3))
    defined = np.ones((T, 3), dtype=bool)
    for i, m in enumerate(ends):
        now = _inpatient_at(timeline.encounters, m)
        nxt = _inpatient_at(timeline.encounters, m + DAY)
        day_start = m - DAY
        overlapping = [e for e in timeline.encounters if e.admit < m and e.discharge > day_start]
        demo[i, -1] = float(any(e.surgery_flag for e in overlapping))
        targets[i, 1] = now is not None
        targets[i, 2] = nxt is not None
        if now is None:
            defined[i, 0] = False
        else:
            targets[i, 0] = m < now.discharge <= m + DAY
    return DaySequence(timeline.patient_id, days, tokens, demo, targets, defined)


@dataclass
class SequenceBatch:
    """Right-padded batch.  ``mask[b, t]`` is False on padding."""

    seq_index: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    tokens: dict  # channel -> (indptr over B*T flattened steps, ids)
    demographics: np.ndarray  # (B, T, q)
    targets: np.ndarray  # (B, T, 3)
    defined: np.ndarray  # (B, T, 3), False on padding

    @property
    def shape(self):
        return self.mask.shape


def pad_batch(sequences, seq_index) -> SequenceBatch:
    seqs = [sequences[i] for i in seq_index]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    B, T = len(seqs), int(lengths.max())
    q = seqs[0].demographics.shape[1]
    mask = np.arange(T)[None, :] < lengths[:, None]
    demo = np.zeros((B, T, q))
    targets = np.zeros((B, T, 3))
    defined = np.zeros((B, T, 3), dtype=bool)
    tokens = {}
    for ch in seqs[0].tokens:
        counts = np.zeros(B * T, dtype=np.int64)
        ids = []
        for b, s in enumerate(seqs):
            indptr, tok = s.tokens[ch]
            counts[b * T:b * T + len(s)] = np.diff(indptr)
            ids.append(tok)
        tokens[ch] = (np.concatenate([[0], np.cumsum(counts)]), np.concatenate(ids) if ids else np.zeros(0, np.int64))
    for b, s in enumerate(seqs):
        L = len(s)
        demo[b, :L] = s.demographics
        targets[b, :L] = s.targets
        defined[b, :L] = s.defined
    return SequenceBatch(np.asarray(seq_index), lengths, mask, tokens, demo, targets, defined)


def batch_sequences(sequences, batch_size: int):
    """Sort by length (stable) and cut into contiguous batches of ``batch_size``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(range(len(sequences)), key=lambda i: len(sequences[i]))
    return [pad_batch(sequences, order[i:i + batch_size]) for i in range(0, len(order), batch_size)]


# ---------------------------------------------------------------- artifacts

_MAGIC = b"DSFEAT01"


def write_features_bin(path, matrix: sp.csr_matrix, example_ids):
    m = matrix.tocsr()
    m.sort_indices()
    ids = np.asarray(example_ids, dtype="<i8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(np.array([m.shape[0], m.shape[1], m.nnz], dtype="<i8").tobytes())
        fh.write(ids.tobytes())
        fh.write(m.indptr.astype("<i8").tobytes())
        fh.write(m.indices.astype("<i4").tobytes())
        fh.write(m.data.astype("<f8").tobytes())


def read_features_bin(path):
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise DataError(f"{path}: not a feature file")
    n, width, nnz = np.frombuffer(raw, dtype="<i8", count=3, offset=8)
    off = 32
    ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off)
    off += 8 * n
    indptr = np.frombuffer(raw, dtype="<i8", count=n + 1, offset=off)
    off += 8 * (n + 1)
    indices = np.frombuffer(raw, dtype="<i4", count=nnz, offset=off)
    off += 4 * nnz
    data = np.frombuffer(raw, dtype="<f8", count=nnz, offset=off)
    mat = sp.csr_matrix((data.copy(), indices.copy(), indptr.copy()), shape=(int(n), int(width)))
    return mat, ids.copy()
