"""Deterministic synthetic EHR generator with a planted discharge signal.

Each patient gets demographics, a Poisson stream of outpatient visits and a
spaced sequence of inpatient stays.  During a stay, the chance of being
discharged in the 24h after each midnight is ``sigmoid(bias + sum of weights of
planted codes seen that day)``; ``bias`` is found by bisection so that the
day-level label prevalence hits the configured target.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError
from .timeutil import DAY, HOUR, to_epoch, to_iso

log = logging.getLogger(__name__)

FAMILIES = ("diagnosis", "procedure", "medication", "lab")
KINDS = ("diagnosis", "procedure", "medication", "lab", "encounter_start", "encounter_end")
FAMILY_PREFIX = {"diagnosis": "DX", "procedure": "PX", "medication": "MED", "lab": "LAB"}

GENDERS = ("F", "M", "U")
RACES = ("white", "black", "asian", "pacific_islander", "native_american", "unknown")
ETHNICITIES = ("non_hispanic", "hispanic", "unknown")
INSURANCES = ("medicare", "medicaid", "private", "self_pay")

# named substreams: a new concern gets a new id, never reuses one
_STREAM_GLOBAL = 0
_STREAM_DEMOGRAPHICS = 1
_STREAM_ENCOUNTERS = 2
_STREAM_EVENTS = 3
_STREAM_HAZARDS = 4

_ZIPF_EXPONENT = 1.1
_PLANTED_DAILY_RATE = 0.3
# background events per full inpatient day, by family
_INPATIENT_RATES = {"diagnosis": 1.0, "procedure": 1.0, "medication": 3.0, "lab": 3.0}
_ADMISSION_DIAGNOSES = 2.0
# outpatient visits last one hour; rates are per day, so these give ~2/0.5/1/1 codes per visit
_OUTPATIENT_RATES = {"diagnosis": 48.0, "procedure": 12.0, "medication": 24.0, "lab": 24.0}
_NESTED_PROB = 0.08
_SPLIT_PROB = 0.05
_SURGERY_PROB = 0.3


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 5000
    date_range: tuple = ("2010-01-01", "2018-02-10")
    code_pool_sizes: dict = field(
        default_factory=lambda: {"diagnosis": 40, "procedure": 20, "medication": 30, "lab": 15}
    )
    mean_los_days: float = 5.0
    target_prevalence: float = 0.18
    signal_strength: float = 1.0
    seed: int = 0
    admissions_per_year: float = 0.25
    outpatient_visits_per_year: float = 2.0
    n_planted: int = 8

    def validate(self):
        if self.n_patients < 0:
            raise ConfigError("n_patients must be >= 0")
        start, end = (to_epoch(d) for d in self.date_range)
        if not start < end:
            raise ConfigError("date_range start must precede end")
        if not 0.0 < self.target_prevalence < 1.0:
            raise ConfigError(f"target_prevalence must lie in (0, 1), got {self.target_prevalence}")
        if self.mean_los_days <= 0:
            raise ConfigError("mean_los_days must be positive")
        if self.signal_strength < 0:
            raise ConfigError("signal_strength must be non-negative")
        for fam in FAMILIES:
            if self.code_pool_sizes.get(fam, 0) < 1:
                raise ConfigError(f"code_pool_sizes[{fam!r}] must be >= 1")
        if self.n_planted > sum(self.code_pool_sizes[f] for f in ("procedure", "medication", "lab")) - 3:
            raise ConfigError("n_planted too large for the procedure/medication/lab pools")
        if (end - start) < (self.max_stay_days + 2) * DAY:
            raise ConfigError("date_range too short for a single stay")
        return self

    @property
    def max_stay_days(self) -> int:
        """Stays are forcibly ended after this many midnights."""
        return int(math.ceil(6 * self.mean_los_days))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    birth_date: int
    gender: str
    race: str
    ethnicity: str
    insurance: str


@dataclass(frozen=True)
class EventRecord:
    patient_id: str
    kind: str
    code: str
    timestamp: int
    value: float | None = None
    surgery_flag: bool | None = None


@dataclass
class TruthLog:
    planted_codes: list
    planted_weights: list
    bias: float
    realized_prevalence: float
    n_stays: int
    n_stay_days: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _rng(seed: int, stream: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, stream, *key]))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class _CodeBook:
    """Global code table plus per-family Zipf sampling weights."""

    def __init__(self, cfg: SynthConfig):
        self.tokens = []
        self.family_codes = {}
        for fam in FAMILIES:
            n = cfg.code_pool_sizes[fam]
            start = len(self.tokens)
            self.tokens += [f"{FAMILY_PREFIX[fam]}{i:04d}" for i in range(n)]
            self.family_codes[fam] = np.arange(start, start + n)
        self.code_kind = np.concatenate(
            [np.full(len(self.family_codes[f]), KINDS.index(f), dtype=np.int8) for f in FAMILIES]
        )
        self.enc_inpatient = len(self.tokens)
        self.enc_procedure = self.enc_inpatient + 1
        self.tokens += ["inpatient", "procedure"]

        rng = _rng(cfg.seed, _STREAM_GLOBAL)
        # planted codes come from mid-frequency ranks of procedure/medication/lab
        candidates = np.concatenate([self.family_codes[f][1:] for f in ("procedure", "medication", "lab")])
        self.planted = np.sort(rng.choice(candidates, size=cfg.n_planted, replace=False))
        signs = np.where(np.arange(cfg.n_planted) % 2 == 0, 1.0, -1.0)
        self.planted_weights = cfg.signal_strength * signs * rng.uniform(1.0, 2.0, size=cfg.n_planted)

        planted = set(self.planted.tolist())
        self.family_probs = {}
        for fam in FAMILIES:
            codes = self.family_codes[fam]
            p = 1.0 / np.arange(1, len(codes) + 1) ** _ZIPF_EXPONENT
            p[[c in planted for c in codes]] = 0.0
            self.family_probs[fam] = p / p.sum()

        lab_codes = self.family_codes["lab"]
        center = rng.uniform(1.0, 100.0, size=len(lab_codes))
        width = center * rng.uniform(0.2, 0.5, size=len(lab_codes))
        low = center - width / 2
        high = center + width / 2
        panic_low = low - width * rng.uniform(0.5, 1.0, size=len(lab_codes))
        panic_high = high + width * rng.uniform(0.5, 1.0, size=len(lab_codes))
        self.lab_ranges = {
            self.tokens[c]: tuple(round(float(v), 4) for v in (low[i], high[i], panic_low[i], panic_high[i]))
            for i, c in enumerate(lab_codes)
        }
        self._lab_bounds = np.stack([low, high, panic_low, panic_high, width], axis=1)
        self._lab_base = lab_codes[0]

    def lab_values(self, rng, codes):
        b = self._lab_bounds[codes - self._lab_base]
        low, high, plo, phi, w = b.T
        u = rng.random(len(codes))
        side = rng.random(len(codes)) < 0.5
        frac = rng.random(len(codes))
        normal = low + frac * (high - low)
        abnormal = np.where(side, plo + frac * (low - plo), high + frac * (phi - high))
        panic = np.where(side, plo - (0.01 + frac) * w, phi + (0.01 + frac) * w)
        vals = np.where(u < 0.7, normal, np.where(u < 0.95, abnormal, panic))
        return np.round(vals, 4)


def lab_reference_ranges(config: SynthConfig) -> dict:
    """(low, high, panic_low, panic_high) per lab code, fixed by the seed."""
    return dict(_CodeBook(config).lab_ranges)


@dataclass
class _Stay:
    admit: int
    surgery: bool
    presence: np.ndarray  # (max_days, n_planted) bool
    uniforms: np.ndarray  # (max_days,)
    nested: bool
    split: bool
    n_anchors: int = 0
    discharge: int = 0


def _anchor_count(presence_score, uniforms, bias):
    """Number of midnight anchors before discharge, vectorised over stays."""
    hazard = _sigmoid(bias + presence_score)
    hit = uniforms < hazard
    hit[:, -1] = True
    return hit.argmax(axis=1) + 1


def _plan_patient(cfg, book, idx, start, end):
    rng = _rng(cfg.seed, _STREAM_DEMOGRAPHICS, idx)
    birth = start - int(rng.uniform(18, 85) * 365.25 * DAY) - int(rng.integers(0, DAY))
    patient = PatientRecord(
        patient_id=f"P{idx:06d}",
        birth_date=birth,
        gender=GENDERS[rng.choice(len(GENDERS), p=[0.52, 0.46, 0.02])],
        race=RACES[rng.choice(len(RACES), p=[0.55, 0.12, 0.18, 0.02, 0.02, 0.11])],
        ethnicity=ETHNICITIES[rng.choice(len(ETHNICITIES), p=[0.78, 0.17, 0.05])],
        insurance=INSURANCES[rng.choice(len(INSURANCES), p=[0.4, 0.15, 0.4, 0.05])],
    )

    erng = _rng(cfg.seed, _STREAM_ENCOUNTERS, idx)
    hrng = _rng(cfg.seed, _STREAM_HAZARDS, idx)
    cap = cfg.max_stay_days
    mean_gap = 365.25 * DAY / cfg.admissions_per_year
    stays = []
    t = start + erng.exponential(mean_gap)
    last_admit = end - (cap + 2) * DAY
    while t < last_admit:
        day0 = int(t // DAY) * DAY
        admit = day0 + int(erng.integers(6 * HOUR, 22 * HOUR))
        stays.append(
            _Stay(
                admit=admit,
                surgery=bool(erng.random() < _SURGERY_PROB),
                presence=hrng.random((cap, cfg.n_planted)) < _PLANTED_DAILY_RATE,
                uniforms=hrng.random(cap),
                nested=bool(erng.random() < _NESTED_PROB),
                split=bool(erng.random() < _SPLIT_PROB),
            )
        )
        t = admit + (cap + 2) * DAY + erng.exponential(mean_gap)
    return patient, stays


def _calibrate_bias(scores, uniforms, target):
    if len(scores) == 0:
        return 0.0
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        prevalence = len(scores) / _anchor_count(scores, uniforms, mid).sum()
        if prevalence < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


class _Emitter:
    def __init__(self):
        self.kind, self.code, self.value, self.ts, self.surgery = [], [], [], [], []

    def add(self, kind, codes, ts, values=None, surgery=None):
        n = len(codes)
        if n == 0:
            return
        self.kind.append(np.full(n, kind, dtype=np.int8))
        self.code.append(np.asarray(codes, dtype=np.int32))
        self.ts.append(np.asarray(ts, dtype=np.int64))
        self.value.append(np.full(n, np.nan) if values is None else np.asarray(values, dtype=float))
        self.surgery.append(np.zeros(n, dtype=bool) if surgery is None else np.asarray(surgery, dtype=bool))

    def arrays(self):
        if not self.kind:
            return (np.zeros(0, np.int8), np.zeros(0, np.int32), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, bool))
        return tuple(np.concatenate(x) for x in (self.kind, self.code, self.value, self.ts, self.surgery))


_KIND_ID = {k: i for i, k in enumerate(KINDS)}


def _background(em, rng, book, lo, hi, rates):
    """Draw background events uniformly within each window [lo[i], hi[i]).

    ``rates`` maps family -> per-day rate, scalar or one value per window.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=np.int64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.int64))
    frac = (hi - lo) / DAY
    for fam, rate in rates.items():
        counts = rng.poisson(np.asarray(rate) * frac)
        n = int(counts.sum())
        if n == 0:
            continue
        pool = book.family_codes[fam]
        codes = pool[rng.choice(len(pool), size=n, p=book.family_probs[fam])]
        lo_r = np.repeat(lo, counts)
        ts = lo_r + (rng.random(n) * np.repeat(hi - lo, counts)).astype(np.int64)
        values = book.lab_values(rng, codes) if fam == "lab" else None
        em.add(_KIND_ID[fam], codes, ts, values)


def _emit_patient(cfg, book, idx, stays, start, end):
    rng = _rng(cfg.seed, _STREAM_EVENTS, idx)
    em = _Emitter()
    planted = book.planted
    for stay in stays:
        first_midnight = (stay.admit // DAY + 1) * DAY
        anchors = first_midnight + DAY * np.arange(stay.n_anchors)
        last = anchors[-1]
        stay.discharge = int(last + rng.integers(HOUR, 23 * HOUR))

        lo = np.concatenate([[stay.admit], anchors[:-1]])
        rates = dict(_INPATIENT_RATES)
        rates["diagnosis"] = np.full(len(anchors), rates["diagnosis"])
        rates["diagnosis"][0] += _ADMISSION_DIAGNOSES
        _background(em, rng, book, lo, anchors, rates)
        day_idx, which = np.nonzero(stay.presence[: stay.n_anchors])
        if len(day_idx):
            present = planted[which]
            ts = lo[day_idx] + (rng.random(len(day_idx)) * (anchors[day_idx] - lo[day_idx])).astype(np.int64)
            kinds = book.code_kind[present]
            for kind in np.unique(kinds):
                sel = kinds == kind
                vals = book.lab_values(rng, present[sel]) if kind == _KIND_ID["lab"] else None
                em.add(kind, present[sel], ts[sel], vals)
        _background(em, rng, book, last, stay.discharge, _INPATIENT_RATES)

        s, e = stay.admit, stay.discharge
        if stay.split and stay.n_anchors >= 2:
            # the stay is recorded as two encounters separated by a short daytime gap
            cut_day = int(anchors[1])
            cut = cut_day + int(rng.integers(8 * HOUR, 12 * HOUR))
            gap = int(rng.integers(HOUR, 6 * HOUR))
            pieces = [(s, cut), (cut + gap, e)] if cut + gap < e else [(s, e)]
        else:
            pieces = [(s, e)]
        for a, b in pieces:
            em.add(_KIND_ID["encounter_start"], [book.enc_inpatient], [a], surgery=[stay.surgery])
            em.add(_KIND_ID["encounter_end"], [book.enc_inpatient], [b])
        if stay.nested and e - s > 8 * HOUR:
            a = int(rng.integers(s + HOUR, e - 6 * HOUR))
            b = a + int(rng.integers(HOUR, 4 * HOUR))
            em.add(_KIND_ID["encounter_start"], [book.enc_procedure], [a], surgery=[False])
            em.add(_KIND_ID["encounter_end"], [book.enc_procedure], [b])

    n_visits = rng.poisson(cfg.outpatient_visits_per_year * (end - start) / (365.25 * DAY))
    visits = np.sort(rng.integers(start, end - 2 * HOUR, size=n_visits))
    _background(em, rng, book, visits, visits + HOUR, _OUTPATIENT_RATES)
    return em.arrays()


def generate_dataset(config: SynthConfig):
    """Generate ``(patients, events, truth)``.

    ``patients`` and ``events`` are DataFrames; ``events`` is sorted by time and
    its ``timestamp`` column holds UTC epoch seconds.  ``truth`` records the
    planted signal for diagnostics only.
    """
    cfg = config.validate()
    start, end = (to_epoch(d) for d in cfg.date_range)
    book = _CodeBook(cfg)

    plans = [_plan_patient(cfg, book, i, start, end) for i in range(cfg.n_patients)]
    stays = [s for _, ss in plans for s in ss]
    if stays:
        scores = np.stack([s.presence @ book.planted_weights for s in stays])
        uniforms = np.stack([s.uniforms for s in stays])
        bias = _calibrate_bias(scores, uniforms, cfg.target_prevalence)
        counts = _anchor_count(scores, uniforms, bias)
        for s, c in zip(stays, counts):
            s.n_anchors = int(c)
        n_days = int(counts.sum())
    else:
        bias, n_days = 0.0, 0

    pids, chunks = [], []
    for i, (patient, pstays) in enumerate(plans):
        arrays = _emit_patient(cfg, book, i, pstays, start, end)
        pids.append(np.full(len(arrays[0]), i, dtype=np.int32))
        chunks.append(arrays)

    patients = pd.DataFrame(
        [asdict(p) for p, _ in plans],
        columns=["patient_id", "birth_date", "gender", "race", "ethnicity", "insurance"],
    )
    events = _assemble_events(patients, pids, chunks, book)
    truth = TruthLog(
        planted_codes=[book.tokens[c] for c in book.planted],
        planted_weights=[float(w) for w in book.planted_weights],
        bias=float(bias),
        realized_prevalence=float(len(stays) / n_days) if n_days else float("nan"),
        n_stays=len(stays),
        n_stay_days=n_days,
    )
    log.info("generated %d patients, %d events, prevalence %.4f", len(patients), len(events), truth.realized_prevalence)
    return patients, events, truth


def _assemble_events(patients, pids, chunks, book):
    cols = ["patient_id", "kind", "code", "value", "timestamp", "surgery_flag"]
    if not chunks or sum(len(c[0]) for c in chunks) == 0:
        return pd.DataFrame({c: pd.Series(dtype=t) for c, t in zip(cols, [object, object, object, float, np.int64, bool])})
    pidx = np.concatenate(pids)
    kind, code, value, ts, surgery = (np.concatenate([c[k] for c in chunks]) for k in range(5))
    # time order; ties broken by patient, then kind, then code for a canonical stream
    order = np.lexsort((code, kind, pidx, ts))
    tokens = np.array(book.tokens, dtype=object)
    return pd.DataFrame(
        {
            "patient_id": patients["patient_id"].to_numpy()[pidx[order]],
            "kind": np.array(KINDS, dtype=object)[kind[order]],
            "code": tokens[code[order]],
            "value": value[order],
            "timestamp": ts[order],
            "surgery_flag": surgery[order],
        },
        columns=cols,
    )


def iter_event_records(events: pd.DataFrame):
    for pid, kind, code, value, ts, surg in events[
        ["patient_id", "kind", "code", "value", "timestamp", "surgery_flag"]
    ].itertuples(index=False):
        yield EventRecord(
            patient_id=pid,
            kind=kind,
            code=code,
            timestamp=int(ts),
            value=float(value) if kind == "lab" else None,
            surgery_flag=bool(surg) if kind == "encounter_start" else None,
        )


def write_patients_csv(patients: pd.DataFrame, path):
    out = patients.copy()
    out["birth_date"] = [to_iso(t) for t in out["birth_date"]]
    out.to_csv(path, index=False, lineterminator="\n")


def read_patients_csv(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    df["birth_date"] = [to_epoch(t) for t in df["birth_date"]]
    return df


def _iso_array(ts) -> np.ndarray:
    return np.char.add(np.datetime_as_string(np.asarray(ts, dtype=np.int64).astype("datetime64[s]"), unit="s"), "Z")


def write_events_jsonl(events: pd.DataFrame, path):
    iso = _iso_array(events["timestamp"].to_numpy())
    cols = zip(events["patient_id"], events["kind"], events["code"], events["value"], iso, events["surgery_flag"])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pid, kind, code, value, ts, surg in cols:
            row = {"patient_id": pid, "kind": kind, "code": code}
            if kind == "lab":
                row["value"] = float(value)
            row["timestamp"] = str(ts)
            if kind == "encounter_start":
                row["surgery_flag"] = bool(surg)
            fh.write(json.dumps(row) + "\n")


def read_events_jsonl(path) -> pd.DataFrame:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    df = pd.DataFrame(rows, columns=["patient_id", "kind", "code", "value", "timestamp", "surgery_flag"])
    df["value"] = df["value"].astype(float)
    try:
        stamps = np.array([t[:-1] if t.endswith("Z") else t for t in df["timestamp"]], dtype="datetime64[s]")
        df["timestamp"] = stamps.astype(np.int64)
    except ValueError:
        df["timestamp"] = np.array([to_epoch(t) for t in df["timestamp"]], dtype=np.int64)
    df["surgery_flag"] = np.array([v is True for v in df["surgery_flag"]], dtype=bool)
    return df


def write_dataset(out_dir, patients, events, truth, lab_ranges):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_patients_csv(patients, out / "patients.csv")
    write_events_jsonl(events, out / "events.jsonl")
    (out / "truth.json").write_text(truth.to_json() + "\n")
    (out / "lab_ranges.json").write_text(json.dumps(lab_ranges, indent=2, sort_keys=True) + "\n")
