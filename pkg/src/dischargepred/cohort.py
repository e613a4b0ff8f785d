"""Encounter cleaning, per-day labelled examples and the temporal split."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from itertools import groupby
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import DataError
from .timeutil import DAY, HOUR, to_epoch, to_iso

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")
WARN_CUTOFF_BEFORE_DATA = "cutoff_before_data"
WARN_CUTOFF_AFTER_DATA = "cutoff_after_data"


@dataclass(frozen=True)
class Encounter:
    patient_id: str
    admit: int
    discharge: int
    surgery_flag: bool = False
    source_ids: tuple = ()

    def __post_init__(self):
        if not self.admit < self.discharge:
            raise DataError(f"encounter {self.source_ids} for {self.patient_id}: admit must precede discharge")

    @property
    def encounter_id(self) -> str:
        return f"{self.patient_id}@{self.admit}"


@dataclass(frozen=True)
class DayExample:
    patient_id: str
    encounter_id: str
    admit: int
    discharge: int
    anchor: int
    label: bool
    split: str | None = None


@dataclass
class SplitDataset:
    train: list
    validation: list
    test: list
    cutoff: int
    prevalence: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def by_split(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}

    def all_examples(self):
        return self.train + self.validation + self.test


def _by_patient(encounters):
    ordered = sorted(encounters, key=lambda e: e.patient_id)
    for pid, group in groupby(ordered, key=lambda e: e.patient_id):
        yield pid, list(group)


def remove_nested(encounters):
    """Drop encounters whose interval lies inside another encounter of the same patient.

    Identical intervals keep the one with the lowest source id.
    """
    out = []
    for _, group in _by_patient(encounters):
        group.sort(key=lambda e: (e.admit, -e.discharge, min(e.source_ids, default="")))
        reach = None
        for enc in group:
            if reach is not None and enc.discharge <= reach:
                continue
            out.append(enc)
            reach = enc.discharge
    return out


def merge_within_gap(encounters, gap: int = 12 * HOUR):
    """Merge same-patient encounters separated by less than ``gap`` seconds.

    Overlaps have a negative gap and are merged too.  Repeats until no pair
    qualifies.
    """
    out = []
    for _, group in _by_patient(encounters):
        current = sorted(group, key=lambda e: (e.admit, e.discharge))
        while True:
            merged = [current[0]]
            for enc in current[1:]:
                prev = merged[-1]
                if enc.admit - prev.discharge < gap:
                    merged[-1] = Encounter(
                        patient_id=prev.patient_id,
                        admit=min(prev.admit, enc.admit),
                        discharge=max(prev.discharge, enc.discharge),
                        surgery_flag=prev.surgery_flag or enc.surgery_flag,
                        source_ids=prev.source_ids + enc.source_ids,
                    )
                else:
                    merged.append(enc)
            if len(merged) == len(current):
                break
            current = merged
        out.extend(merged)
    return out


def clean_encounters(encounters, gap: int = 12 * HOUR):
    return merge_within_gap(remove_nested(encounters), gap=gap)


def encounters_from_events(events: pd.DataFrame):
    """Pair encounter_start/encounter_end events per patient (innermost first)."""
    enc = events[events["kind"].isin(["encounter_start", "encounter_end"])]
    if enc.empty:
        return []
    # at equal timestamps an end closes before a new start opens
    enc = enc.assign(_is_start=(enc["kind"] == "encounter_start").astype(int))
    enc = enc.sort_values(["patient_id", "timestamp", "_is_start"], kind="stable")
    out = []
    for pid, group in enc.groupby("patient_id", sort=True):
        stack = []
        k = 0
        for kind, ts, surg in zip(group["kind"], group["timestamp"], group["surgery_flag"]):
            if kind == "encounter_start":
                stack.append((int(ts), bool(surg), f"{pid}#{k:05d}"))
                k += 1
            else:
                if not stack:
                    raise DataError(f"patient {pid}: encounter_end at {to_iso(ts)} without a start")
                admit, flag, sid = stack.pop()
                if int(ts) > admit:
                    out.append(Encounter(pid, admit, int(ts), flag, (sid,)))
        if stack:
            raise DataError(f"patient {pid}: {len(stack)} encounter_start without an end")
    return out


def make_day_examples(encounter: Encounter, anchor_policy: str = "midnight"):
    """One example per UTC midnight ``m`` with ``admit <= m < discharge``.

    The label is true iff discharge falls in ``(m, m + 24h]``.
    """
    if anchor_policy != "midnight":
        raise ValueError(f"unsupported anchor policy {anchor_policy!r}")
    first = -(-encounter.admit // DAY) * DAY
    return [
        DayExample(
            patient_id=encounter.patient_id,
            encounter_id=encounter.encounter_id,
            admit=encounter.admit,
            discharge=encounter.discharge,
            anchor=m,
            label=m < encounter.discharge <= m + DAY,
        )
        for m in range(first, encounter.discharge, DAY)
    ]


def _hash64(*parts) -> int:
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def assign_holdout(patient_id: str, seed: int) -> str:
    """Seeded 50-50 assignment of a post-cutoff patient to validation or test."""
    return "test" if _hash64(seed, "holdout", patient_id) & 1 else "validation"


def _prevalence(examples):
    return float(np.mean([e.label for e in examples])) if examples else float("nan")


def split_cohort(day_examples, cutoff, seed: int, remove_validation_from_train: bool = True) -> SplitDataset:
    """Temporal split into train (before ``cutoff``) and validation/test (on/after).

    Every post-cutoff patient goes to validation or test by a seeded hash and
    keeps exactly one randomly chosen post-cutoff encounter there.  Test
    patients (and, by default, validation patients) are removed from train.
    """
    cutoff = to_epoch(cutoff)
    examples = list(day_examples)
    pre = [e for e in examples if e.admit < cutoff]
    post = [e for e in examples if e.admit >= cutoff]

    warnings = []
    if examples and not pre:
        warnings.append(WARN_CUTOFF_BEFORE_DATA)
    if examples and not post:
        warnings.append(WARN_CUTOFF_AFTER_DATA)
    for w in warnings:
        log.warning("split_cohort: %s (cutoff %s)", w, to_iso(cutoff))

    post_encounters = {}
    for e in post:
        post_encounters.setdefault(e.patient_id, set()).add(e.encounter_id)
    chosen = {}
    holdout = {}
    for pid, encs in post_encounters.items():
        holdout[pid] = assign_holdout(pid, seed)
        chosen[pid] = min(sorted(encs), key=lambda eid: _hash64(seed, "visit", eid))

    split = {"train": [], "validation": [], "test": []}
    for e in post:
        if chosen[e.patient_id] == e.encounter_id:
            s = holdout[e.patient_id]
            split[s].append(replace(e, split=s))
    excluded = {pid for pid, s in holdout.items() if s == "test" or remove_validation_from_train}
    split["train"] = [replace(e, split="train") for e in pre if e.patient_id not in excluded]

    for k in split:
        split[k].sort(key=lambda e: (e.patient_id, e.anchor))
    return SplitDataset(
        train=split["train"],
        validation=split["validation"],
        test=split["test"],
        cutoff=cutoff,
        prevalence={k: _prevalence(v) for k, v in split.items()},
        warnings=warnings,
    )


def build_cohort(events: pd.DataFrame, cutoff, seed: int, gap_hours: float = 12.0,
                 remove_validation_from_train: bool = True):
    """events -> (cleaned encounters, SplitDataset)."""
    encounters = clean_encounters(encounters_from_events(events), gap=int(gap_hours * HOUR))
    examples = [ex for enc in encounters for ex in make_day_examples(enc)]
    dataset = split_cohort(examples, cutoff, seed, remove_validation_from_train)
    return encounters, dataset


def summarize(dataset: SplitDataset) -> dict:
    out = {"cutoff": to_iso(dataset.cutoff), "warnings": list(dataset.warnings), "splits": {}}
    for name, exs in dataset.by_split().items():
        anchors = [e.anchor for e in exs]
        out["splits"][name] = {
            "period_start": to_iso(min(anchors)) if anchors else None,
            "period_end": to_iso(max(anchors)) if anchors else None,
            "n_day_examples": len(exs),
            "n_encounters": len({e.encounter_id for e in exs}),
            "n_patients": len({e.patient_id for e in exs}),
            "n_positive": int(sum(e.label for e in exs)),
            "prevalence": None if not exs else round(dataset.prevalence[name], 6),
        }
    return out


def write_cohort(out_dir, encounters, dataset: SplitDataset):
    out = Path(out_dir)
    with open(out / "cohort.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for e in dataset.all_examples():
            row = asdict(e)
            for k in ("admit", "discharge", "anchor"):
                row[k] = to_iso(row[k])
            fh.write(json.dumps(row) + "\n")
    with open(out / "encounters.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for enc in encounters:
            fh.write(json.dumps({
                "patient_id": enc.patient_id,
                "admit": to_iso(enc.admit),
                "discharge": to_iso(enc.discharge),
                "surgery_flag": enc.surgery_flag,
                "source_ids": list(enc.source_ids),
            }) + "\n")
    (out / "cohort_summary.json").write_text(json.dumps(summarize(dataset), indent=2, sort_keys=True) + "\n")


def read_cohort(out_dir):
    out = Path(out_dir)
    encounters = []
    with open(out / "encounters.jsonl", encoding="utf-8") as fh:
        for line in fh:
            r = json.loads(line)
            encounters.append(Encounter(r["patient_id"], to_epoch(r["admit"]), to_epoch(r["discharge"]),
                                        r["surgery_flag"], tuple(r["source_ids"])))
    split = {"train": [], "validation": [], "test": []}
    with open(out / "cohort.jsonl", encoding="utf-8") as fh:
        for line in fh:
            r = json.loads(line)
            for k in ("admit", "discharge", "anchor"):
                r[k] = to_epoch(r[k])
            split[r["split"]].append(DayExample(**r))
    summary = json.loads((out / "cohort_summary.json").read_text())
    dataset = SplitDataset(
        train=split["train"], validation=split["validation"], test=split["test"],
        cutoff=to_epoch(summary["cutoff"]),
        prevalence={k: _prevalence(v) for k, v in split.items()},
        warnings=summary["warnings"],
    )
    return encounters, dataset
