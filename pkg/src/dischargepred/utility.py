"""Expected utility of acting on a classifier, per threshold, under fixed cost/benefit scenarios.

True negatives and false negatives are the zero points, so
``EU = pi * TPR * u_tp + (1 - pi) * FPR * u_fp`` per patient-day, and the
always-negative classifier scores exactly 0.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .metrics import RocCurve

DEFAULT_PREVALENCE = 0.18


@dataclass(frozen=True)
class UtilityScenario:
    name: str
    u_fp: float
    u_tp: float
    prevalence: float = DEFAULT_PREVALENCE

    def __post_init__(self):
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie in (0, 1)")
        if self.u_fp > 0:
            raise ValueError("u_fp is a cost and must be <= 0")


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    tpr: float
    fpr: float

    def __post_init__(self):
        if not (0.0 <= self.tpr <= 1.0 and 0.0 <= self.fpr <= 1.0):
            raise ValueError("TPR and FPR must lie in [0, 1]")


SCENARIOS = (
    UtilityScenario("A", u_fp=-10.0, u_tp=250.0),
    UtilityScenario("B", u_fp=-100.0, u_tp=250.0),
    UtilityScenario("C", u_fp=-10.0, u_tp=2500.0),
    UtilityScenario("D", u_fp=-100.0, u_tp=2500.0),
)


def expected_utility(point, scenario: UtilityScenario):
    """EU of an OperatingPoint (or arrays of tpr/fpr via ``point=(tpr, fpr)``)."""
    if isinstance(point, OperatingPoint):
        tpr, fpr = point.tpr, point.fpr
    else:
        tpr, fpr = point
    pi = scenario.prevalence
    return pi * np.asarray(tpr) * scenario.u_tp + (1.0 - pi) * np.asarray(fpr) * scenario.u_fp


def always_positive_utility(scenario: UtilityScenario) -> float:
    return float(expected_utility(OperatingPoint(-np.inf, 1.0, 1.0), scenario))


def utility_curve(roc: RocCurve, scenario: UtilityScenario):
    """(thresholds descending, EU at each ROC operating point)."""
    return roc.thresholds, expected_utility((roc.tpr, roc.fpr), scenario)


@dataclass(frozen=True)
class UtilityOptimum:
    scenario: str
    threshold: float
    eu: float
    tpr: float
    fpr: float
    eu_all_negative: float
    eu_all_positive: float
    dominates_trivial: bool


def optimal_threshold(roc: RocCurve, scenario: UtilityScenario) -> UtilityOptimum:
    """Argmax of the utility curve, ties to the highest threshold.

    ``dominates_trivial`` holds iff EU* beats both trivial classifiers.
    """
    thr, eu = utility_curve(roc, scenario)
    i = int(np.flatnonzero(eu == eu.max())[0])
    base = max(0.0, always_positive_utility(scenario))
    return UtilityOptimum(
        scenario=scenario.name,
        threshold=float(thr[i]),
        eu=float(eu[i]),
        tpr=float(roc.tpr[i]),
        fpr=float(roc.fpr[i]),
        eu_all_negative=0.0,
        eu_all_positive=always_positive_utility(scenario),
        dominates_trivial=bool(eu[i] > base),
    )


def scenario_report(roc: RocCurve, scenarios=SCENARIOS, prevalence: float | None = None) -> dict:
    """Curves and optima for each scenario, in the given order (A, B, C, D by default)."""
    if prevalence is not None:
        scenarios = [replace(s, prevalence=prevalence) for s in scenarios]
    return {
        "thresholds": roc.thresholds,
        "curves": {s.name: utility_curve(roc, s)[1] for s in scenarios},
        "optima": {s.name: optimal_threshold(roc, s) for s in scenarios},
        "scenarios": list(scenarios),
    }


def _thr_text(t: float):
    if np.isposinf(t):
        return "inf"
    if np.isneginf(t):
        return "-inf"
    return repr(float(t))


def write_utility(out_dir, roc: RocCurve, scenarios=SCENARIOS, prevalence: float | None = None) -> dict:
    """Write utility.csv and utility_summary.json.

    EU values are per patient-day; ``eu_star_aggregate`` scales the optimum by
    the number of evaluated day examples.
    """
    rep = scenario_report(roc, scenarios, prevalence)
    out = Path(out_dir)
    names = [s.name for s in rep["scenarios"]]
    with open(out / "utility.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold"] + [f"EU_{n}" for n in names])
        for i, t in enumerate(rep["thresholds"]):
            w.writerow([_thr_text(t)] + [repr(float(rep["curves"][n][i])) for n in names])
    n = roc.n_pos + roc.n_neg
    summary = {"scenarios": {}, "n_examples": n}
    for s in rep["scenarios"]:
        o = rep["optima"][s.name]
        summary["scenarios"][s.name] = {
            "u_tp": s.u_tp,
            "u_fp": s.u_fp,
            "prevalence": s.prevalence,
            "optimal_threshold": _thr_text(o.threshold),
            "eu_star": o.eu,
            "eu_star_aggregate": o.eu * n,
            "tpr": o.tpr,
            "fpr": o.fpr,
            "eu_all_negative": o.eu_all_negative,
            "eu_all_positive": o.eu_all_positive,
            "dominates_trivial": o.dominates_trivial,
        }
    summary["order"] = names
    (out / "utility_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
