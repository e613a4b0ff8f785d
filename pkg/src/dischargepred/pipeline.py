"""Pipeline stages over one flat output directory.

synth -> cohort -> featurize -> train -> evaluate -> utility.  Each stage
reads only persisted upstream files, so any stage can be re-run on its own.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import gru as grumod
from . import trees
from .cohort import build_cohort, read_cohort, write_cohort
from .config import PipelineConfig
from .errors import DataError, StageOrderError
from .features import (SEQUENCE_CHANNELS, Vocabulary, build_vocabulary, encode_timelines, featurize_examples,
                       read_features_bin, write_features_bin)
from .metrics import ScoredSet, roc_points, write_metrics
from .synthgen import SynthConfig, generate_dataset, lab_reference_ranges, read_events_jsonl, read_patients_csv, write_dataset
from .utility import SCENARIOS, write_utility

log = logging.getLogger("dischargepred")

STAGES = ("synth", "cohort", "featurize", "train", "evaluate", "utility")
TREE_MODEL_FILE = "model.json"
GRU_MODEL_FILE = "gru_model.json"
PREDICTIONS_FILE = "test_predictions.csv"

_STAGE_OUTPUTS = {
    "synth": ("patients.csv", "events.jsonl", "truth.json", "lab_ranges.json"),
    "cohort": ("cohort.jsonl", "encounters.jsonl", "cohort_summary.json"),
    "featurize": ("vocab.json", "features.bin", "features_meta.json"),
    "evaluate": (PREDICTIONS_FILE, "metrics.json"),
    "utility": ("utility_summary.json",),
}


class _StageFilter(logging.Filter):
    stage = "-"

    def filter(self, record):
        record.stage = self.stage
        return True


STAGE_FILTER = _StageFilter()


@contextmanager
def _stage(name, timings):
    prev = STAGE_FILTER.stage
    STAGE_FILTER.stage = name
    t0 = time.perf_counter()
    log.info("start")
    try:
        yield
        timings[name] = round(time.perf_counter() - t0, 3)
        log.info("done in %.2fs", timings[name])
    except Exception:
        log.info("failed after %.2fs", time.perf_counter() - t0)
        raise
    finally:
        STAGE_FILTER.stage = prev


def _require(out: Path, stage: str, files):
    for f in files:
        if not (out / f).exists():
            raise StageOrderError(f"missing {f} in {out}: run stage {stage} first")


@contextmanager
def _reading(out: Path, stage: str):
    """Turn a malformed upstream artifact into a DataError that names the stage to re-run."""
    try:
        yield
    except DataError:
        raise
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise DataError(f"unreadable {stage} output in {out} ({type(exc).__name__}: {exc}); re-run stage {stage}") from exc


_TREE_NAMES = {"random_forest": "forest", trees.FIRST_ORDER: "gbm1", trees.SECOND_ORDER: "gbm2"}


def _model_file(model: str) -> str:
    return GRU_MODEL_FILE if model == "gru" else TREE_MODEL_FILE


# ---------------------------------------------------------------- stages


def stage_synth(cfg: PipelineConfig, out: Path) -> dict:
    s = cfg["synth"]
    sc = SynthConfig(
        n_patients=s["n_patients"],
        date_range=(s["start"], s["end"]),
        code_pool_sizes={"diagnosis": s["diagnosis_codes"], "procedure": s["procedure_codes"],
                         "medication": s["medication_codes"], "lab": s["lab_codes"]},
        mean_los_days=s["mean_los_days"],
        target_prevalence=s["target_prevalence"],
        signal_strength=s["signal_strength"],
        seed=cfg.seed,
        admissions_per_year=s["admissions_per_year"],
        outpatient_visits_per_year=s["outpatient_visits_per_year"],
        n_planted=s["n_planted"],
    )
    patients, events, truth = generate_dataset(sc)
    write_dataset(out, patients, events, truth, lab_reference_ranges(sc))
    return {"patients": len(patients), "events": len(events), "prevalence": truth.realized_prevalence}


def _load_events(out: Path):
    _require(out, "synth", _STAGE_OUTPUTS["synth"])
    with _reading(out, "synth"):
        events = read_events_jsonl(out / "events.jsonl")
        patients = read_patients_csv(out / "patients.csv")
        lab_ranges = json.loads((out / "lab_ranges.json").read_text())
    return events, patients, lab_ranges


def stage_cohort(cfg: PipelineConfig, out: Path) -> dict:
    events, _, _ = _load_events(out)
    c = cfg["cohort"]
    encounters, ds = build_cohort(events, c["cutoff"], cfg.seed, c["gap_hours"], c["remove_validation_from_train"])
    write_cohort(out, encounters, ds)
    return {k: len(v) for k, v in ds.by_split().items()} | {"warnings": ds.warnings}


def _load_cohort(out: Path):
    _require(out, "cohort", _STAGE_OUTPUTS["cohort"])
    with _reading(out, "cohort"):
        return read_cohort(out)


def _load_vocab(out: Path) -> Vocabulary:
    _require(out, "featurize", _STAGE_OUTPUTS["featurize"])
    with _reading(out, "featurize"):
        return Vocabulary.from_json((out / "vocab.json").read_text())


def stage_featurize(cfg: PipelineConfig, out: Path) -> dict:
    events, patients, lab_ranges = _load_events(out)
    encounters, ds = _load_cohort(out)
    train_p = sorted({e.patient_id for e in ds.train})
    # the vocabulary only sees training patients' events from before the cutoff
    tev = events[events["patient_id"].isin(train_p) & (events["timestamp"] < ds.cutoff)]
    vocab = build_vocabulary(tev, cfg["features"]["min_count"], lab_ranges, patients[patients["patient_id"].isin(train_p)])
    timelines = encode_timelines(events, patients, encounters, lab_ranges, vocab)
    examples = ds.all_examples()
    X = featurize_examples(timelines, examples, vocab)
    (out / "vocab.json").write_text(vocab.to_json() + "\n")
    write_features_bin(out / "features.bin", X, np.arange(len(examples)))
    meta = {
        "n_rows": X.shape[0],
        "nnz": int(X.nnz),
        "row_order": "cohort.jsonl line order",
        "layout": vocab.layout(),
        "age_mean": vocab.age_mean,
        "age_std": vocab.age_std,
        "windows": {"recent_hours": 24, "history_days": 180},
    }
    (out / "features_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return {"rows": X.shape[0], "width": X.shape[1], "nnz": int(X.nnz)}


def _split_rows(ds):
    names = [e.split for e in ds.all_examples()]
    return {s: np.array([i for i, n in enumerate(names) if n == s], dtype=np.int64) for s in ("train", "validation", "test")}


def _tree_params(section: dict, seed: int) -> trees.TreeFitParams:
    keys = {f for f in trees.TreeFitParams.__dataclass_fields__}
    return trees.TreeFitParams(**{k: v for k, v in section.items() if k in keys}, seed=seed)


def _gru_config(section: dict, seed: int) -> grumod.TrainConfig:
    return grumod.TrainConfig(**section, seed=seed)


def _timelines(out: Path, vocab: Vocabulary, encounters):
    events, patients, lab_ranges = _load_events(out)
    return encode_timelines(events, patients, encounters, lab_ranges, vocab)


def stage_train(cfg: PipelineConfig, out: Path, model: str, threads: int = 1) -> dict:
    encounters, ds = _load_cohort(out)
    vocab = _load_vocab(out)
    if model == "gru":
        return _train_gru(cfg, out, vocab, encounters, ds)
    with _reading(out, "featurize"):
        X, _ = read_features_bin(out / "features.bin")
    rows = _split_rows(ds)["train"]
    y = np.array([e.label for e in ds.all_examples()], dtype=np.float64)[rows]
    params = _tree_params(cfg[model], cfg.seed)
    B = trees.BinnedRows(X[rows])
    if model == "forest":
        B.dense_view()
        fitted = trees.fit_random_forest(B, y, params, n_jobs=threads)
    elif model == "gbm1":
        fitted = trees.fit_gbm_first_order(B, y, params)
    else:
        fitted = trees.fit_gbm_second_order(B, y, params)
    (out / TREE_MODEL_FILE).write_text(trees.model_to_json(fitted) + "\n")
    return {"model": model, "trees": len(fitted.trees), "train_rows": len(rows)}


def _train_gru(cfg, out, vocab, encounters, ds) -> dict:
    timelines = _timelines(out, vocab, encounters)
    seqs = grumod.training_sequences(timelines, vocab, ds.train, ds.cutoff)
    val = grumod.evaluation_queries(timelines, vocab, ds.validation) if ds.validation else None
    config = _gru_config(cfg["gru"], cfg.seed)
    sizes = {ch: vocab.size(ch) for ch in SEQUENCE_CHANNELS}
    result = grumod.train_gru(seqs, config, sizes, vocab.age_mean, vocab.age_std, validation=val)
    (out / GRU_MODEL_FILE).write_text(grumod.model_to_json(result.params, config) + "\n")
    grumod.write_train_log(out / "train_log.csv", result)
    return {"model": "gru", "sequences": len(seqs), "epochs": config.epochs}


def stage_evaluate(cfg: PipelineConfig, out: Path, model: str) -> dict:
    encounters, ds = _load_cohort(out)
    mfile = _model_file(model)
    _require(out, "train", [mfile])
    test = ds.test
    if not test:
        raise StageOrderError("the test split is empty; check cohort.cutoff against the data range")
    if model == "gru":
        vocab = _load_vocab(out)
        with _reading(out, "train"):
            params, _ = grumod.model_from_json((out / mfile).read_text())
        q = grumod.evaluation_queries(_timelines(out, vocab, encounters), vocab, test)
        scores = grumod.predict_queries(params, q)
    else:
        _require(out, "featurize", ["features.bin"])
        with _reading(out, "train"):
            fitted = trees.model_from_json((out / mfile).read_text())
        found = _TREE_NAMES[fitted.variant if isinstance(fitted, trees.BoostedModel) else "random_forest"]
        if found != model:
            raise StageOrderError(f"{mfile} in {out} holds a {found} model: run stage train --model {model} first")
        with _reading(out, "featurize"):
            X, _ = read_features_bin(out / "features.bin")
        scores = fitted.predict_proba(X[_split_rows(ds)["test"]])
    labels = np.array([e.label for e in test], dtype=np.int64)
    surgical = {e.encounter_id: e.surgery_flag for e in encounters}
    groups = np.array(["surgical" if surgical.get(e.encounter_id) else "medical" for e in test])
    with open(out / PREDICTIONS_FILE, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "encounter_id", "anchor", "label", "score", "group"])
        for e, s, g in zip(test, scores, groups):
            w.writerow([e.patient_id, e.encounter_id, e.anchor, int(e.label), repr(float(s)), g])
    m = write_metrics(out, ScoredSet(scores, labels, groups), extra={"model": model, "split": "test"})
    return {k: m[k] for k in ("model", "auroc", "auprc", "brier", "n", "prevalence")}


def _read_predictions(out: Path):
    _require(out, "evaluate", [PREDICTIONS_FILE])
    with _reading(out, "evaluate"), open(out / PREDICTIONS_FILE, newline="") as fh:
        rows = list(csv.DictReader(fh))
        return (np.array([float(r["score"]) for r in rows]), np.array([int(r["label"]) for r in rows]))


def stage_utility(cfg: PipelineConfig, out: Path) -> dict:
    scores, labels = _read_predictions(out)
    u = cfg["utility"]
    prevalence = float(labels.mean()) if u["prevalence"] == "empirical" else u["prevalence"]
    scen = [s for s in SCENARIOS if s.name in u["scenarios"]]
    summary = write_utility(out, roc_points(scores, labels), scen, prevalence)
    return {n: {"eu_star": v["eu_star"], "dominates_trivial": v["dominates_trivial"]}
            for n, v in summary["scenarios"].items()}


# ---------------------------------------------------------------- manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import pandas
    import scipy

    return {"dischargepred": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pandas.__version__}


def write_manifest(out: Path, cfg: PipelineConfig, timings: dict) -> dict:
    path = out / "manifest.json"
    old = json.loads(path.read_text()) if path.exists() else {}
    merged_timings = dict(old.get("timings", {}))
    merged_timings.update(timings)
    files = {p.name: _sha256(p) for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    manifest = {
        "config_sha256": cfg.digest,
        "config": {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.items()}
                   for s, sec in sorted(cfg.sections.items())},
        "seed": cfg.seed,
        "versions": _versions(),
        "timings": merged_timings,
        "files": files,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run_stage(name: str, cfg: PipelineConfig, out, model: str | None = None, threads: int = 1) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model = model or cfg["run"]["model"]
    timings = {}
    key = f"train:{model}" if name == "train" else name
    with _stage(key, timings):
        if name == "synth":
            res = stage_synth(cfg, out)
        elif name == "cohort":
            res = stage_cohort(cfg, out)
        elif name == "featurize":
            res = stage_featurize(cfg, out)
        elif name == "train":
            res = stage_train(cfg, out, model, threads)
        elif name == "evaluate":
            res = stage_evaluate(cfg, out, model)
        elif name == "utility":
            res = stage_utility(cfg, out)
        else:
            raise ValueError(f"unknown stage {name!r}")
    write_manifest(out, cfg, timings)
    return res


def run_pipeline(cfg: PipelineConfig, out, model: str | None = None, threads: int = 1) -> dict:
    """All stages in order; returns per-stage summaries."""
    return {name: run_stage(name, cfg, out, model, threads) for name in STAGES}
