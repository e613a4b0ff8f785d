"""Pipeline configuration: an INI file with a fixed schema and line-precise errors.

Every key is optional except ``[run] seed``.  Unknown sections or keys and
malformed values raise ConfigError naming the file and line.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .timeutil import to_epoch

MODELS = ("forest", "gbm1", "gbm2", "gru")


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.strip().lower() in ("none", "") else int(text)


def _date(text):
    to_epoch(text.strip())
    return text.strip()


def _features_per_split(text):
    t = text.strip().lower()
    if t in ("all", "none"):
        return None
    if t == "sqrt":
        return "sqrt"
    return float(t) if "." in t else int(t)


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t
    return parse


def _prevalence(text):
    t = text.strip().lower()
    return "empirical" if t == "empirical" else float(t)


def _scenarios(text):
    names = [s.strip() for s in text.split(",") if s.strip()]
    if not names or any(n not in "ABCD" or len(n) != 1 for n in names):
        raise ValueError("expected a comma list drawn from A, B, C, D")
    return names


_TREE_KEYS = {
    "n_trees": int, "max_depth": _opt_int, "min_samples_leaf": int, "min_samples_split": int,
    "features_per_split": _features_per_split, "subsample": float, "learning_rate": float,
    "reg_lambda": float, "bootstrap": _bool,
}

SCHEMA = {
    "run": {"seed": int, "out": str, "model": _choice(*MODELS), "threads": int},
    "synth": {"n_patients": int, "start": _date, "end": _date, "mean_los_days": float,
              "target_prevalence": float, "signal_strength": float, "admissions_per_year": float,
              "outpatient_visits_per_year": float, "n_planted": int, "diagnosis_codes": int,
              "procedure_codes": int, "medication_codes": int, "lab_codes": int},
    "cohort": {"cutoff": _date, "gap_hours": float, "remove_validation_from_train": _bool},
    "features": {"min_count": int, "recent_hours": float, "history_days": float},
    "forest": dict(_TREE_KEYS),
    "gbm1": dict(_TREE_KEYS),
    "gbm2": dict(_TREE_KEYS),
    "gru": {"epochs": int, "learning_rate": float, "dropout": float, "embed_mode": _choice("per_feature_25", "grouped_50"),
            "hidden": int, "batch_size": int, "task_schedule": str, "bptt_truncate": _opt_int},
    "utility": {"prevalence": _prevalence, "scenarios": _scenarios},
}

DEFAULTS = {
    "run": {"model": "gbm2", "threads": 1},
    "synth": {"n_patients": 5000, "start": "2010-01-01", "end": "2018-02-10", "mean_los_days": 5.0,
              "target_prevalence": 0.18, "signal_strength": 1.0, "admissions_per_year": 0.25,
              "outpatient_visits_per_year": 2.0, "n_planted": 8, "diagnosis_codes": 40, "procedure_codes": 20,
              "medication_codes": 30, "lab_codes": 15},
    "cohort": {"cutoff": "2017-01-01", "gap_hours": 12.0, "remove_validation_from_train": True},
    "features": {"min_count": 10, "recent_hours": 24.0, "history_days": 180.0},
    "forest": {"n_trees": 100, "max_depth": None, "min_samples_leaf": 5, "min_samples_split": 2,
               "features_per_split": "sqrt", "subsample": 1.0, "bootstrap": True},
    "gbm1": {"n_trees": 100, "max_depth": 4, "min_samples_leaf": 3, "min_samples_split": 2,
             "features_per_split": None, "subsample": 0.8, "learning_rate": 0.1},
    "gbm2": {"n_trees": 200, "max_depth": 4, "min_samples_leaf": 2, "min_samples_split": 2,
             "features_per_split": None, "subsample": 1.0, "learning_rate": 0.3, "reg_lambda": 1.0},
    "gru": {"epochs": 20, "learning_rate": 0.003, "dropout": 0.2, "embed_mode": "per_feature_25", "hidden": 64,
            "batch_size": 64, "task_schedule": "round_robin", "bptt_truncate": None},
    "utility": {"prevalence": 0.18, "scenarios": ["A", "B", "C", "D"]},
}


@dataclass
class PipelineConfig:
    sections: dict
    source: str = "<defaults>"
    text: str = ""
    lines: dict = field(default_factory=dict)

    def __getitem__(self, section) -> dict:
        return self.sections[section]

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def digest(self) -> str:
        canon = repr(sorted((s, sorted(v.items(), key=lambda kv: kv[0])) for s, v in self.sections.items()))
        return hashlib.sha256(canon.encode()).hexdigest()

    def with_overrides(self, **run) -> "PipelineConfig":
        sections = {s: dict(v) for s, v in self.sections.items()}
        for k, v in run.items():
            if v is not None:
                sections["run"][k] = v
        return PipelineConfig(sections, self.source, self.text, self.lines)


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, plus (section, None) for headers."""
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, None), i)
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            out.setdefault((section, m.group(1).strip().lower()), i)
    return out


def parse_config(text: str, source: str = "<string>", require_seed: bool = True) -> PipelineConfig:
    lines = _line_index(text)

    def where(section, key=None):
        n = lines.get((section, key)) or lines.get((section, None))
        return f"{source}:{n}" if n else source

    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from None
    sections = {s: dict(v) for s, v in DEFAULTS.items()}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{where(section)}: unknown section [{section}]")
        for key, raw in cp.items(section):
            parser = SCHEMA[section].get(key)
            if parser is None:
                raise ConfigError(f"{where(section, key)}: unknown key '{key}' in [{section}]")
            try:
                sections[section][key] = parser(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{where(section, key)}: bad value for {section}.{key}: {exc}") from None
    if require_seed and "seed" not in sections["run"]:
        raise ConfigError(f"{source}: [run] seed is required")
    cfg = PipelineConfig(sections, source, text, lines)
    _check_ranges(cfg, where)
    return cfg


def _check_ranges(cfg: PipelineConfig, where):
    s = cfg.sections
    checks = [
        ("synth", "n_patients", lambda v: v >= 1, "must be >= 1"),
        ("synth", "target_prevalence", lambda v: 0 < v < 1, "must lie in (0, 1)"),
        ("synth", "signal_strength", lambda v: v >= 0, "must be >= 0"),
        ("synth", "mean_los_days", lambda v: v > 0, "must be positive"),
        ("cohort", "gap_hours", lambda v: v >= 0, "must be >= 0"),
        ("features", "min_count", lambda v: v >= 1, "must be >= 1"),
        ("features", "recent_hours", lambda v: v == 24.0, "is fixed at 24 in this implementation"),
        ("features", "history_days", lambda v: v == 180.0, "is fixed at 180 in this implementation"),
        ("run", "threads", lambda v: v >= 1, "must be >= 1"),
        ("gru", "dropout", lambda v: 0 <= v < 1, "must lie in [0, 1)"),
        ("gru", "learning_rate", lambda v: v > 0, "must be positive"),
        ("utility", "prevalence", lambda v: v == "empirical" or 0 < v < 1, "must lie in (0, 1) or be 'empirical'"),
    ]
    for m in ("forest", "gbm1", "gbm2"):
        checks += [
            (m, "n_trees", lambda v: v >= 1, "must be >= 1"),
            (m, "min_samples_leaf", lambda v: v >= 1, "must be >= 1"),
            (m, "subsample", lambda v: 0 < v <= 1, "must lie in (0, 1]"),
        ]
    for section, key, ok, msg in checks:
        if key in s[section] and not ok(s[section][key]):
            raise ConfigError(f"{where(section, key)}: {section}.{key} {msg}")
    if to_epoch(s["synth"]["start"]) >= to_epoch(s["synth"]["end"]):
        raise ConfigError(f"{where('synth', 'end')}: synth.end must be after synth.start")


def load_config(path, require_seed: bool = True) -> PipelineConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), str(p), require_seed)


def default_config(seed: int = 0) -> PipelineConfig:
    return parse_config(f"[run]\nseed = {seed}\n", "<defaults>")
