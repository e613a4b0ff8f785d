"""24-hour inpatient discharge prediction: synthetic EHR, cohort, features,
tree ensembles, a GRU, evaluation and expected-utility analysis."""

__version__ = "0.1.0"
