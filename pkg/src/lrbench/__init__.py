"""Benchmark tools for low-resolution robustness of zero-shot classifiers.

Submodules: ``results`` (accuracy tables), ``metrics`` (robustness scores
and rank correlation), ``weights`` (WAR weight search), ``degrade``
(bicubic LR simulation), ``zeroshot`` (template-averaged classification),
``tinyvit`` / ``lrtk`` (toy transformer with trainable LR token banks),
``analysis`` (layer similarity and reports) and ``cli``.
"""
from .metrics import (
    DEFAULT_ALPHA,
    RobustnessConfig,
    accuracy_gap,
    compute_all,
    improved_robustness,
    relative_robustness,
    sar,
    spearman,
    war,
)
from .results import ResultsTable, ingest, query

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_ALPHA", "ResultsTable", "RobustnessConfig", "accuracy_gap", "compute_all",
    "improved_robustness", "ingest", "query", "relative_robustness", "sar", "spearman", "war",
]
