"""Robustness metrics: relative robustness, accuracy gap, improved
robustness, SAR/WAR/ACC aggregation and Spearman rank correlation."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .results import LR_RESOLUTIONS, ResultsTable

DEFAULT_ALPHA = 200.0


class DegenerateWarning(RuntimeWarning):
    """A metric hit a degenerate input and returned its defined fallback."""


def relative_robustness(a_hr: float, a_n: float) -> float:
    """``1 - (a_hr - a_n) / a_hr``; may exceed 1 when ``a_n > a_hr``.

    A zero HR accuracy has no meaningful ratio. It yields 0.0 and a
    :class:`DegenerateWarning`.
    """
    if a_hr == 0:
        warnings.warn("a_hr = 0, relative robustness set to 0", DegenerateWarning, stacklevel=2)
        return 0.0
    return 1.0 - (a_hr - a_n) / a_hr


def accuracy_gap(a_hr: float, num_classes: int) -> float:
    """HR accuracy above chance, ``max(0, a_hr - 1/C)``."""
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    return min(1.0, max(0.0, a_hr - 1.0 / num_classes))


def improved_robustness(gamma, gap, alpha: float = DEFAULT_ALPHA):
    """Damp ``gamma`` toward 0 as the accuracy gap approaches 0.

    Works elementwise on arrays as well as on scalars.
    """
    if alpha < 1:
        raise ValueError("alpha must be >= 1")
    gap = np.asarray(gap, dtype=float)
    if np.any((gap < 0) | (gap > 1)):
        raise ValueError("gap must lie in [0, 1]")
    out = gamma * -np.expm1(-alpha * gap * gap)
    return float(out) if np.ndim(out) == 0 else out


def sar(scores: Sequence[float]) -> float:
    """Simple aggregated robustness: the arithmetic mean."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("sar of an empty score list")
    return float(scores.mean())


def war(scores: Mapping[str, float], weights: Mapping[str, float]) -> float:
    """Weighted aggregated robustness ``sum |G_d w_d| / sum |w_d|``.

    ``scores`` and ``weights`` map dataset id to value and must cover the
    same datasets.
    """
    weights = getattr(weights, "weights", weights)
    if set(scores) != set(weights):
        diff = sorted(set(scores) ^ set(weights))
        raise ValueError(f"scores and weights disagree on datasets: {diff}")
    keys = sorted(scores)
    g = np.array([scores[k] for k in keys], dtype=float)
    w = np.array([weights[k] for k in keys], dtype=float)
    denom = np.abs(w).sum()
    if denom <= 0:
        raise ValueError("sum of |weights| must be positive")
    return float(np.abs(g * w).sum() / denom)


def war_matrix(gamma: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Row-wise WAR for a models x datasets matrix."""
    w = np.abs(np.asarray(weights, dtype=float))
    return np.abs(gamma * w).sum(axis=-1) / w.sum()


def rankdata(x) -> np.ndarray:
    """Ranks starting at 1; tied values get the average of their ranks."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    new_run = np.r_[True, sx[1:] != sx[:-1]]
    dense = np.empty(len(x), dtype=np.intp)
    dense[order] = np.cumsum(new_run)
    # bounds[r - 1] and bounds[r] delimit run r in sorted order
    bounds = np.r_[np.flatnonzero(new_run), len(x)]
    return 0.5 * (bounds[dense - 1] + bounds[dense] + 1)


def spearman(x, y) -> float:
    """Spearman rank correlation with average-rank ties.

    Constant input leaves the correlation undefined; 0.0 is returned along
    with a :class:`DegenerateWarning`.
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman needs two 1-D inputs of equal length")
    if len(x) < 2:
        raise ValueError("spearman needs at least two observations")
    rx = rankdata(x)
    ry = rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        warnings.warn("constant input, spearman set to 0", DegenerateWarning, stacklevel=2)
        return 0.0
    return float(np.clip((rx @ ry) / denom, -1.0, 1.0))


# ---------------------------------------------------------------------------
# whole-table computation


@dataclass
class RobustnessConfig:
    alpha: float = DEFAULT_ALPHA
    hr_lookup: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")


@dataclass(frozen=True)
class CellScore:
    model_id: str
    dataset_id: str
    resolution: int
    gamma: float
    gamma_improved: float
    gap: float
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ModelAggregate:
    model_id: str
    resolution: int
    sar: float
    war: float
    acc: float
    n_datasets: int


@dataclass
class RobustnessScores:
    cells: list[CellScore] = field(default_factory=list)
    # (model, dataset, resolution) triples that could not be scored
    missing: list[tuple[str, str, int]] = field(default_factory=list)

    def get(self, model_id: str, dataset_id: str, resolution: int) -> CellScore | None:
        for c in self.cells:
            if (c.model_id, c.dataset_id, c.resolution) == (model_id, dataset_id, resolution):
                return c
        return None

    def matrix(self, resolution: int, attr: str = "gamma_improved"):
        """(models, datasets, values) at one resolution; absent cells are NaN."""
        cells = [c for c in self.cells if c.resolution == resolution]
        models = sorted({c.model_id for c in cells})
        datasets = sorted({c.dataset_id for c in cells})
        mi = {m: i for i, m in enumerate(models)}
        di = {d: i for i, d in enumerate(datasets)}
        values = np.full((len(models), len(datasets)), np.nan)
        for c in cells:
            values[mi[c.model_id], di[c.dataset_id]] = getattr(c, attr)
        return models, datasets, values


@dataclass
class AggregateScores:
    rows: list[ModelAggregate] = field(default_factory=list)
    # models lacking an HR cell for at least one dataset they were evaluated on
    flagged_models: list[str] = field(default_factory=list)

    def get(self, model_id: str, resolution: int) -> ModelAggregate | None:
        for r in self.rows:
            if r.model_id == model_id and r.resolution == resolution:
                return r
        return None


def compute_all(
    table: ResultsTable,
    cfg: RobustnessConfig | None = None,
    weights: Mapping[str, float] | None = None,
    resolutions: Sequence[int] = LR_RESOLUTIONS,
) -> tuple[RobustnessScores, AggregateScores]:
    """Score every low-resolution cell of ``table`` and aggregate per model.

    SAR averages the plain relative robustness, WAR weights the improved
    robustness (uniform weights when ``weights`` is None), ACC averages the
    top-1 accuracy. Cells without an HR counterpart are skipped and listed
    in ``RobustnessScores.missing``; their model is flagged.
    """
    cfg = cfg or RobustnessConfig()
    weights = getattr(weights, "weights", weights)
    scores = RobustnessScores()
    agg = AggregateScores()
    flagged = set()
    for model_id in table.model_ids():
        hr_res = cfg.hr_lookup.get(model_id, table.hr_resolution(model_id))
        for n in resolutions:
            cells = []
            for dataset_id in table.dataset_ids():
                a_n = table.query(model_id, dataset_id, n)
                if a_n is None:
                    continue
                a_hr = table.query(model_id, dataset_id, hr_res)
                if a_hr is None:
                    scores.missing.append((model_id, dataset_id, n))
                    flagged.add(model_id)
                    continue
                cells.append(_score_cell(table, model_id, dataset_id, n, a_hr, a_n, cfg.alpha))
            scores.cells.extend(cells)
            if not cells:
                continue
            g_imp = {c.dataset_id: c.gamma_improved for c in cells}
            if weights is None:
                w = {d: 1.0 for d in g_imp}
            else:
                absent = sorted(set(g_imp) - set(weights))
                if absent:
                    raise ValueError(f"weights lack datasets {absent}")
                w = {d: weights[d] for d in g_imp}
            agg.rows.append(ModelAggregate(
                model_id,
                n,
                sar([c.gamma for c in cells]),
                war(g_imp, w),
                float(np.mean([table.query(model_id, c.dataset_id, n) for c in cells])),
                len(cells),
            ))
    agg.flagged_models = sorted(flagged)
    return scores, agg


def _score_cell(table, model_id, dataset_id, n, a_hr, a_n, alpha) -> CellScore:
    flags = []
    meta = table.datasets[dataset_id]
    if a_hr == 0:
        flags.append("degenerate_hr")
        gamma = 0.0
    else:
        gamma = relative_robustness(a_hr, a_n)
    if a_hr < meta.a_rand:
        flags.append("below_random")
    if meta.num_classes < 2:
        flags.append("single_class")
        gap = 0.0
    else:
        gap = accuracy_gap(a_hr, meta.num_classes)
    return CellScore(
        model_id, dataset_id, n, gamma, improved_robustness(gamma, gap, alpha), gap, tuple(flags)
    )


# ---------------------------------------------------------------------------
# CSV output


def write_scores_csv(agg: AggregateScores, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "resolution", "sar", "war", "acc"])
        for r in sorted(agg.rows, key=lambda r: (r.model_id, r.resolution)):
            w.writerow([r.model_id, r.resolution, repr(r.sar), repr(r.war), repr(r.acc)])


def write_cells_csv(scores: RobustnessScores, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model_id", "dataset_id", "resolution", "gamma", "gamma_improved", "gap", "flags"])
        for c in sorted(scores.cells, key=lambda c: (c.model_id, c.dataset_id, c.resolution)):
            w.writerow([
                c.model_id, c.dataset_id, c.resolution,
                repr(c.gamma), repr(c.gamma_improved), repr(c.gap), ";".join(c.flags),
            ])


def read_scores_csv(path: str | Path) -> AggregateScores:
    agg = AggregateScores()
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            agg.rows.append(ModelAggregate(
                row["model_id"], int(row["resolution"]),
                float(row["sar"]), float(row["war"]), float(row["acc"]), 0,
            ))
    return agg


def read_cells_csv(path: str | Path) -> RobustnessScores:
    scores = RobustnessScores()
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            scores.cells.append(CellScore(
                row["model_id"], row["dataset_id"], int(row["resolution"]),
                float(row["gamma"]), float(row["gamma_improved"]), float(row["gap"]),
                tuple(f for f in row["flags"].split(";") if f),
            ))
    return scores
