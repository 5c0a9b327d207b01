"""Dataset-weight optimization for WAR.

The objective rewards weight vectors whose WAR model ranking agrees
(Spearman) with the rankings of selected individual datasets. It is
piecewise constant in the weights, so a derivative-free search is used:
seeded random sampling of the box followed by coordinate-wise refinement
(a level scan per coordinate, then golden-section search in the best
bracket).
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import DegenerateWarning, RobustnessScores, rankdata, spearman, war_matrix

DEFAULT_BOUNDS = (0.01, 1.0)
DEFAULT_OBJECTIVE = (
    ("imagenet", 0.95),
    ("imagenet-v2", 0.95),
    ("dtd", 0.95),
    ("imagenet-a", 1.0),
    ("eurosat", 1.0),
)
_INVPHI = (math.sqrt(5) - 1) / 2


@dataclass
class WeightVector:
    weights: dict[str, float]
    lo: float = DEFAULT_BOUNDS[0]
    hi: float = DEFAULT_BOUNDS[1]

    def __post_init__(self):
        _check_bounds(self.lo, self.hi)
        for d, w in self.weights.items():
            if not (self.lo <= w <= self.hi):
                raise ValueError(f"weight {d}={w} outside [{self.lo}, {self.hi}]")
        if self.weights and not any(w > 0 for w in self.weights.values()):
            raise ValueError("at least one weight must be positive")

    @classmethod
    def uniform(cls, datasets: Sequence[str], lo=DEFAULT_BOUNDS[0], hi=DEFAULT_BOUNDS[1]):
        return cls({d: hi for d in datasets}, lo, hi)

    def __getitem__(self, d: str) -> float:
        return self.weights[d]

    def __iter__(self):
        return iter(self.weights)

    def __len__(self):
        return len(self.weights)

    def keys(self):
        return self.weights.keys()

    def array(self, datasets: Sequence[str]) -> np.ndarray:
        missing = sorted(set(datasets) - set(self.weights))
        if missing:
            raise ValueError(f"weights lack datasets {missing}")
        return np.array([self.weights[d] for d in datasets], dtype=float)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.weights, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, lo: float | None = None, hi: float | None = None):
        data = json.loads(Path(path).read_text())
        vals = [float(v) for v in data.values()]
        lo = min(DEFAULT_BOUNDS[0], *vals) if lo is None else lo
        hi = max(DEFAULT_BOUNDS[1], *vals) if hi is None else hi
        return cls({str(k): float(v) for k, v in data.items()}, lo, hi)


@dataclass
class Objective:
    terms: list[tuple[str, float]] = field(default_factory=lambda: list(DEFAULT_OBJECTIVE))

    def __post_init__(self):
        if not self.terms:
            raise ValueError("objective needs at least one term")
        for d, c in self.terms:
            if not c > 0:
                raise ValueError(f"coefficient for {d} must be positive, got {c}")

    @classmethod
    def parse(cls, spec: str | Sequence[str]) -> "Objective":
        """Parse ``"imagenet:0.95,eurosat:1"`` (or a list of such pairs)."""
        if isinstance(spec, str):
            spec = [s for s in spec.split(",") if s.strip()]
        terms = []
        for item in spec:
            name, sep, coef = item.strip().rpartition(":")
            if not sep or not name:
                raise ValueError(f"objective term {item!r} is not dataset:coefficient")
            terms.append((name, float(coef)))
        return cls(terms)

    @property
    def total(self) -> float:
        return sum(c for _, c in self.terms)


@dataclass
class GammaMatrix:
    """Per-dataset improved robustness, models x datasets."""

    models: list[str]
    datasets: list[str]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (len(self.models), len(self.datasets)):
            raise ValueError("values shape does not match models x datasets")

    @classmethod
    def from_scores(cls, scores: RobustnessScores, resolution: int = 16) -> "GammaMatrix":
        models, datasets, values = scores.matrix(resolution, "gamma_improved")
        complete = ~np.isnan(values).any(axis=0)
        return cls(models, [d for d, ok in zip(datasets, complete) if ok], values[:, complete])

    def column(self, dataset_id: str) -> np.ndarray:
        try:
            return self.values[:, self.datasets.index(dataset_id)]
        except ValueError:
            raise KeyError(f"dataset {dataset_id!r} not in the gamma matrix") from None


def _check_bounds(lo, hi):
    if lo > hi:
        raise ValueError(f"infeasible bounds: lo={lo} > hi={hi}")
    if hi <= 0:
        raise ValueError("upper bound must be positive")


def evaluate_objective(gm: GammaMatrix, weights, objective: Objective | None = None) -> float:
    """Sum over objective terms of coefficient x Spearman(WAR, dataset column)."""
    objective = objective or Objective()
    w = weights.array(gm.datasets) if isinstance(weights, WeightVector) else np.asarray(weights, float)
    cols = [(gm.column(d), c) for d, c in objective.terms]
    scores = war_matrix(gm.values, w)
    return float(sum(c * spearman(scores, col) for col, c in cols))


def optimize_weights(
    gm: GammaMatrix,
    objective: Objective | None = None,
    bounds: tuple[float, float] = DEFAULT_BOUNDS,
    budget: int = 2000,
    seed: int = 0,
    random_fraction: float = 0.5,
    scan_levels: int = 11,
) -> tuple[WeightVector, list[tuple[int, float, float]]]:
    """Maximize :func:`evaluate_objective` over the weight box.

    ``budget`` counts objective evaluations. The first evaluation is always
    the uniform vector, so the result is never worse than uniform weights.
    About ``random_fraction`` of the budget goes to uniform random samples;
    the rest refines the incumbent one coordinate at a time.

    Returns the best vector and a trace of ``(iteration, objective,
    best_so_far)`` tuples.
    """
    objective = objective or Objective()
    lo, hi = bounds
    _check_bounds(lo, hi)
    if budget < 1:
        raise ValueError("budget must be >= 1")
    for d, _ in objective.terms:
        gm.column(d)
    rng = np.random.default_rng(seed)
    k = len(gm.datasets)
    cols = [(gm.column(d), c) for d, c in objective.terms]

    trace: list[tuple[int, float, float]] = []
    best_x = np.full(k, hi)
    best_f = -np.inf

    # dataset columns never change, so rank and centre them once
    ranked = []
    for col, c in cols:
        r = rankdata(col)
        r -= r.mean()
        ranked.append((r, float(r @ r), c))

    def f(x):
        nonlocal best_x, best_f
        rs = rankdata(war_matrix(gm.values, x))
        rs -= rs.mean()
        ss = float(rs @ rs)
        val = 0.0
        for r, rr, c in ranked:
            denom = math.sqrt(ss * rr)
            if denom > 0:  # constant input counts as zero correlation
                val += c * min(1.0, max(-1.0, float(rs @ r) / denom))
        if val > best_f:
            best_f, best_x = val, x.copy()
        trace.append((len(trace), val, best_f))
        return val

    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        f(np.full(k, hi))
        n_random = int(round((budget - 1) * random_fraction))
        for _ in range(n_random):
            f(rng.uniform(lo, hi, size=k))
        _refine(f, lambda: (best_x, best_f), lo, hi, k, budget - len(trace), scan_levels, rng)

    result = WeightVector({d: float(v) for d, v in zip(gm.datasets, best_x)}, lo, hi)
    return result, trace


def _refine(f, incumbent, lo, hi, k, budget, levels, rng):
    """Cyclic coordinate search around the incumbent until budget runs out."""
    if budget <= 0 or hi == lo:
        return
    spent = 0
    width = hi - lo
    while spent < budget:
        improved = False
        for j in rng.permutation(k):
            x0, f0 = incumbent()
            centre = x0[j]
            a, b = max(lo, centre - width / 2), min(hi, centre + width / 2)
            grid = np.linspace(a, b, levels)
            vals = []
            for g in grid:
                if spent >= budget:
                    return
                x = x0.copy()
                x[j] = g
                vals.append(f(x))
                spent += 1
            i = int(np.argmax(vals))
            # golden-section inside the bracket around the best level
            ga, gb = grid[max(i - 1, 0)], grid[min(i + 1, levels - 1)]
            spent += _golden(f, x0, j, ga, gb, budget - spent)
            if incumbent()[1] > f0:
                improved = True
        if not improved:
            width /= 2
            if width < 1e-9 * (hi - lo):
                width = hi - lo


def _golden(f, x0, j, a, b, budget, iters=8):
    """Golden-section maximization of f along coordinate j within [a, b]."""
    if budget < 2:
        return 0

    def at(t):
        x = x0.copy()
        x[j] = t
        return f(x)

    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = at(c), at(d)
    used = 2
    for _ in range(iters):
        if used >= budget:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = at(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = at(d)
        used += 1
    return used


def grid_search(gm: GammaMatrix, objective: Objective | None = None,
                bounds=DEFAULT_BOUNDS, levels: int = 21) -> tuple[np.ndarray, float]:
    """Exhaustive search over ``levels`` values per weight. Small k only."""
    objective = objective or Objective()
    grid = np.linspace(bounds[0], bounds[1], levels)
    best_x, best_f = None, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        for combo in itertools.product(grid, repeat=len(gm.datasets)):
            x = np.array(combo)
            val = evaluate_objective(gm, x, objective)
            if val > best_f:
                best_x, best_f = x, val
    return best_x, best_f


def ranking(gm: GammaMatrix, weights) -> list[tuple[str, float]]:
    """Models sorted by WAR, best first."""
    w = weights.array(gm.datasets) if isinstance(weights, WeightVector) else np.asarray(weights, float)
    scores = war_matrix(gm.values, w)
    order = np.argsort(-scores, kind="stable")
    return [(gm.models[i], float(scores[i])) for i in order]


def dataset_correlations(gm: GammaMatrix, weights) -> dict[str, float]:
    """Spearman between the WAR ranking and every dataset's own ranking."""
    w = weights.array(gm.datasets) if isinstance(weights, WeightVector) else np.asarray(weights, float)
    scores = war_matrix(gm.values, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWarning)
        return {d: spearman(scores, gm.values[:, j]) for j, d in enumerate(gm.datasets)}
