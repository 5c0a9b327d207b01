"""Layer similarity heatmaps, feature export and report bundles."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping
from xml.sax.saxutils import escape

import numpy as np

from .matio import load_matrix, save_matrix
from .metrics import AggregateScores, RobustnessScores, write_cells_csv, write_scores_csv


@dataclass(frozen=True)
class SimilarityHeatmap:
    """Rows index layers of the LR pass, columns layers of the HR pass."""

    matrix: np.ndarray

    @property
    def layers(self) -> int:
        return self.matrix.shape[0]

    def diagonal_halves(self) -> tuple[float, float]:
        """Mean of the first and of the last ceil(N/2) diagonal entries,
        where N + 1 is the layer count."""
        diag = np.diag(self.matrix)
        h = math.ceil((len(diag) - 1) / 2)
        return float(diag[:h].mean()), float(diag[-h:].mean())

    def save_csv(self, path: str | Path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lr_layer"] + [f"hr_{j}" for j in range(self.matrix.shape[1])])
            for i, row in enumerate(self.matrix):
                w.writerow([i] + [repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path: str | Path) -> "SimilarityHeatmap":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        return cls(np.array([[float(v) for v in r[1:]] for r in rows]))


def layer_similarity(features_lr, features_hr, atol: float = 1e-6) -> SimilarityHeatmap:
    """S[i, j] = 1 / (1 + ||f_i^LR - f_j^HR||).

    Inputs are (layers, dim) stacks of unit-norm features, or (batch,
    layers, dim), in which case per-image heatmaps are averaged.
    """
    lr = np.asarray(features_lr, dtype=float)
    hr = np.asarray(features_hr, dtype=float)
    if lr.shape != hr.shape:
        raise ValueError(f"feature shapes differ: {lr.shape} vs {hr.shape}")
    if lr.ndim not in (2, 3):
        raise ValueError("expected (layers, dim) or (batch, layers, dim)")
    for name, f in (("LR", lr), ("HR", hr)):
        if not np.allclose(np.linalg.norm(f, axis=-1), 1.0, atol=atol):
            raise ValueError(f"{name} features are not L2-normalized per layer")
    if lr.ndim == 2:
        lr, hr = lr[None], hr[None]
    dist = np.linalg.norm(lr[:, :, None, :] - hr[:, None, :, :], axis=-1)
    return SimilarityHeatmap((1.0 / (1.0 + dist)).mean(axis=0))


def model_heatmap(params, images_lr: np.ndarray, images_hr: np.ndarray,
                  tokens=None, start_block: int = 0) -> SimilarityHeatmap:
    """Heatmap between the token-augmented model on LR inputs and the bare
    model on the matching HR inputs."""
    from .tinyvit import forward

    f_lr = forward(params, images_lr, tokens, start_block).layers
    f_hr = forward(params, images_hr).layers
    return layer_similarity(f_lr, f_hr)


def export_features(params, images: np.ndarray, path: str | Path, tokens=None,
                    start_block: int = 0, **extra) -> np.ndarray:
    """Embed model-ready ``images`` and write them as a float32 matrix file.

    Returns the values exactly as stored (float32).
    """
    from .tinyvit import forward

    emb = forward(params, images, tokens, start_block).embedding
    save_matrix(path, emb, normalized=True, **extra)
    return load_matrix(path)[0]


# ---------------------------------------------------------------------------
# report bundle

_W, _H, _PAD = 640, 400, 48
_PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _svg(title: str, data: dict, body: list[str]) -> str:
    blob = json.dumps(data, sort_keys=True)
    head = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f"<title>{escape(title)}</title>",
        f'<metadata id="chart-data"><![CDATA[{blob}]]></metadata>',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def chart_data(svg_text: str) -> dict:
    """Parse the JSON block embedded in a chart written by :func:`emit_report`."""
    start = svg_text.index("<![CDATA[") + len("<![CDATA[")
    return json.loads(svg_text[start:svg_text.index("]]>", start)])


def _y_scale(values):
    finite = [v for v in values if math.isfinite(v)]
    lo = min(0.0, min(finite, default=0.0))
    hi = max(1.0, max(finite, default=1.0))
    span = _H - 2 * _PAD
    return lambda v: _H - _PAD - (v - lo) / (hi - lo) * span


def accuracy_chart(agg: AggregateScores) -> str:
    """Line chart of mean accuracy against resolution, one series per model."""
    series = {}
    for r in sorted(agg.rows, key=lambda r: (r.model_id, r.resolution)):
        series.setdefault(r.model_id, []).append([r.resolution, r.acc])
    xs = sorted({x for pts in series.values() for x, _ in pts})
    y = _y_scale([v for pts in series.values() for _, v in pts])
    xpos = {x: _PAD + (i + 0.5) * (_W - 2 * _PAD) / len(xs) for i, x in enumerate(xs)}
    body = [f'<text x="{xpos[x]:.1f}" y="{_H - _PAD + 16}" text-anchor="middle" '
            f'font-size="11">{x}</text>' for x in xs]
    for k, (model, pts) in enumerate(series.items()):
        colour = _PALETTE[k % len(_PALETTE)]
        path = " ".join(f"{xpos[x]:.1f},{y(v):.1f}" for x, v in pts)
        body.append(f'<polyline class="series" data-model="{escape(model)}" fill="none" '
                    f'stroke="{colour}" points="{path}"/>')
        body += [f'<circle cx="{xpos[x]:.1f}" cy="{y(v):.1f}" r="3" fill="{colour}">'
                 f"<title>{escape(model)} {x}: {_fmt(v)}</title></circle>" for x, v in pts]
    return _svg("Accuracy vs resolution", {"kind": "line", "series": series}, body)


def gamma_chart(scores: RobustnessScores, resolution: int) -> str:
    """Bar chart of the mean gamma per dataset at one resolution."""
    per = {}
    for c in scores.cells:
        if c.resolution == resolution:
            per.setdefault(c.dataset_id, []).append(c.gamma)
    bars = {d: float(np.mean(v)) for d, v in sorted(per.items())}
    y = _y_scale(list(bars.values()))
    width = (_W - 2 * _PAD) / max(1, len(bars))
    body = []
    for k, (d, v) in enumerate(bars.items()):
        x0 = _PAD + k * width
        top, base = y(max(v, 0.0)), y(min(v, 0.0))
        body.append(f'<rect class="bar" data-dataset="{escape(d)}" x="{x0 + 2:.1f}" '
                    f'y="{top:.1f}" width="{width - 4:.1f}" height="{base - top:.1f}" '
                    f'fill="{_PALETTE[0]}"><title>{escape(d)}: {_fmt(v)}</title></rect>')
        body.append(f'<text x="{x0 + width / 2:.1f}" y="{_H - _PAD + 16}" '
                    f'text-anchor="middle" font-size="10">{escape(d)}</text>')
    return _svg(f"Mean gamma per dataset at {resolution}px",
                {"kind": "bar", "resolution": resolution, "bars": bars}, body)


def emit_report(agg: AggregateScores, scores: RobustnessScores,
                heatmaps: Mapping[int, SimilarityHeatmap] | None, out_dir: str | Path) -> Path:
    """Write ``scores.csv``, ``cells.csv``, ``heatmap_<n>.csv`` and
    ``charts/*.svg`` under ``out_dir``. Output is byte-deterministic."""
    out = Path(out_dir)
    charts = out / "charts"
    charts.mkdir(parents=True, exist_ok=True)
    write_scores_csv(agg, out / "scores.csv")
    write_cells_csv(scores, out / "cells.csv")
    for n, hm in sorted((heatmaps or {}).items()):
        hm.save_csv(out / f"heatmap_{n}.csv")
    (charts / "accuracy.svg").write_text(accuracy_chart(agg))
    for n in sorted({c.resolution for c in scores.cells}):
        (charts / f"gamma_{n}.svg").write_text(gamma_chart(scores, n))
    return out
