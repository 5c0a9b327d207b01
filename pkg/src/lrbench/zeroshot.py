"""Template-averaged zero-shot classification."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .matio import load_matrix, save_matrix

PLACEHOLDER = "[L]"


class TextEncoder(Protocol):
    def __call__(self, text: str) -> np.ndarray: ...


class TieWarning(RuntimeWarning):
    """Several classes share the top logit; the lowest index was taken."""


def l2_normalize(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero vector")
    return x / n


@dataclass
class EmbeddingMatrix:
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.normalized:
            norms = np.linalg.norm(self.values, axis=1)
            if not np.allclose(norms, 1.0, atol=1e-5):
                raise ValueError("rows flagged normalized do not have unit norm")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def normalize(self) -> "EmbeddingMatrix":
        return EmbeddingMatrix(l2_normalize(self.values), True)

    def save(self, path: str | Path, **extra) -> None:
        save_matrix(path, self.values, self.normalized, **extra)

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingMatrix":
        values, meta = load_matrix(path)
        values = values.astype(float)
        if meta.get("normalized"):
            # float32 storage; restore exact unit norm
            values = l2_normalize(values)
        return cls(values, bool(meta.get("normalized")))


@dataclass
class PromptTemplateSet:
    dataset_id: str
    templates: list[str]

    def __post_init__(self):
        if not self.templates:
            raise ValueError("template set is empty")
        for t in self.templates:
            if t.count(PLACEHOLDER) != 1:
                raise ValueError(f"template {t!r} must contain {PLACEHOLDER} exactly once")

    def fill(self, label: str) -> list[str]:
        return [t.replace(PLACEHOLDER, label) for t in self.templates]

    @classmethod
    def load(cls, path: str | Path) -> "PromptTemplateSet":
        data = json.loads(Path(path).read_text())
        return cls(data["dataset_id"], list(data["templates"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            {"dataset_id": self.dataset_id, "templates": self.templates}, indent=2) + "\n")


class LookupEncoder:
    """Text encoder backed by a table of precomputed embeddings.

    The sidecar of the matrix file carries a ``keys`` list naming each row.
    """

    def __init__(self, table: dict[str, np.ndarray]):
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}

    @classmethod
    def load(cls, path: str | Path) -> "LookupEncoder":
        values, meta = load_matrix(path)
        keys = meta.get("keys")
        if keys is None or len(keys) != len(values):
            raise ValueError(f"{path}: sidecar needs a 'keys' list with one entry per row")
        return cls(dict(zip(keys, values.astype(float))))

    def __call__(self, text: str) -> np.ndarray:
        try:
            return self.table[text]
        except KeyError:
            raise KeyError(f"no precomputed embedding for {text!r}") from None


def build_class_embeddings(
    encoder: TextEncoder | Callable[[str], np.ndarray],
    labels: Sequence[str],
    templates: PromptTemplateSet,
    renormalize: bool = True,
) -> EmbeddingMatrix:
    """One row per label: normalize each template embedding, average, and
    re-normalize the mean (skip the last step with ``renormalize=False``)."""
    if not labels:
        raise ValueError("no labels")
    rows = []
    for label in labels:
        embs = l2_normalize(np.stack([encoder(t) for t in templates.fill(label)]))
        rows.append(embs.mean(axis=0))
    rows = np.stack(rows)
    if renormalize:
        return EmbeddingMatrix(l2_normalize(rows), True)
    return EmbeddingMatrix(rows, False)


@dataclass
class ZeroShotResult:
    logits: np.ndarray
    topk: np.ndarray
    ties: np.ndarray
    accuracy: dict[int, float] | None = None

    @property
    def predictions(self) -> np.ndarray:
        return self.topk[:, 0]


def classify(
    image_embeddings: EmbeddingMatrix | np.ndarray,
    class_embeddings: EmbeddingMatrix | np.ndarray,
    k: int = 1,
    labels: Sequence[int] | None = None,
) -> ZeroShotResult:
    """Score images against classes by dot product.

    Returns the top-``k`` class indices per image (stable descending order,
    so equal logits favour the lower index) and, when ``labels`` are given,
    top-1 ... top-``k`` accuracy.
    """
    img = getattr(image_embeddings, "values", image_embeddings)
    cls = getattr(class_embeddings, "values", class_embeddings)
    img = np.atleast_2d(np.asarray(img, dtype=float))
    cls = np.atleast_2d(np.asarray(cls, dtype=float))
    if img.shape[1] != cls.shape[1]:
        raise ValueError(f"dimension mismatch: images {img.shape[1]} vs classes {cls.shape[1]}")
    k = min(k, cls.shape[0])
    logits = img @ cls.T
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    top = logits[np.arange(len(logits)), order[:, 0]]
    ties = (logits == top[:, None]).sum(axis=1) > 1
    if ties.any():
        warnings.warn(f"{int(ties.sum())} image(s) with tied top logits", TieWarning, stacklevel=2)
    result = ZeroShotResult(logits, order, ties)
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != len(img):
            raise ValueError("one label per image required")
        hits = order == labels[:, None]
        result.accuracy = {j: float(hits[:, :j].any(axis=1).mean()) for j in range(1, k + 1)}
    return result

