"""LR token banks and teacher/student contrastive distillation.

The frozen base model without tokens is the teacher and embeds HR images.
The same model with additive token banks is the student and embeds the HR
images plus one degraded copy per resolution bucket. Only the token banks
are updated.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .degrade import CLIP_MEAN, CLIP_STD, PreprocessSpec, degrade_pipeline
from .synthetic import procedural_images  # noqa: F401  (re-export)
from .tinyvit import BaseParameters, TinyViTConfig, active_banks, backward, forward

DEFAULT_TAU = 0.07
DEFAULT_BUCKETS = ((16, 32), (32, 64), (64, 128))


class TrainingError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class LRTokenBank:
    """depth + 1 arrays of shape (num_patches, dim); zero-initialized."""

    banks: list[np.ndarray]

    @classmethod
    def zeros(cls, cfg: TinyViTConfig) -> "LRTokenBank":
        return cls([np.zeros((cfg.num_patches, cfg.dim)) for _ in range(cfg.depth + 1)])

    def __len__(self):
        return len(self.banks)

    def copy(self) -> "LRTokenBank":
        return LRTokenBank([b.copy() for b in self.banks])

    @property
    def num_parameters(self) -> int:
        return sum(b.size for b in self.banks)

    def save(self, path: str | Path, **extra) -> None:
        path = Path(path)
        path.write_bytes(b"".join(b.astype("<f4").tobytes() for b in self.banks))
        manifest = {"count": len(self.banks), "shape": list(self.banks[0].shape), **extra}
        path.with_name(path.name + ".json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LRTokenBank":
        path = Path(path)
        manifest = json.loads(path.with_name(path.name + ".json").read_text())
        shape = tuple(manifest["shape"])
        raw = np.frombuffer(path.read_bytes(), dtype="<f4").astype(float)
        return cls(list(raw.reshape((manifest["count"],) + shape)))


@dataclass(frozen=True)
class BucketSpec:
    buckets: tuple[tuple[int, int], ...] = DEFAULT_BUCKETS

    def __post_init__(self):
        if not self.buckets:
            raise ValueError("at least one bucket required")
        for lo, hi in self.buckets:
            if not 0 < lo < hi:
                raise ValueError(f"bucket [{lo}, {hi}] needs 0 < lo < hi")

    @classmethod
    def parse(cls, text: str) -> "BucketSpec":
        """``"16:32,32:64"`` -> ((16, 32), (32, 64))."""
        out = []
        for item in text.split(","):
            lo, _, hi = item.strip().partition(":")
            out.append((int(lo), int(hi)))
        return cls(tuple(out))

    def __str__(self):
        return ",".join(f"{lo}:{hi}" for lo, hi in self.buckets)


def model_spec(cfg: TinyViTConfig, low_res: int | None) -> PreprocessSpec:
    return PreprocessSpec(low_res, cfg.input_res, CLIP_MEAN, CLIP_STD)


def sample_multiscale(img: np.ndarray, buckets: BucketSpec, rng: np.random.Generator,
                      model_res: int = 64) -> tuple[list[np.ndarray], list[int]]:
    """One degraded copy of ``img`` per bucket, at a resolution drawn
    uniformly from the bucket's closed range.

    Returns the model-ready images (normalized) and the sampled resolutions.
    """
    images, sizes = [], []
    for lo, hi in buckets.buckets:
        n = int(rng.integers(lo, hi + 1))
        spec = PreprocessSpec(n, model_res, CLIP_MEAN, CLIP_STD)
        images.append(degrade_pipeline(img, spec))
        sizes.append(n)
    return images, sizes


# ---------------------------------------------------------------------------
# loss


def _ce_grad(logits):
    """Mean cross-entropy of rows against the diagonal, and d/dlogits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = len(logits)
    loss = -np.trace(logp) / b
    grad = (np.exp(logp) - np.eye(b)) / b
    return loss, grad


def contrastive_distill_loss_and_grad(student_sets: Sequence[np.ndarray], teacher: np.ndarray,
                                      tau: float = DEFAULT_TAU):
    """Symmetric CLIP-style loss of each student set against the teacher.

    Returns ``(loss, grads)`` where ``grads[i]`` is dL/d student_sets[i];
    the teacher receives no gradient. The total is the mean over sets.
    """
    teacher = np.asarray(teacher, dtype=float)
    if len(teacher) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    total, grads = 0.0, []
    m = len(student_sets)
    for s in student_sets:
        s = np.asarray(s, dtype=float)
        if s.shape != teacher.shape:
            raise ValueError("student and teacher feature shapes differ")
        logits = s @ teacher.T / tau
        l_row, g_row = _ce_grad(logits)
        l_col, g_col = _ce_grad(logits.T)
        total += 0.5 * (l_row + l_col)
        dlogits = 0.5 * (g_row + g_col.T)
        grads.append(dlogits @ teacher / tau / m)
    return total / m, grads


def contrastive_distill_loss(student_sets: Sequence[np.ndarray], teacher: np.ndarray,
                             tau: float = DEFAULT_TAU) -> float:
    return contrastive_distill_loss_and_grad(student_sets, teacher, tau)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainBatch:
    hr_images: np.ndarray  # (B, R, R, 3), model-ready
    lr_images: list[np.ndarray]  # one (B, R, R, 3) array per bucket
    lr_sizes: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        for lr in self.lr_images:
            if lr.shape != self.hr_images.shape:
                raise ValueError("every LR set must match the HR batch shape")


def make_batch(sources: np.ndarray, cfg: TinyViTConfig, buckets: BucketSpec,
               rng: np.random.Generator, hr_images: np.ndarray | None = None) -> TrainBatch:
    """HR inputs plus one degraded copy per bucket for each source image."""
    if hr_images is None:
        hr_images = np.stack([degrade_pipeline(s, model_spec(cfg, None)) for s in sources])
    per_image = [sample_multiscale(s, buckets, rng, cfg.input_res) for s in sources]
    lr = [np.stack([imgs[k] for imgs, _ in per_image]) for k in range(len(buckets.buckets))]
    sizes = [[sz[k] for _, sz in per_image] for k in range(len(buckets.buckets))]
    return TrainBatch(hr_images, lr, sizes)


def teacher_features(params: BaseParameters, hr_images: np.ndarray) -> np.ndarray:
    return forward(params, hr_images).embedding


def _student_pass(params, tokens, batch, tau, start_block, teacher, need_grad=True):
    """Loss, per-set student embeddings and (optionally) bank gradients."""
    if teacher is None:
        teacher = teacher_features(params, batch.hr_images)
    b = len(batch.hr_images)
    res = forward(params, np.concatenate([batch.hr_images, *batch.lr_images]),
                  tokens, start_block, keep_cache=need_grad)
    sets = [res.embedding[i * b:(i + 1) * b] for i in range(1 + len(batch.lr_images))]
    loss, grads = contrastive_distill_loss_and_grad(sets, teacher, tau)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss}")
    bank_grads = backward(params, res, np.concatenate(grads))["banks"] if need_grad else {}
    for k, gk in bank_grads.items():
        if not np.all(np.isfinite(gk)):
            raise TrainingError(f"non-finite gradient for bank {k}")
    return float(loss), sets, bank_grads


def train_step(params: BaseParameters, tokens: LRTokenBank, batch: TrainBatch,
               tau: float = DEFAULT_TAU, lr: float = 1e-2, start_block: int = 0,
               teacher: np.ndarray | None = None) -> tuple[LRTokenBank, float]:
    """One plain gradient-descent update of the active token banks.

    ``teacher`` may carry precomputed teacher features for ``batch``.
    Returns new token banks (the input is not modified) and the loss
    before the update.
    """
    loss, _, grads = _student_pass(params, tokens, batch, tau, start_block, teacher)
    new = tokens.copy()
    for k, gk in grads.items():
        new.banks[k] = new.banks[k] - lr * gk
    return new, loss


def token_gradients(params: BaseParameters, tokens: LRTokenBank, batch: TrainBatch,
                    tau: float = DEFAULT_TAU, start_block: int = 0,
                    teacher: np.ndarray | None = None) -> tuple[float, dict[int, np.ndarray]]:
    """Loss and analytic gradient for every active bank (no update)."""
    loss, _, grads = _student_pass(params, tokens, batch, tau, start_block, teacher)
    return loss, grads


def distill_loss(params, tokens, batch, tau=DEFAULT_TAU, start_block=0, teacher=None) -> float:
    """Loss only; used by finite-difference checks."""
    return _student_pass(params, tokens, batch, tau, start_block, teacher, need_grad=False)[0]


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 1e-2
    tau: float = DEFAULT_TAU
    seed: int = 0
    start_block: int = 0
    buckets: BucketSpec = field(default_factory=BucketSpec)
    num_images: int = 8
    source_res: int = 224
    model: TinyViTConfig = field(default_factory=TinyViTConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["buckets"] = [list(b) for b in self.buckets.buckets]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "model" in d:
            d["model"] = TinyViTConfig.from_dict(d["model"])
        if "buckets" in d:
            b = d["buckets"]
            d["buckets"] = BucketSpec.parse(b) if isinstance(b, str) else BucketSpec(
                tuple(tuple(x) for x in b))
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainLog:
    loss: list[float] = field(default_factory=list)
    # mean cosine(student LR, teacher HR) per bucket, per step (pre-update)
    lr_cosine: list[list[float]] = field(default_factory=list)


def train(params: BaseParameters, cfg: TrainConfig, sources: np.ndarray | None = None,
          tokens: LRTokenBank | None = None, callback=None) -> tuple[LRTokenBank, TrainLog]:
    """Seeded training loop over a fixed set of source images.

    A fresh LR resolution is drawn per image and bucket at every step.
    """
    rng = np.random.default_rng(cfg.seed)
    if sources is None:
        sources = procedural_images(cfg.num_images, cfg.source_res, seed=cfg.seed)
    tokens = tokens.copy() if tokens is not None else LRTokenBank.zeros(params.config)
    hr = np.stack([degrade_pipeline(s, model_spec(params.config, None)) for s in sources])
    teacher = teacher_features(params, hr)
    log = TrainLog()
    for step in range(cfg.steps):
        batch = make_batch(sources, params.config, cfg.buckets, rng, hr_images=hr)
        try:
            loss, sets, grads = _student_pass(params, tokens, batch, cfg.tau, cfg.start_block, teacher)
        except TrainingError as exc:
            raise TrainingError(f"step {step}: {exc}") from None
        for k, gk in grads.items():
            tokens.banks[k] = tokens.banks[k] - cfg.lr * gk
        log.loss.append(float(loss))
        log.lr_cosine.append([float((s * teacher).sum(1).mean()) for s in sets[1:]])
        if callback is not None:
            callback(step, loss)
    return tokens, log


def mean_cosine(params: BaseParameters, tokens, sources: np.ndarray, low_res: int,
                start_block: int = 0) -> float:
    """Mean cosine between student embeddings at ``low_res`` and the
    teacher's HR embeddings (pass ``tokens=None`` for the bare model)."""
    cfg = params.config
    hr = np.stack([degrade_pipeline(s, model_spec(cfg, None)) for s in sources])
    lr = np.stack([degrade_pipeline(s, model_spec(cfg, low_res)) for s in sources])
    t = teacher_features(params, hr)
    s = forward(params, lr, tokens, start_block).embedding
    return float((s * t).sum(1).mean())


def trainable_parameters(cfg: TinyViTConfig, start_block: int) -> set[tuple[int, int, int]]:
    """Identifiers (bank, patch, channel) of the parameters trained for a
    given start block."""
    return {(b, i, j) for b in active_banks(cfg.depth, start_block)
            for i in range(cfg.num_patches) for j in range(cfg.dim)}
