"""A small pre-LN vision transformer in numpy, with additive token banks.

The base weights are never trained here, so the backward pass only
propagates gradients to the residual stream (and from there to the
additive token banks or concatenated prompt tokens), not to the weights.

Shapes: images (B, R, R, 3); residual stream (B, S, D) where position 0 is
the class token, positions 1..T the spatial tokens and, for the
concatenation variant, T+1.. the prompt tokens.
"""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass(frozen=True)
class TinyViTConfig:
    input_res: int = 64
    patch_size: int = 8
    dim: int = 32
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    embed_dim_out: int = 32

    def __post_init__(self):
        if self.input_res % self.patch_size:
            raise ValueError("input_res must be divisible by patch_size")
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def grid(self) -> int:
        return self.input_res // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    @classmethod
    def from_dict(cls, d: dict) -> "TinyViTConfig":
        names = cls.__dataclass_fields__
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class BaseParameters:
    config: TinyViTConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def to_bytes(self) -> bytes:
        """float32 serialization in a fixed order; used for checkpoints."""
        buf = io.BytesIO()
        for name in sorted(self.arrays):
            buf.write(self.arrays[name].astype("<f4").tobytes())
        return buf.getvalue()

    def manifest(self, **extra) -> dict:
        return {
            "config": asdict(self.config),
            "arrays": [[n, list(self.arrays[n].shape)] for n in sorted(self.arrays)],
            **extra,
        }

    def save(self, path: str | Path, **extra) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        path.with_name(path.name + ".json").write_text(
            json.dumps(self.manifest(**extra), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "BaseParameters":
        path = Path(path)
        manifest = json.loads(path.with_name(path.name + ".json").read_text())
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        arrays, off = {}, 0
        for name, shape in manifest["arrays"]:
            size = int(np.prod(shape))
            arrays[name] = raw[off:off + size].reshape(shape).astype(float)
            off += size
        if off != raw.size:
            raise ValueError(f"{path}: size does not match manifest")
        return cls(TinyViTConfig.from_dict(manifest["config"]), arrays)


def init_params(cfg: TinyViTConfig, seed: int = 0, dc_gain: float = 0.0,
                calibration_images: int = 64) -> BaseParameters:
    """Random base weights, rounded to float32 so checkpoints are exact.

    Patch filters keep only ``dc_gain`` of their per-patch mean response, so
    the embedding leans on edges and texture rather than on flat colour.
    With ``calibration_images > 0`` the final LayerNorm bias is then set so
    that the mean pre-head feature over that many procedural images is
    zero (see :func:`calibrate_head`). Without it, all random images embed
    close to one shared direction and contrastive training has nothing to
    separate.
    """
    rng = np.random.default_rng(seed)
    d, h, p = cfg.dim, cfg.hidden, cfg.patch_size

    def lin(fan_in, fan_out):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

    patch_w = lin(p * p * 3, d).reshape(p, p, 3, d)
    dc = patch_w.mean(axis=(0, 1), keepdims=True)
    patch_w = (patch_w - dc + dc_gain * dc).reshape(p * p * 3, d)
    a = {
        "patch_w": patch_w,
        "patch_b": rng.normal(0.0, 0.02, d),
        "cls": np.zeros(d),
        "pos": rng.normal(0.0, 0.05, (cfg.num_patches + 1, d)),
        "ln_g": 1.0 + rng.normal(0.0, 0.1, d),
        "ln_b": np.zeros(d),
        "head_w": lin(d, cfg.embed_dim_out),
    }
    for b in range(1, cfg.depth + 1):
        a[f"b{b}.ln1_g"] = 1.0 + rng.normal(0.0, 0.1, d)
        a[f"b{b}.ln1_b"] = rng.normal(0.0, 0.02, d)
        a[f"b{b}.qkv_w"] = lin(d, 3 * d)
        a[f"b{b}.qkv_b"] = rng.normal(0.0, 0.02, 3 * d)
        a[f"b{b}.proj_w"] = lin(d, d)
        a[f"b{b}.proj_b"] = rng.normal(0.0, 0.02, d)
        a[f"b{b}.ln2_g"] = 1.0 + rng.normal(0.0, 0.1, d)
        a[f"b{b}.ln2_b"] = rng.normal(0.0, 0.02, d)
        a[f"b{b}.fc1_w"] = lin(d, h)
        a[f"b{b}.fc1_b"] = rng.normal(0.0, 0.02, h)
        a[f"b{b}.fc2_w"] = lin(h, d)
        a[f"b{b}.fc2_b"] = rng.normal(0.0, 0.02, d)
    params = _freeze(cfg, a)
    if calibration_images > 0:
        from .degrade import CLIP_MEAN, CLIP_STD, PreprocessSpec, degrade_pipeline
        from .synthetic import procedural_images

        spec = PreprocessSpec(None, cfg.input_res, CLIP_MEAN, CLIP_STD)
        cal = procedural_images(calibration_images, 224, seed=1000 + seed)
        params = calibrate_head(params, np.stack([degrade_pipeline(c, spec) for c in cal]))
    return params


def _freeze(cfg: TinyViTConfig, a: dict) -> BaseParameters:
    arrays = {k: np.asarray(v).astype(np.float32).astype(float) for k, v in a.items()}
    for v in arrays.values():
        v.setflags(write=False)
    return BaseParameters(cfg, arrays)


def calibrate_head(params: BaseParameters, images: np.ndarray) -> BaseParameters:
    """Copy of ``params`` whose final LN bias centres the features of ``images``."""
    r = forward(params, images, keep_cache=True)
    xhat, _, g = r.cache["ln"]
    a = dict(params.arrays)
    a["ln_b"] = -(xhat * g).mean(axis=0)
    return _freeze(params.config, a)


def active_banks(depth: int, start_block: int) -> list[int]:
    """Bank indices in use when tokens are introduced from ``start_block``.

    Bank 0 sits after patchification and is only used for ``start_block=0``;
    bank b (1..depth) is added before block b when ``b >= max(start_block, 1)``.
    """
    if not 0 <= start_block <= depth:
        raise ValueError(f"start_block must lie in [0, {depth}]")
    banks = [0] if start_block == 0 else []
    return banks + list(range(max(start_block, 1), depth + 1))


# ---------------------------------------------------------------------------
# primitives with caches for the backward pass


def patchify(img: np.ndarray, p: int) -> np.ndarray:
    """(B, R, R, 3) -> (B, T, p*p*3), patches in row-major order."""
    b, r, _, c = img.shape
    g = r // p
    x = img.reshape(b, g, p, g, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, g * g, p * p * c)


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (x - mu) * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_back(dy, cache):
    xhat, rstd, g = cache
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def _gelu(u):
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(dy, u, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return dy * (0.5 * (1.0 + t) + 0.5 * u * dt)


def _softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def _block(params, b, x, heads):
    pre = f"b{b}."
    bsz, s, d = x.shape
    dh = d // heads
    h1, ln1 = _ln(x, params[pre + "ln1_g"], params[pre + "ln1_b"])
    qkv = h1 @ params[pre + "qkv_w"] + params[pre + "qkv_b"]
    qkv = qkv.reshape(bsz, s, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = _softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
    o = (att @ v).transpose(0, 2, 1, 3).reshape(bsz, s, d)
    x1 = x + o @ params[pre + "proj_w"] + params[pre + "proj_b"]
    h2, ln2 = _ln(x1, params[pre + "ln2_g"], params[pre + "ln2_b"])
    u = h2 @ params[pre + "fc1_w"] + params[pre + "fc1_b"]
    gu, t = _gelu(u)
    x2 = x1 + gu @ params[pre + "fc2_w"] + params[pre + "fc2_b"]
    return x2, (ln1, q, k, v, att, ln2, u, t)


def _block_back(params, b, dx2, cache, heads):
    pre = f"b{b}."
    ln1, q, k, v, att, ln2, u, t = cache
    bsz, s, d = dx2.shape
    dh = d // heads
    du = _gelu_back(dx2 @ params[pre + "fc2_w"].T, u, t)
    dx1 = dx2 + _ln_back(du @ params[pre + "fc1_w"].T, ln2)
    do = (dx1 @ params[pre + "proj_w"].T).reshape(bsz, s, heads, dh).transpose(0, 2, 1, 3)
    datt = do @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ do
    ds = att * (datt - (datt * att).sum(-1, keepdims=True)) / np.sqrt(dh)
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(bsz, s, 3 * d)
    return dx1 + _ln_back(dqkv @ params[pre + "qkv_w"].T, ln1)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardResult:
    embedding: np.ndarray  # (B, E), unit rows
    layers: np.ndarray  # (B, depth + 1, D), unit rows per layer
    cache: dict | None = None


def forward(
    params: BaseParameters,
    img: np.ndarray,
    tokens=None,
    start_block: int = 0,
    vpt: np.ndarray | None = None,
    keep_cache: bool = False,
) -> ForwardResult:
    """Encode a batch of preprocessed images.

    ``tokens`` is an :class:`~lrbench.lrtk.LRTokenBank` (or a list of
    depth + 1 arrays of shape (T, D)); the banks selected by
    :func:`active_banks` are added to the spatial tokens. ``vpt`` is an
    (M, D) array of prompt tokens concatenated after the spatial tokens
    before block 1. The two can be combined but normally are not.
    """
    cfg = params.config
    img = np.asarray(img, dtype=float)
    if img.ndim == 3:
        img = img[None]
    if img.shape[1:] != (cfg.input_res, cfg.input_res, 3):
        raise ValueError(f"expected images of {cfg.input_res}x{cfg.input_res}x3, got {img.shape[1:]}")
    banks = getattr(tokens, "banks", tokens)
    active = set(active_banks(cfg.depth, start_block)) if banks is not None else set()
    bsz, t = img.shape[0], cfg.num_patches

    e = patchify(img, cfg.patch_size) @ params["patch_w"] + params["patch_b"]
    if 0 in active:
        e = e + banks[0]
    cls = np.broadcast_to(params["cls"], (bsz, 1, cfg.dim))
    x = np.concatenate([cls, e], axis=1) + params["pos"]
    if vpt is not None:
        vpt = np.asarray(vpt, dtype=float)
        x = np.concatenate([x, np.broadcast_to(vpt, (bsz,) + vpt.shape)], axis=1)

    layers = [x[:, 1:1 + t].mean(1)]
    caches = []
    for b in range(1, cfg.depth + 1):
        if b in active:
            x = x.copy()
            x[:, 1:1 + t] += banks[b]
        x, c = _block(params, b, x, cfg.heads)
        caches.append(c)
        layers.append(x[:, 1:1 + t].mean(1))

    c_ln, ln_cache = _ln(x[:, 0], params["ln_g"], params["ln_b"])
    z = c_ln @ params["head_w"]
    znorm = np.linalg.norm(z, axis=-1, keepdims=True)
    f = z / znorm
    layers = np.stack(layers, axis=1)
    layers = layers / np.linalg.norm(layers, axis=-1, keepdims=True)
    cache = None
    if keep_cache:
        cache = {"blocks": caches, "ln": ln_cache, "f": f, "znorm": znorm,
                 "shape": x.shape, "active": active}
    return ForwardResult(f, layers, cache)


def backward(params: BaseParameters, result: ForwardResult, d_embedding: np.ndarray) -> dict:
    """Gradients of a scalar loss given dL/d(embedding).

    Returns ``{"stream": [...], "banks": {b: (T, D)}, "vpt": (M, D) | None}``
    where ``stream[b]`` is dL/dx at the input of block b+1 (after any bank
    addition), summed over nothing, shape (B, S, D).
    """
    cfg = params.config
    c = result.cache
    if c is None:
        raise ValueError("forward was run without keep_cache=True")
    t = cfg.num_patches
    f, znorm = c["f"], c["znorm"]
    g = np.asarray(d_embedding, dtype=float)
    dz = (g - f * (f * g).sum(-1, keepdims=True)) / znorm
    dc = _ln_back(dz @ params["head_w"].T, c["ln"])
    dx = np.zeros(c["shape"])
    dx[:, 0] = dc
    stream = [None] * cfg.depth
    for b in range(cfg.depth, 0, -1):
        dx = _block_back(params, b, dx, c["blocks"][b - 1], cfg.heads)
        stream[b - 1] = dx
    banks = {b: stream[max(b, 1) - 1][:, 1:1 + t].sum(0) for b in sorted(c["active"])}
    vpt = stream[0][:, 1 + t:].sum(0) if c["shape"][1] > 1 + t else None
    return {"stream": stream, "banks": banks, "vpt": vpt}


def vpt_forward(params: BaseParameters, vpt_tokens: np.ndarray, img: np.ndarray,
                keep_cache: bool = False) -> ForwardResult:
    """Forward pass with prompt tokens concatenated before block 1 only."""
    return forward(params, img, vpt=vpt_tokens, keep_cache=keep_cache)


def init_vpt(cfg: TinyViTConfig, count: int = 50) -> np.ndarray:
    return np.zeros((count, cfg.dim))
