"""Train low-resolution tokens on a frozen toy transformer.

The base model never changes; only additive per-layer tokens are learned,
by pulling embeddings of degraded inputs toward the model's own embeddings
of the clean inputs.

    python demos/04_lr_tokens.py            # 60 steps, about 10 s
    python demos/04_lr_tokens.py --steps 200
"""
import argparse

import numpy as np

from lrbench.analysis import model_heatmap
from lrbench.degrade import degrade_pipeline
from lrbench.lrtk import TrainConfig, mean_cosine, model_spec, train
from lrbench.synthetic import procedural_images
from lrbench.tinyvit import TinyViTConfig, init_params

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=60)
args = ap.parse_args()

params = init_params(TinyViTConfig(), seed=0)
cfg = TrainConfig(steps=args.steps)
sources = procedural_images(cfg.num_images, cfg.source_res, seed=cfg.seed)
before = params.to_bytes()
tokens, log = train(params, cfg, sources, callback=lambda s, l: s % 20 or print(f"step {s:4d} loss {l:.4f}"))
assert params.to_bytes() == before  # frozen base

print(f"\n{tokens.num_parameters} trainable values in {len(tokens)} banks")
print(" n   cosine before  after")
# 64px equals the toy input size, so that row is not degraded at all and
# shows what the tokens cost on clean input
for n in (16, 24, 32, 64):
    print(f"{n:3d}   {mean_cosine(params, None, sources, n):.3f}        {mean_cosine(params, tokens, sources, n):.3f}")

# layer-by-layer agreement between the 16px and HR passes
imgs = procedural_images(8, 224, seed=500)
hr = np.stack([degrade_pipeline(s, model_spec(params.config, None)) for s in imgs])
lr = np.stack([degrade_pipeline(s, model_spec(params.config, 16)) for s in imgs])
hm = model_heatmap(params, lr, hr, tokens)
print("\nLR/HR similarity by layer:", np.round(np.diag(hm.matrix), 3))
