"""Simulate low-resolution capture on an image and measure what is lost.

    python demos/03_degradation.py [image.png] [--out DIR]

Without an image argument a procedural test pattern is used.
"""
import argparse
from pathlib import Path

from lrbench.degrade import PreprocessSpec, degrade_pipeline, load_image, psnr, save_image
from lrbench.synthetic import procedural_images

ap = argparse.ArgumentParser()
ap.add_argument("image", nargs="?")
ap.add_argument("--out", default="/tmp/lrbench_demo/degrade")
args = ap.parse_args()

img = load_image(args.image) if args.image else procedural_images(1, 224, seed=3)[0]
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# HR reference: the model-res version with no low-res step
ref = degrade_pipeline(img, PreprocessSpec(None, 224), normalize=False)
save_image(out / "hr.png", ref)
for n in (128, 64, 32, 16):
    plain = degrade_pipeline(img, PreprocessSpec(n, 224), normalize=False)
    smooth = degrade_pipeline(img, PreprocessSpec(n, 224, antialias=True), normalize=False)
    save_image(out / f"lr_{n}.png", plain)
    print(f"n={n:3d}  PSNR {psnr(ref, plain):6.2f} dB   with antialias {psnr(ref, smooth):6.2f} dB")
print(f"images written to {out}/")
