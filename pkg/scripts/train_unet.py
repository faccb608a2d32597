"""Train the U-Net lung segmenter on image/mask pairs and report Dice on a hold-out.

Masks are looked up as ``<masks-dir>/<record_id>.png`` (non-zero = lung),
which is how ``covidcxr make-phantoms`` writes them.

    python scripts/train_unet.py --manifest corpus/manifest.csv --masks corpus/masks \
        --out unet.pt --epochs 30
"""
from __future__ import annotations

import argparse
from pathlib import Path

import numpy as np

from covidcxr.corpus import load_manifest
from covidcxr.imgproc import read_png16
from covidcxr.lungseg import LearnedUNet


def dice(a: np.ndarray, b: np.ndarray) -> float:
    s = a.sum() + b.sum()
    return 1.0 if s == 0 else 2.0 * (a & b).sum() / s


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--manifest", required=True)
    ap.add_argument("--masks", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--holdout", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    records = [r for r in load_manifest(args.manifest)
               if (Path(args.masks) / f"{r.record_id}.png").is_file()]
    order = np.random.default_rng(args.seed).permutation(len(records))
    n_test = max(1, int(len(records) * args.holdout))
    test = [records[i] for i in order[:n_test]]
    fit = [records[i] for i in order[n_test:]]

    def pairs(recs):
        return ([read_png16(r.image_path) for r in recs],
                [read_png16(Path(args.masks) / f"{r.record_id}.png") > 0 for r in recs])

    unet = LearnedUNet(size=args.size, seed=args.seed)
    losses = unet.fit(*pairs(fit), epochs=args.epochs, seed=args.seed)
    print(f"loss {losses[0]:.4f} -> {losses[-1]:.4f} over {len(losses)} epochs")
    images, masks = pairs(test)
    scores = [dice(unet.segment(im), m) for im, m in zip(images, masks)]
    print(f"hold-out Dice {np.mean(scores):.3f} (min {np.min(scores):.3f}, n={len(scores)})")
    unet.save(args.out)
    print(f"saved {args.out}")


if __name__ == "__main__":
    main()
