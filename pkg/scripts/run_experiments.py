"""Run the raw / crop / segment experiments on one corpus and compare them.

Each mode gets a full cross-validated run under OUT/<mode>/; a combined
report (metrics per experiment, average ROC, subgroup tables with one hits
column per experiment) lands in OUT/compare/.

    python scripts/run_experiments.py --out runs/phantoms --make-phantoms 40
    python scripts/run_experiments.py --out runs/real --config cfg.json
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
from pathlib import Path

from covidcxr import pipeline as pl
from covidcxr.corpus import load_manifest
from covidcxr.evalkit import format_pm
from covidcxr.lungseg import PreprocessMode


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--config", help="pipeline config JSON (manifest, network, train, ...)")
    ap.add_argument("--make-phantoms", type=int, metavar="N",
                    help="generate N phantoms per class under OUT/corpus and use them")
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--modes", nargs="+", default=[m.value for m in PreprocessMode])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    if args.make_phantoms:
        from covidcxr.phantoms import make_corpus
        make_corpus(out / "corpus", n_per_class=args.make_phantoms, seed=args.seed)
        base = pl.config_from_dict({"manifest": str(out / "corpus" / "manifest.csv")})
    elif args.config:
        base = pl.load_config(args.config)
    else:
        ap.error("need --config or --make-phantoms")
    base.seed = args.seed
    if args.epochs is not None:
        base.train.epochs = args.epochs

    preds = {}
    for mode in args.modes:
        cfg = dataclasses.replace(base, mode=PreprocessMode(mode), out=str(out / mode))
        pl.run(cfg)
        preds[mode] = pl.read_predictions(out / mode / "predictions.csv")

    summary = pl.report_stage(preds, load_manifest(base.manifest), out / "compare")
    print(f"{'experiment':<10} {'Acc':>14} {'BAcc':>14} {'GMR':>14} {'AUC':>14}")
    for exp, entry in summary.items():
        agg = entry.get("aggregate", entry["pooled"])
        std = agg.get("std", {})
        cells = [format_pm(agg[k], std.get(k, 0.0)) for k in ("acc", "bacc", "gmr", "macro_auc")]
        print(f"{exp:<10} " + " ".join(f"{c:>14}" for c in cells))
    (out / "compare" / "summary.json").write_text(json.dumps(
        {exp: e.get("aggregate", e["pooled"]) for exp, e in summary.items()}, indent=1) + "\n")


if __name__ == "__main__":
    main()
