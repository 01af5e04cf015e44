"""Backbone vs backbone+IHD on the confounded toy set (hair tracks melanoma in train only).

    python scripts/run_ihd_experiment.py --seeds 0,1,2,3,4 --lam 0.5
"""
import argparse
import json
import logging

import numpy as np

from dermrep.experiments import run_ihd_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--lam", type=float, default=None, help="override the recipe's lambda")
    ap.add_argument("--epochs", type=int, default=None)
    ap.add_argument("--json", help="write the per-seed results here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    overrides = {k: v for k, v in (("lam", args.lam), ("epochs", args.epochs)) if v is not None}
    seeds = [int(s) for s in args.seeds.split(",")]
    result, elapsed = run_ihd_desk(seeds, **overrides)
    for s, b, i in zip(seeds, result.backbone_auc, result.ihd_auc):
        print(f"seed {s}: BB {b:.4f}  BB+IHD {i:.4f}  ({i - b:+.4f})")
    print(f"mean: BB {np.mean(result.backbone_auc):.4f}  BB+IHD {np.mean(result.ihd_auc):.4f}  "
          f"gain {result.gain:+.4f}  [{elapsed:.0f}s]")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"seeds": seeds, "backbone": result.backbone_auc, "ihd": result.ihd_auc,
                       "overrides": overrides, "seconds": elapsed}, fh, indent=1)


if __name__ == "__main__":
    main()
