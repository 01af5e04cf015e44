"""AUC against number of GAN-generated positives on a 2%-positive toy set.

Prints one row per synthetic count with the mean and spread over seeds,
as CSV suitable for plotting.

    python scripts/run_gda_sweep.py --seeds 0,1,2 --counts 0,50,200,800
"""
import argparse
import csv
import logging
import sys
from dataclasses import replace

import numpy as np

from dermrep.experiments import GdaDeskRecipe, run_gda_desk


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--counts", default=None, help="comma-separated synthetic counts")
    ap.add_argument("--gan-epochs", type=int, default=None)
    ap.add_argument("--epochs", type=int, default=None, help="classifier epochs")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    recipe = GdaDeskRecipe()
    if args.counts:
        recipe = replace(recipe, counts=tuple(int(c) for c in args.counts.split(",")))
    if args.gan_epochs is not None:
        recipe = replace(recipe, gan=replace(recipe.gan, epochs=args.gan_epochs))
    if args.epochs is not None:
        recipe = replace(recipe, model=replace(recipe.model, epochs=args.epochs))

    seeds = [int(s) for s in args.seeds.split(",")]
    means, table = run_gda_desk(seeds, recipe)
    per_seed = np.array([[r.mean_auc for r in rows] for rows in table])
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["n_synthetic", "mean_auc", "std_auc"] + [f"seed_{s}" for s in seeds])
    for j, n in enumerate(recipe.counts):
        spread = per_seed[:, j].std(ddof=1) if len(seeds) > 1 else 0.0
        out.writerow([n, f"{means[j]:.4f}", f"{spread:.4f}"] + [f"{v:.4f}" for v in per_seed[:, j]])


if __name__ == "__main__":
    main()
