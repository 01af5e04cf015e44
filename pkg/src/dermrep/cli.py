"""Command-line entry point: synth, gan, gan-sample, train, sweep."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import traceback
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config, validate
from .gda import (
    GanPair,
    calibrate_mse_floor,
    load_gan,
    nearest_train_mse,
    sample_synthetic,
    save_gan,
    train_dcgan,
)
from .metrics import aggregate
from .model import save_model
from .pipeline import FoldFailure, cross_validate, default_sweep_counts, derive_seed, gda_sweep
from .synthdata import (
    ConfigError,
    Dataset,
    atomic_write_bytes,
    build_confounded_dataset,
    load_manifest,
    phi_coefficient,
    save_manifest,
)

log = logging.getLogger("dermrep")


def _dump_json(obj) -> bytes:
    return (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode("utf-8")


def _write_json(path: Path, obj) -> None:
    atomic_write_bytes(path, _dump_json(obj))


def _write_config_echo(path: Path, cfg: RunConfig, command: str) -> None:
    _write_json(path.with_name(path.name + ".config.json"), {"command": command, "config": cfg.to_dict()})


def _split(dataset: Dataset, split: str) -> Dataset:
    return Dataset([s for s in dataset if s.split == split])


def _gan_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "gan" / "generator.ckpt"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> dict:
    train_set, test_set = build_confounded_dataset(cfg.synth.confound_config(cfg.seed))
    everything = train_set + test_set
    path = cfg.manifest_path
    save_manifest(everything, path)
    _write_config_echo(path, cfg, "synth")
    rho = phi_coefficient(train_set.melanoma, train_set.hair)
    print(f"wrote {len(everything)} images to {path.parent}; train melanoma/hair correlation {rho:.4f}")
    return {"manifest": str(path), "n": len(everything), "train_correlation": rho}


def _train_positives(cfg: RunConfig) -> Dataset:
    data = _split(load_manifest(cfg.manifest_path), "train")
    return Dataset([s for s in data if s.melanoma == 1 and s.source != "synthetic_gan"])


def cmd_gan(cfg: RunConfig) -> dict:
    positives = _train_positives(cfg)
    if len(positives) == 0:
        raise ConfigError("no melanoma-positive training rows in the manifest")
    pair = train_dcgan(positives, cfg.gan)
    path = _gan_path(cfg)
    save_gan(path, pair, {"run": cfg.to_dict()})
    last = pair.history[-1]
    print(f"saved generator to {path} (critic loss {last['critic_loss']:.4f}, generator loss {last['generator_loss']:.4f})")
    return {"checkpoint": str(path)}


def _synthetic_samples(cfg: RunConfig, pair: GanPair, positives: Dataset, n: int) -> tuple[list, float]:
    floor = cfg.gan.mse_floor if cfg.gan.mse_floor >= 0 else calibrate_mse_floor(positives)
    rng = np.random.default_rng([cfg.seed, 30])
    return sample_synthetic(pair, n, positives, floor, rng), floor


def cmd_gan_sample(cfg: RunConfig, n: int) -> dict:
    pair = load_gan(_gan_path(cfg))
    positives = _train_positives(cfg)
    samples, floor = _synthetic_samples(cfg, pair, positives, n)
    out = cfg.out_dir / "gan" / "samples" / "manifest.csv"
    if samples:
        save_manifest(Dataset(samples), out)
        _write_config_echo(out, cfg, "gan-sample")
        _write_json(out.with_name("filter.json"), {"mse_floor": floor, "n": len(samples)})
    print(f"emitted {len(samples)} synthetic positives (MSE floor {floor:.5g})")
    return {"n": len(samples), "mse_floor": floor}


def _real_train(cfg: RunConfig) -> Dataset:
    data = _split(load_manifest(cfg.manifest_path), "train")
    return Dataset([s for s in data if s.source != "synthetic_gan"])


def _gda_active(cfg: RunConfig) -> bool:
    return cfg.gda.enabled and cfg.gda.synthetic_count > 0


def cmd_train(cfg: RunConfig) -> dict:
    data = _real_train(cfg)
    synthetic = None
    if _gda_active(cfg):
        pair = load_gan(_gan_path(cfg))
        positives = Dataset([s for s in data if s.melanoma == 1])
        synthetic = Dataset(_synthetic_samples(cfg, pair, positives, cfg.gda.synthetic_count)[0])
    model_cfg = cfg.model
    results = cross_validate(data, model_cfg, cfg.folds, cfg.seed, synthetic, cfg.jobs, keep_going=True)
    outcomes = [r for r in results if not isinstance(r, FoldFailure)]
    failures = [{"fold": r.fold, "error": r.error} for r in results if isinstance(r, FoldFailure)]
    report_dir = cfg.out_dir / "train"
    echo = cfg.to_dict()
    for o in outcomes:
        i = o.report.fold
        _write_json(report_dir / f"fold_{i}.json", {**o.report.to_json(), "config": echo})
        save_model(report_dir / f"fold_{i}.ckpt", o.result.groups, model_cfg,
                   {"fold": i, "run": echo, "fold_seed": derive_seed(model_cfg.seed, i)})
    if failures:
        _write_json(report_dir / "fold_errors.json", failures)
        raise RuntimeError(f"{len(failures)} of {cfg.folds} folds failed; completed folds were saved")
    mean, std = aggregate([o.report for o in outcomes])
    summary = {
        "folds": [o.report.auc for o in outcomes],
        "mean_auc": mean,
        "std_auc": std,
        "n_synthetic": len(synthetic) if synthetic is not None else 0,
        "config": echo,
    }
    _write_json(report_dir / "aggregate.json", summary)
    print(f"AUC over {len(outcomes)} folds: {mean:.4f} ± {std:.4f}")
    return summary


def cmd_sweep(cfg: RunConfig, counts: list[int] | None) -> dict:
    data = _real_train(cfg)
    positives = Dataset([s for s in data if s.melanoma == 1])
    counts = sorted(set(counts or cfg.sweep.counts or default_sweep_counts(len(positives))))
    pair = load_gan(_gan_path(cfg)) if counts[-1] > 0 else None
    rows = gda_sweep(data, counts, cfg.gan, cfg.model, k=cfg.folds, seed=cfg.seed, jobs=cfg.jobs, pair=pair)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n_synthetic", "mean_auc", "std_auc"])
    for r in rows:
        writer.writerow([r.n_synthetic, repr(r.mean_auc), repr(r.std_auc)])
    path = cfg.out_dir / "sweep.csv"
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))
    _write_config_echo(path, cfg, "sweep")
    failures = [{"n_synthetic": r.n_synthetic, "error": r.error} for r in rows if r.error]
    if failures:
        _write_json(cfg.out_dir / "sweep_errors.json", failures)
    print(buf.getvalue(), end="")
    return {"rows": len(rows), "failures": failures}


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--folds", type=int)
    common.add_argument("--lambda", dest="lam", type=float, help="hair-branch weight")
    common.add_argument("--no-ihd", action="store_true", help="drop the hair branch")
    common.add_argument("--no-gda", action="store_true", help="train without synthetic positives")
    common.add_argument("--no-color-constancy", action="store_true")
    common.add_argument("--synthetic-count", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dermrep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="render the confounded toy dataset")
    sub.add_parser("gan", parents=[common], help="train the DCGAN on training positives")
    p = sub.add_parser("gan-sample", parents=[common], help="emit filtered synthetic positives")
    p.add_argument("-n", type=int, default=None, help="number of samples (default: gda.synthetic_count)")
    sub.add_parser("train", parents=[common], help="k-fold training and AUC reports")
    p = sub.add_parser("sweep", parents=[common], help="AUC versus number of synthetic images")
    p.add_argument("--counts", help="comma-separated synthetic counts")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    if args.folds is not None:
        if args.folds < 2:
            raise ConfigError(f"--folds must be >= 2, got {args.folds}")
        cfg.folds = args.folds
    if args.jobs is not None:
        cfg.jobs = max(1, args.jobs)
    if args.lam is not None:
        if args.lam < 0:
            raise ConfigError(f"--lambda must be >= 0, got {args.lam}")
        cfg.model.lam = args.lam
    if args.no_ihd:
        cfg.model.ihd = False
    if args.no_gda:
        cfg.gda.enabled = False
    if args.no_color_constancy:
        cfg.model.use_color_constancy = False
    if args.synthetic_count is not None:
        if args.synthetic_count < 0:
            raise ConfigError("--synthetic-count must be >= 0")
        cfg.gda.synthetic_count = args.synthetic_count
    return validate(cfg)


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = None
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "gan":
            cmd_gan(cfg)
        elif args.command == "gan-sample":
            cmd_gan_sample(cfg, cfg.gda.synthetic_count if args.n is None else args.n)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "sweep":
            counts = [int(c) for c in args.counts.split(",")] if args.counts else None
            result = cmd_sweep(cfg, counts)
            if result["failures"]:
                raise RuntimeError(f"{len(result['failures'])} sweep point(s) failed")
    except Exception as exc:
        record = {
            "command": args.command,
            "error": type(exc).__name__,
            "message": str(exc),
        }
        print(json.dumps(record), file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        if cfg is not None:
            try:
                _write_json(cfg.out_dir / f"error_{args.command}.json", record)
            except OSError:
                pass
        return 2 if isinstance(exc, ConfigError) else 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
