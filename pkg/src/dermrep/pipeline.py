"""Experiment harness: cross-validation, hold-out scoring, IHD comparison, GDA sweep."""
from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .gda import GanConfig, GanPair, calibrate_mse_floor, sample_synthetic, train_dcgan
from .metrics import FoldReport, aggregate, auc
from .model import BackboneConfig, TrainResult, predict_proba, train
from .synthdata import ConfoundConfig, Dataset, build_confounded_dataset, stratified_kfold

log = logging.getLogger(__name__)


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class FoldOutcome:
    report: FoldReport
    result: TrainResult


def run_fold(
    fold: int,
    dataset: Dataset,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    cfg: BackboneConfig,
    synthetic: Dataset | None = None,
) -> FoldOutcome:
    """Train on one fold (plus any synthetic positives) and score its real validation rows."""
    train_set = dataset.subset(train_idx)
    if synthetic is not None and len(synthetic):
        train_set = train_set + synthetic
    result = train(train_set, cfg)
    val = dataset.subset(val_idx)
    scores = predict_proba(val.images(), result.groups, cfg)
    return FoldOutcome(FoldReport.from_scores(fold, scores, val.melanoma), result)


@dataclass
class FoldFailure:
    fold: int
    error: str


def _run_fold_job(args) -> FoldOutcome:
    return run_fold(*args)


def _run_fold_job_safe(args) -> FoldOutcome | FoldFailure:
    try:
        return run_fold(*args)
    except Exception as exc:  # reported per fold by the caller
        return FoldFailure(args[0], f"{type(exc).__name__}: {exc}")


def cross_validate(
    dataset: Dataset,
    cfg: BackboneConfig,
    k: int = 5,
    seed: int = 0,
    synthetic: Dataset | None = None,
    jobs: int = 1,
    keep_going: bool = False,
) -> list[FoldOutcome]:
    """Stratified k-fold over ``dataset``; synthetic samples only join training folds.

    Fold ``i`` trains with seed ``derive_seed(cfg.seed, i)``, so results do
    not depend on ``jobs``.  With ``keep_going`` a failing fold comes back as
    a :class:`FoldFailure` instead of aborting the others.
    """
    folds = stratified_kfold(dataset, k, seed)
    args = [
        (i, dataset, tr, va, replace(cfg, seed=derive_seed(cfg.seed, i)), synthetic)
        for i, (tr, va) in enumerate(folds)
    ]
    job = _run_fold_job_safe if keep_going else _run_fold_job
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(job, args))
    return [job(a) for a in args]


def holdout_auc(train_set: Dataset, test_set: Dataset, cfg: BackboneConfig) -> float:
    result = train(train_set, cfg)
    return auc(predict_proba(test_set.images(), result.groups, cfg), test_set.melanoma)


# ---------------------------------------------------------------------------
# IHD comparison on confounded data


@dataclass
class IhdComparison:
    seeds: list[int]
    backbone_auc: list[float]
    ihd_auc: list[float]

    @property
    def gain(self) -> float:
        return float(np.mean(self.ihd_auc) - np.mean(self.backbone_auc))


def ihd_experiment(seeds: Sequence[int], data_cfg: ConfoundConfig, model_cfg: BackboneConfig) -> IhdComparison:
    """Backbone vs backbone+IHD test AUC on per-seed confounded datasets.

    Both arms share the dataset and initialisation seed; the backbone arm
    has the hair head removed.
    """
    out = IhdComparison(list(seeds), [], [])
    for seed in seeds:
        tr, te = build_confounded_dataset(replace(data_cfg, seed=seed))
        base = replace(model_cfg, seed=seed, ihd=False)
        adv = replace(model_cfg, seed=seed, ihd=True)
        out.backbone_auc.append(holdout_auc(tr, te, base))
        out.ihd_auc.append(holdout_auc(tr, te, adv))
        log.info("seed %d: backbone %.4f  ihd %.4f", seed, out.backbone_auc[-1], out.ihd_auc[-1])
    return out


# ---------------------------------------------------------------------------
# synthetic-count sweep


@dataclass
class SweepRow:
    n_synthetic: int
    mean_auc: float
    std_auc: float
    error: str = ""


def draw_synthetic_pool(pair: GanPair, positives: Dataset, n: int, seed: int, mse_floor: float | None = None) -> Dataset:
    """``n`` filtered GAN samples; smaller counts use a prefix of this pool."""
    floor = calibrate_mse_floor(positives) if mse_floor is None or mse_floor < 0 else mse_floor
    rng = np.random.default_rng([seed, 30])
    return Dataset(sample_synthetic(pair, n, positives, floor, rng))


def gda_sweep(
    train_set: Dataset,
    counts: Sequence[int],
    gan_cfg: GanConfig,
    model_cfg: BackboneConfig,
    test_set: Dataset | None = None,
    k: int = 5,
    seed: int = 0,
    jobs: int = 1,
    pair: GanPair | None = None,
) -> list[SweepRow]:
    """Train the classifier once per synthetic count and report its AUC.

    With ``test_set`` the score is the hold-out AUC (std 0); otherwise it is
    the k-fold mean and sample std.  A failing count is recorded with NaN
    and an error message; the sweep carries on.  Rows come back sorted by
    count.
    """
    counts = sorted(set(int(c) for c in counts))
    positives = Dataset([s for s in train_set if s.melanoma == 1])
    if pair is None and counts[-1] > 0:
        pair = train_dcgan(positives, gan_cfg)
    pool = draw_synthetic_pool(pair, positives, counts[-1], seed, gan_cfg.mse_floor) if counts[-1] > 0 else Dataset()
    rows = []
    for n in counts:
        synthetic = Dataset(pool.samples[:n])
        try:
            if test_set is not None:
                rows.append(SweepRow(n, holdout_auc(train_set + synthetic, test_set, model_cfg), 0.0))
            else:
                outcomes = cross_validate(train_set, model_cfg, k, seed, synthetic, jobs)
                mean, std = aggregate([o.report for o in outcomes])
                rows.append(SweepRow(n, mean, std))
        except Exception as exc:  # recorded per count; sweep continues
            log.warning("sweep count %d failed: %s", n, exc)
            rows.append(SweepRow(n, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"))
        log.info("n_synthetic=%d auc=%.4f", n, rows[-1].mean_auc)
    return rows


def default_sweep_counts(n_positive: int) -> list[int]:
    """Geometric ladder of synthetic counts relative to the real positive count."""
    return [0] + sorted({max(1, round(n_positive * f)) for f in (0.5, 1, 2, 4, 8)})
