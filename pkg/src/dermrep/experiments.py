"""Desk-scale experiment recipes shared by the scripts and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .gda import GanConfig
from .model import BackboneConfig
from .pipeline import IhdComparison, SweepRow, gda_sweep, ihd_experiment
from .synthdata import ConfoundConfig, build_confounded_dataset


def ihd_desk_configs() -> tuple[ConfoundConfig, BackboneConfig]:
    """64×64 confounded data (rho 0.8 train, 0 test); the backbone works at 32×32."""
    data = ConfoundConfig(n_train=2000, n_test=1000, rho=0.8, size=64)
    model = BackboneConfig(input_size=32, feature_dim=32, epochs=12, lr=2e-3, lam=0.5, dtype="float32")
    return data, model


def run_ihd_desk(seeds: Sequence[int] = range(5), **model_overrides) -> tuple[IhdComparison, float]:
    data, model = ihd_desk_configs()
    t0 = time.perf_counter()
    result = ihd_experiment(seeds, data, replace(model, **model_overrides))
    return result, time.perf_counter() - t0


@dataclass
class GdaDeskRecipe:
    counts: tuple[int, ...] = (0, 50, 200, 800)
    data: ConfoundConfig = field(default_factory=lambda: ConfoundConfig(
        n_train=1000, n_test=600, positive_rate=0.02, rho=0.0, test_positive_rate=0.5, size=32))
    model: BackboneConfig = field(default_factory=lambda: BackboneConfig(
        input_size=32, feature_dim=32, epochs=15, lr=2e-3, ihd=False, dtype="float32"))
    gan: GanConfig = field(default_factory=lambda: GanConfig(
        img_size=32, width=8, z_dim=32, epochs=150, iters_per_epoch=2, lr=1e-3, clip_c=0.02))


def run_gda_desk(seeds: Sequence[int] = range(3), recipe: GdaDeskRecipe | None = None) -> tuple[np.ndarray, list[list[SweepRow]]]:
    """Hold-out AUC per synthetic count for each seed; returns (mean over seeds, raw rows)."""
    recipe = recipe or GdaDeskRecipe()
    table = []
    for seed in seeds:
        train_set, test_set = build_confounded_dataset(replace(recipe.data, seed=seed))
        table.append(gda_sweep(train_set, recipe.counts, replace(recipe.gan, seed=seed),
                               replace(recipe.model, seed=seed), test_set=test_set, seed=seed))
    means = np.array([[r.mean_auc for r in rows] for rows in table]).mean(axis=0)
    return means, table
