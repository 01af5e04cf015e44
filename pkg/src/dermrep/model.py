"""Small CNN extractor with a melanoma head and a gradient-reversed hair head."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import AdamState, ParamGroups, joint_step
from .preprocess import max_rgb, resize
from .synthdata import Dataset


class DivergenceError(FloatingPointError):
    pass


@dataclass
class BackboneConfig:
    input_size: int = 64
    blocks: tuple[tuple[int, int], ...] = ((8, 2), (16, 2), (32, 2))
    feature_dim: int = 64
    use_color_constancy: bool = True
    lam: float = 1.0
    ihd: bool = True
    epochs: int = 10
    batch_size: int = 64
    lr: float = 3e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.blocks = tuple(tuple(int(v) for v in b) for b in self.blocks)
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        return d


# ---------------------------------------------------------------------------
# parameters


def _he(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def init_params(cfg: BackboneConfig) -> ParamGroups:
    """Initialise the three parameter groups from independent RNG streams.

    The hair head draws from its own stream, so adding or removing it does
    not perturb the extractor or melanoma-head initialisation.
    """
    dtype = np.dtype(cfg.dtype)
    rf = np.random.default_rng([cfg.seed, 10])
    theta_f: dict[str, Tensor] = {}
    c_in = 3
    for i, (c, _) in enumerate(cfg.blocks):
        theta_f[f"f.conv{i}.w"] = _he(rf, (c, c_in, 3, 3), c_in * 9)
        theta_f[f"f.conv{i}.b"] = np.zeros(c)
        c_in = c
    theta_f["f.fc.w"] = _he(rf, (cfg.feature_dim, c_in), c_in)
    theta_f["f.fc.b"] = np.zeros(cfg.feature_dim)

    rm = np.random.default_rng([cfg.seed, 11])
    rh = np.random.default_rng([cfg.seed, 12])
    bound = 1.0 / math.sqrt(cfg.feature_dim)
    theta_m = {"m.w": rm.uniform(-bound, bound, (2, cfg.feature_dim)), "m.b": np.zeros(2)}
    theta_h = {"h.w": rh.uniform(-bound, bound, (2, cfg.feature_dim)), "h.b": np.zeros(2)} if cfg.ihd else {}

    def wrap(d):
        return {k: Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k) for k, v in d.items()}

    def adam():
        return AdamState(eta=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)

    return ParamGroups(wrap(theta_f), wrap(theta_m), wrap(theta_h), adam(), adam())


def param_arrays(groups: ParamGroups) -> dict[str, np.ndarray]:
    return {k: t.data for k, t in groups.all_params().items()}


def save_model(path, groups: ParamGroups, cfg: BackboneConfig, extra: dict | None = None) -> None:
    save_checkpoint(path, param_arrays(groups), {"kind": "backbone", "config": cfg.to_dict(), **(extra or {})})


def load_model(path) -> tuple[ParamGroups, BackboneConfig]:
    arrays, meta = load_checkpoint(path)
    cfg = BackboneConfig(**meta["config"])
    groups = init_params(cfg)
    for k, t in groups.all_params().items():
        t.data = arrays[k].astype(cfg.dtype)
    return groups, cfg


# ---------------------------------------------------------------------------
# forward pass


def prepare_images(images: np.ndarray, cfg: BackboneConfig) -> np.ndarray:
    """Colour constancy (if enabled), resize, centre, and convert to NCHW."""
    out = []
    for img in images:
        if cfg.use_color_constancy:
            img = max_rgb(img)
        if img.shape[:2] != (cfg.input_size, cfg.input_size):
            img = resize(img, cfg.input_size, cfg.input_size)
        out.append(img)
    arr = np.stack(out).transpose(0, 3, 1, 2) - 0.5 if out else np.zeros((0, 3, cfg.input_size, cfg.input_size))
    return np.ascontiguousarray(arr, dtype=cfg.dtype)


def forward_features(x: np.ndarray | Tensor, theta_f: dict[str, Tensor], cfg: BackboneConfig) -> Tensor:
    """Extractor output F_e of shape N × feature_dim."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    if h.data.ndim != 4 or h.shape[1:] != (3, cfg.input_size, cfg.input_size):
        raise ad.DimensionError(f"expected input N×3×{cfg.input_size}×{cfg.input_size}, got {h.shape}")
    for i, (_, stride) in enumerate(cfg.blocks):
        h = ad.conv2d(h, theta_f[f"f.conv{i}.w"], stride=stride, padding=1)
        h = ad.relu(ad.add_channel_bias(h, theta_f[f"f.conv{i}.b"]))
    h = ad.global_avg_pool(h)
    return ad.relu(ad.dense(h, theta_f["f.fc.w"], theta_f["f.fc.b"]))


def melanoma_head(features: Tensor, theta_m: dict[str, Tensor]) -> Tensor:
    return ad.softmax(ad.dense(features, theta_m["m.w"], theta_m["m.b"]))


def hair_head(features: Tensor, theta_h: dict[str, Tensor], lam: float, reverse: bool = True) -> Tensor:
    """Hair probabilities behind a gradient reversal node of weight ``lam``.

    ``reverse=False`` drops the reversal node; only gradient checks use it.
    """
    f = ad.grad_reverse(features, lam) if reverse else features
    return ad.softmax(ad.dense(f, theta_h["h.w"], theta_h["h.b"]))


@dataclass
class BatchLosses:
    features: Tensor
    melanoma: Tensor
    hair: Tensor | None


def batch_losses(
    x: np.ndarray,
    y: np.ndarray,
    y_hair: np.ndarray,
    hair_rows: np.ndarray,
    groups: ParamGroups,
    cfg: BackboneConfig,
    reverse: bool = True,
) -> BatchLosses:
    """Melanoma loss on every row; hair loss only on ``hair_rows`` (None if empty)."""
    feats = forward_features(x, groups.theta_f, cfg)
    l_m = ad.cross_entropy(melanoma_head(feats, groups.theta_m), ad.one_hot(y, dtype=cfg.dtype))
    l_h = None
    if cfg.ihd and len(hair_rows):
        sub = ad.select_rows(feats, hair_rows)
        probs = hair_head(sub, groups.theta_h, cfg.lam, reverse=reverse)
        l_h = ad.cross_entropy(probs, ad.one_hot(y_hair[hair_rows], dtype=cfg.dtype))
    return BatchLosses(feats, l_m, l_h)


def _grads_of(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    ad.zero_grad(params.values())
    ad.backward(loss)
    return {k: p.grad for k, p in params.items() if p.grad is not None}


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochLog:
    epoch: int
    melanoma_loss: float
    hair_loss: float
    total_loss: float


@dataclass
class TrainResult:
    groups: ParamGroups
    log: list[EpochLog] = field(default_factory=list)


def train(dataset: Dataset, cfg: BackboneConfig, groups: ParamGroups | None = None) -> TrainResult:
    """Joint training of the melanoma objective and the reversed hair objective.

    Each batch runs one backward pass per loss and hands both gradient maps
    to :func:`joint_step`.  Samples generated by the GAN carry no hair label
    and are left out of the hair loss.
    """
    groups = groups or init_params(cfg)
    x_all = prepare_images(dataset.images(), cfg)
    y_all = dataset.melanoma
    h_all = dataset.hair
    has_hair_label = np.array([s != "synthetic_gan" for s in dataset.sources], dtype=bool)
    n = len(dataset)
    params = groups.all_params()
    result = TrainResult(groups)
    train_hair = cfg.ihd and cfg.lam > 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 100, epoch]).permutation(n)
        sums = np.zeros(2)
        weights = np.zeros(2)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            hair_rows = np.flatnonzero(has_hair_label[idx])
            losses = batch_losses(x_all[idx], y_all[idx], h_all[idx], hair_rows, groups, cfg)
            lm = losses.melanoma.item()
            lh = losses.hair.item() if losses.hair is not None else 0.0
            if not (math.isfinite(lm) and math.isfinite(lh)):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {b}")
            sums += (lm * idx.size, lh * hair_rows.size)
            weights += (idx.size, hair_rows.size)
            grads_m = _grads_of(losses.melanoma, params)
            grads_h = _grads_of(losses.hair, params) if (train_hair and losses.hair is not None) else None
            joint_step(groups, grads_m, grads_h, cfg.lam if cfg.ihd else 0.0)
        lm_mean = sums[0] / max(weights[0], 1)
        lh_mean = sums[1] / weights[1] if weights[1] else 0.0
        result.log.append(EpochLog(epoch, lm_mean, lh_mean, lm_mean + cfg.lam * lh_mean))
    return result


def melanoma_probs(x: np.ndarray, groups: ParamGroups, cfg: BackboneConfig) -> np.ndarray:
    return melanoma_head(forward_features(x, groups.theta_f, cfg), groups.theta_m).data


def predict_proba(images: np.ndarray, groups: ParamGroups, cfg: BackboneConfig, chunk: int = 256) -> np.ndarray:
    """p(melanoma = 1) for each H×W×3 image."""
    x = prepare_images(images, cfg)
    out = [melanoma_probs(x[i:i + chunk], groups, cfg)[:, 1] for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0)
