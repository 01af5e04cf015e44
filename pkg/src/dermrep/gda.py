"""GAN-based augmentation: a small DCGAN trained with the Wasserstein loss.

Generator (``img_size = 4 * 2**B``)::

    z -> dense(c0*4*4) -> BN -> relu -> reshape(c0, 4, 4)
      -> B x [convT 4x4 stride 2 -> BN -> relu]   (last block: bias, tanh, 3 channels)

with channel widths ``c_i = width * 2**(B-1-i)`` for the hidden blocks.
The critic mirrors it with stride-2 4x4 convolutions + leaky relu and a
single linear score.  Parameter counts are given by
:func:`generator_param_count` and :func:`critic_param_count`.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .model import DivergenceError
from .optim import RMSpropState, rmsprop_step
from .preprocess import resize
from .synthdata import ConfigError, Dataset, LabeledSample


class DiversityError(RuntimeError):
    pass


@dataclass
class GanConfig:
    z_dim: int = 64
    img_size: int = 32
    width: int = 16
    lr: float = 0.0002
    rho: float = 0.9
    critic_steps_per_gen: int = 5
    clip_c: float = 0.01
    epochs: int = 50
    batch_size: int = 16
    iters_per_epoch: int = 0
    seed: int = 0
    mse_floor: float = -1.0
    retry_factor: int = 20

    def __post_init__(self):
        n = self.img_size
        if n < 32 or n & (n - 1):
            raise ConfigError(f"img_size must be a power of two >= 32, got {n}")

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.img_size // 4))

    def generator_widths(self) -> list[int]:
        b = self.n_blocks
        return [self.width * 2 ** (b - 1 - i) for i in range(b)] + [3]

    def critic_widths(self) -> list[int]:
        return [3] + [self.width * 2 ** i for i in range(self.n_blocks)]

    def to_dict(self) -> dict:
        return asdict(self)


def generator_param_count(cfg: GanConfig) -> int:
    c = cfg.generator_widths()
    count = cfg.z_dim * c[0] * 16 + c[0] * 16 + 2 * c[0]
    for i in range(1, len(c)):
        count += 16 * c[i - 1] * c[i]
        count += 2 * c[i] if i < len(c) - 1 else c[i]
    return count


def critic_param_count(cfg: GanConfig) -> int:
    c = cfg.critic_widths()
    count = sum(16 * c[i - 1] * c[i] + c[i] for i in range(1, len(c)))
    return count + c[-1] * 16 + 1


@dataclass
class GanPair:
    cfg: GanConfig
    generator: dict[str, Tensor]
    critic: dict[str, Tensor]
    bn: list[BatchNormState]
    history: list[dict] = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in {**self.generator, **self.critic}.items()}
        for i, s in enumerate(self.bn):
            out[f"bn{i}.mean"] = s.running_mean
            out[f"bn{i}.var"] = s.running_var
        return out


def _param(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def build_generator(cfg: GanConfig, rng: np.random.Generator | None = None) -> tuple[dict[str, Tensor], list[BatchNormState]]:
    rng = rng or np.random.default_rng([cfg.seed, 21])
    c = cfg.generator_widths()
    p = {
        "g.fc.w": _param(rng.normal(0, 0.02, (c[0] * 16, cfg.z_dim))),
        "g.fc.b": _param(np.zeros(c[0] * 16)),
        "g.bn0.gamma": _param(1 + rng.normal(0, 0.02, c[0])),
        "g.bn0.beta": _param(np.zeros(c[0])),
    }
    bn = [BatchNormState.fresh(c[0])]
    for i in range(1, len(c)):
        p[f"g.up{i}.w"] = _param(rng.normal(0, 0.02, (c[i - 1], c[i], 4, 4)))
        if i < len(c) - 1:
            p[f"g.bn{i}.gamma"] = _param(1 + rng.normal(0, 0.02, c[i]))
            p[f"g.bn{i}.beta"] = _param(np.zeros(c[i]))
            bn.append(BatchNormState.fresh(c[i]))
        else:
            p[f"g.up{i}.b"] = _param(np.zeros(c[i]))
    return p, bn


def build_discriminator(cfg: GanConfig, rng: np.random.Generator | None = None) -> dict[str, Tensor]:
    rng = rng or np.random.default_rng([cfg.seed, 22])
    c = cfg.critic_widths()
    p = {}
    for i in range(1, len(c)):
        p[f"d.conv{i}.w"] = _param(rng.normal(0, 0.02, (c[i], c[i - 1], 4, 4)))
        p[f"d.conv{i}.b"] = _param(np.zeros(c[i]))
    p["d.fc.w"] = _param(rng.normal(0, 0.02, (1, c[-1] * 16)))
    p["d.fc.b"] = _param(np.zeros(1))
    return p


def generate(z: np.ndarray, params: dict[str, Tensor], bn: list[BatchNormState], cfg: GanConfig, mode: str = "train") -> Tensor:
    """Generator forward pass; output N×3×S×S in [-1, 1]."""
    c = cfg.generator_widths()
    h = ad.dense(Tensor(z), params["g.fc.w"], params["g.fc.b"])
    h = ad.reshape(h, (z.shape[0], c[0], 4, 4))
    h = ad.relu(ad.batch_norm(h, params["g.bn0.gamma"], params["g.bn0.beta"], bn[0], mode))
    for i in range(1, len(c)):
        h = ad.conv_transpose2d(h, params[f"g.up{i}.w"], stride=2, padding=1)
        if i < len(c) - 1:
            h = ad.relu(ad.batch_norm(h, params[f"g.bn{i}.gamma"], params[f"g.bn{i}.beta"], bn[i], mode))
        else:
            h = ad.tanh(ad.add_channel_bias(h, params[f"g.up{i}.b"]))
    return h


def critic_score(x: Tensor, params: dict[str, Tensor], cfg: GanConfig) -> Tensor:
    """Unbounded Wasserstein critic score, shape N×1."""
    h = x
    for i in range(1, cfg.n_blocks + 1):
        h = ad.conv2d(h, params[f"d.conv{i}.w"], stride=2, padding=1)
        h = ad.leaky_relu(ad.add_channel_bias(h, params[f"d.conv{i}.b"]), 0.2)
    return ad.dense(ad.flatten(h), params["d.fc.w"], params["d.fc.b"])


def clip_weights(params: dict[str, Tensor], c: float) -> None:
    for t in params.values():
        np.clip(t.data, -c, c, out=t.data)


def to_gan_range(images: np.ndarray, size: int) -> np.ndarray:
    """H×W×3 images in [0,1] -> N×3×S×S in [-1,1]."""
    out = [img if img.shape[:2] == (size, size) else resize(img, size, size) for img in images]
    return np.stack(out).transpose(0, 3, 1, 2) * 2.0 - 1.0


def from_gan_range(x: np.ndarray) -> np.ndarray:
    return np.clip((x.transpose(0, 2, 3, 1) + 1.0) / 2.0, 0.0, 1.0)


def _grads(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    ad.zero_grad(params.values())
    ad.backward(loss)
    return {k: p.grad for k, p in params.items() if p.grad is not None}


def train_dcgan(positives: Dataset, cfg: GanConfig, record_samples: int = 0) -> GanPair:
    """Alternate critic and generator RMSprop updates on the Wasserstein losses.

    Every generator update is preceded by ``critic_steps_per_gen`` critic
    updates, each followed by clipping the critic weights to ``[-clip_c,
    clip_c]``.  ``history`` holds per-epoch mean losses and, when
    ``record_samples`` > 0, the mean colour of that many eval-mode samples
    drawn from a fixed noise batch.
    """
    if len(positives) == 0:
        raise ValueError("train_dcgan needs at least one positive image")
    if np.any(positives.melanoma != 1):
        raise ValueError("train_dcgan expects melanoma-positive images only")
    real = to_gan_range(positives.images(), cfg.img_size)
    gen, bn = build_generator(cfg)
    critic = build_discriminator(cfg)
    pair = GanPair(cfg, gen, critic, bn)
    rng = np.random.default_rng([cfg.seed, 20])
    probe_z = np.random.default_rng([cfg.seed, 23]).normal(size=(max(record_samples, 2), cfg.z_dim))
    g_state = RMSpropState(eta=cfg.lr, rho=cfg.rho)
    d_state = RMSpropState(eta=cfg.lr, rho=cfg.rho)
    bs = cfg.batch_size
    iters = cfg.iters_per_epoch or max(1, math.ceil(len(positives) / bs))
    for epoch in range(cfg.epochs):
        d_losses, g_losses = [], []
        for _ in range(iters):
            for _ in range(cfg.critic_steps_per_gen):
                batch = Tensor(real[rng.integers(0, len(real), bs)])
                fake = Tensor(generate(rng.normal(size=(bs, cfg.z_dim)), gen, bn, cfg).data)
                d_loss, _ = ad.wgan_losses(critic_score(batch, critic, cfg), critic_score(fake, critic, cfg))
                rmsprop_step(critic, _grads(d_loss, critic), d_state)
                clip_weights(critic, cfg.clip_c)
                d_losses.append(d_loss.item())
            fake = generate(rng.normal(size=(bs, cfg.z_dim)), gen, bn, cfg)
            fake_scores = critic_score(fake, critic, cfg)
            _, g_loss = ad.wgan_losses(fake_scores, fake_scores)
            rmsprop_step(gen, _grads(g_loss, gen), g_state)
            g_losses.append(g_loss.item())
        entry = {"epoch": epoch, "critic_loss": float(np.mean(d_losses)), "generator_loss": float(np.mean(g_losses))}
        if not (math.isfinite(entry["critic_loss"]) and math.isfinite(entry["generator_loss"])):
            raise DivergenceError(f"GAN losses became non-finite at epoch {epoch}")
        if record_samples:
            imgs = from_gan_range(generate(probe_z, gen, bn, cfg, mode="eval").data)
            entry["sample_mean_color"] = imgs.mean(axis=(0, 1, 2)).tolist()
        pair.history.append(entry)
    return pair


def sample_images(pair: GanPair, n: int, rng: np.random.Generator, batch: int = 64) -> np.ndarray:
    """``n`` generated images as H×W×3 arrays in [0, 1] (eval-mode batch norm)."""
    out = []
    for start in range(0, n, batch):
        z = rng.normal(size=(min(batch, n - start), pair.cfg.z_dim))
        out.append(from_gan_range(generate(z, pair.generator, pair.bn, pair.cfg, mode="eval").data))
    size = pair.cfg.img_size
    return np.concatenate(out) if out else np.zeros((0, size, size, 3))


def _stack(train) -> np.ndarray:
    return train.images() if isinstance(train, Dataset) else np.asarray(train, dtype=np.float64)


def nearest_train_mse(image: np.ndarray, train) -> tuple[int, float]:
    """Index and value of the smallest per-pixel MSE between ``image`` and any training image."""
    ref = _stack(train)
    if len(ref) == 0:
        raise ValueError("training set is empty")
    if ref.shape[1:] != np.shape(image):
        raise ValueError(f"shape mismatch: image {np.shape(image)} vs training images {ref.shape[1:]}")
    d = ((ref - image[None]) ** 2).reshape(len(ref), -1).mean(axis=1)
    i = int(np.argmin(d))
    return i, float(d[i])


def calibrate_mse_floor(train, percentile: float = 1.0) -> float:
    """Given percentile of pairwise MSEs between training images (0 if fewer than 2)."""
    ref = _stack(train).reshape(len(_stack(train)), -1)
    if len(ref) < 2:
        return 0.0
    sq = (ref ** 2).sum(axis=1)
    d = (sq[:, None] + sq[None, :] - 2 * ref @ ref.T) / ref.shape[1]
    iu = np.triu_indices(len(ref), k=1)
    return float(np.percentile(np.maximum(d[iu], 0.0), percentile))


def sample_synthetic(
    pair: GanPair,
    n: int,
    train,
    mse_floor: float,
    rng: np.random.Generator,
    retry_factor: int | None = None,
    id_prefix: str = "gan",
) -> list[LabeledSample]:
    """Draw generated positives, rejecting any closer than ``mse_floor`` to a training image.

    Candidates are resized to the training resolution before the check, so
    emitted samples can join the training set directly.

    Candidates are drawn until ``n`` survive or ``retry_factor * n`` have
    been tried, in which case DiversityError reports the acceptance rate.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return []
    ref = _stack(train)
    h, w = ref.shape[1:3]
    budget = max(n, (retry_factor or pair.cfg.retry_factor) * n)
    kept: list[LabeledSample] = []
    tried = 0
    while len(kept) < n and tried < budget:
        cand = sample_images(pair, min(64, budget - tried), rng)
        for img in cand:
            tried += 1
            if img.shape[:2] != (h, w):
                img = resize(img, h, w)
            _, err = nearest_train_mse(img, ref)
            if err >= mse_floor:
                kept.append(LabeledSample(img, 1, 0, "synthetic_gan", f"{id_prefix}_{len(kept):05d}", "train"))
                if len(kept) == n:
                    break
    if len(kept) < n:
        raise DiversityError(
            f"only {len(kept)} of {n} candidates passed the MSE floor {mse_floor:.3g} "
            f"after {tried} draws (acceptance rate {len(kept) / max(tried, 1):.3f})"
        )
    return kept


def save_gan(path, pair: GanPair, extra: dict | None = None) -> None:
    save_checkpoint(path, pair.arrays(), {"kind": "gan", "config": pair.cfg.to_dict(), "history": pair.history, **(extra or {})})


def load_gan(path) -> GanPair:
    arrays, meta = load_checkpoint(path)
    cfg = GanConfig(**meta["config"])
    gen, bn = build_generator(cfg)
    critic = build_discriminator(cfg)
    for k, t in {**gen, **critic}.items():
        t.data = arrays[k]
    for i, s in enumerate(bn):
        s.running_mean[:] = arrays[f"bn{i}.mean"]
        s.running_var[:] = arrays[f"bn{i}.var"]
    return GanPair(cfg, gen, critic, bn, meta.get("history", []))
