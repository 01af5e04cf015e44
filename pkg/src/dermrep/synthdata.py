"""Toy lesion images, hair-arc noise, confounded datasets, folds and manifests."""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import zoom

SOURCES = ("real", "synthetic_gan", "synthetic_toy")
MANIFEST_HEADER = ["path", "melanoma", "hair", "split"]


class ConfigError(ValueError):
    pass


class StratificationError(ValueError):
    pass


class IngestionError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LabeledSample:
    image: np.ndarray
    melanoma: int
    hair: int
    source: str = "real"
    id: str = ""
    split: str = "train"

    def __post_init__(self):
        if self.melanoma not in (0, 1) or self.hair not in (0, 1):
            raise ValueError(f"labels must be binary, got melanoma={self.melanoma} hair={self.hair}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class Dataset:
    samples: list[LabeledSample] = field(default_factory=list)

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique within a dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, idx: Iterable[int]) -> "Dataset":
        return Dataset([self.samples[i] for i in idx])

    def __add__(self, other: "Dataset") -> "Dataset":
        return Dataset(self.samples + other.samples)

    def images(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, 0, 0, 3))
        return np.stack([s.image for s in self.samples])

    @property
    def melanoma(self) -> np.ndarray:
        return np.array([s.melanoma for s in self.samples], dtype=int)

    @property
    def hair(self) -> np.ndarray:
        return np.array([s.hair for s in self.samples], dtype=int)

    @property
    def sources(self) -> list[str]:
        return [s.source for s in self.samples]


def sample_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent stream for one sample, derived from the global seed."""
    return np.random.default_rng([seed, *keys])


# ---------------------------------------------------------------------------
# lesion rendering


@dataclass(frozen=True)
class LesionStyle:
    """Class-conditional ranges for the toy lesion generator.

    Irregularity is the relative amplitude of the harmonic border
    perturbation; darkness is subtracted from the skin tone inside the
    lesion; mottling is the amplitude of the interior texture.
    """

    irregularity: tuple[tuple[float, float], tuple[float, float]] = ((0.02, 0.08), (0.12, 0.25))
    darkness: tuple[tuple[float, float], tuple[float, float]] = ((0.30, 0.45), (0.40, 0.55))
    mottling: tuple[tuple[float, float], tuple[float, float]] = ((0.00, 0.04), (0.06, 0.14))
    radius: tuple[float, float] = (0.18, 0.30)


@dataclass(frozen=True)
class LesionParams:
    cls: int
    center: tuple[float, float]
    radius: float
    aspect: float
    angle: float
    irregularity: float
    harmonics: tuple[tuple[int, float, float], ...]
    darkness: float
    mottling: float
    skin: tuple[float, float, float]
    lesion_tint: tuple[float, float, float]
    texture_seed: int


def sample_lesion_params(cls: int, rng: np.random.Generator, style: LesionStyle = LesionStyle()) -> LesionParams:
    if cls not in (0, 1):
        raise ValueError(f"class must be 0 or 1, got {cls}")
    irr = rng.uniform(*style.irregularity[cls])
    n_harm = 3
    weights = rng.dirichlet(np.ones(n_harm))
    harmonics = tuple(
        (int(k), float(w), float(ph))
        for k, w, ph in zip(rng.choice(np.arange(3, 9), n_harm, replace=False), weights, rng.uniform(0, 2 * np.pi, n_harm))
    )
    skin = np.array([0.86, 0.66, 0.56]) + rng.normal(0, 0.03, 3)
    tint = np.array([0.45, 0.30, 0.22]) + rng.normal(0, 0.03, 3)
    return LesionParams(
        cls=cls,
        center=tuple(rng.uniform(0.4, 0.6, 2)),
        radius=float(rng.uniform(*style.radius)),
        aspect=float(rng.uniform(0.75, 1.0)),
        angle=float(rng.uniform(0, np.pi)),
        irregularity=float(irr),
        harmonics=harmonics,
        darkness=float(rng.uniform(*style.darkness[cls])),
        mottling=float(rng.uniform(*style.mottling[cls])),
        skin=tuple(np.clip(skin, 0, 1)),
        lesion_tint=tuple(np.clip(tint, 0, 1)),
        texture_seed=int(rng.integers(2**31)),
    )


def render_lesion(params: LesionParams, size: int) -> np.ndarray:
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size
    dx = xx - params.center[0]
    dy = yy - params.center[1]
    ca, sa = math.cos(params.angle), math.sin(params.angle)
    u = ca * dx + sa * dy
    v = (-sa * dx + ca * dy) / params.aspect
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    wobble = sum(w * np.sin(k * theta + ph) for k, w, ph in params.harmonics)
    border = params.radius * (1.0 + params.irregularity * wobble)
    # soft edge one pixel wide
    inside = np.clip((border - rho) * size + 0.5, 0.0, 1.0)

    trng = np.random.default_rng(params.texture_seed)
    coarse = trng.normal(0, 1, (8, 8))
    texture = zoom(coarse, size / 8, order=1)[:size, :size]
    texture = texture / (np.abs(texture).max() + 1e-12)

    skin = np.array(params.skin)
    tint = np.array(params.lesion_tint)
    grain = trng.normal(0, 0.01, (size, size, 1))
    depth = params.darkness + params.mottling * texture
    lesion = skin * (1.0 - depth[..., None]) * 0.6 + tint * 0.4 * (1.0 - depth[..., None])
    img = skin[None, None, :] * (1 - inside[..., None]) + lesion * inside[..., None] + grain
    return np.clip(img, 0.0, 1.0)


def gen_lesion_image(cls: int, size: int, rng: np.random.Generator, style: LesionStyle = LesionStyle()) -> np.ndarray:
    """Skin-toned background with one elliptical lesion.

    Class 1 lesions have larger border irregularity, darker and more
    heterogeneous interiors than class 0 lesions.
    """
    if size < 16:
        raise ValueError(f"image size must be >= 16, got {size}")
    return render_lesion(sample_lesion_params(cls, rng, style), size)


# ---------------------------------------------------------------------------
# hair arcs

BLACK_SHADE = 0.05
GRAY_SHADE = 0.45
SHADE_JITTER = 0.05


def add_hair_arcs(image: np.ndarray, n_arcs: int, rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Draw ``n_arcs`` anti-aliased circular arcs (black or gray) over the image.

    Each arc is anchored at a pixel inside the image so at least part of
    it is visible.  Returns the new image and the hair label.
    """
    if n_arcs < 0:
        raise ValueError(f"n_arcs must be >= 0, got {n_arcs}")
    out = np.array(image, dtype=np.float64, copy=True)
    if n_arcs == 0:
        return out, 0
    h, w = out.shape[:2]
    size = max(h, w)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(n_arcs):
        radius = rng.uniform(0.4, 1.5) * size
        span = rng.uniform(0.15, 0.5) * size / radius  # arc length of 15-50% of the image
        anchor = rng.uniform([0, 0], [w, h])
        phi = rng.uniform(0, 2 * np.pi)
        start = phi - rng.uniform(0, span)
        cx = anchor[0] - radius * math.cos(phi)
        cy = anchor[1] - radius * math.sin(phi)
        width = rng.uniform(1.0, 3.0)
        base = BLACK_SHADE if rng.random() < 0.5 else GRAY_SHADE
        shade = np.clip(base + rng.uniform(-SHADE_JITTER, SHADE_JITTER), 0.0, 1.0)

        ddx, ddy = xx - cx, yy - cy
        dist = np.abs(np.hypot(ddx, ddy) - radius)
        ang = np.mod(np.arctan2(ddy, ddx) - start, 2 * np.pi)
        cover = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0) * (ang <= span)
        touched = cover > 0
        out[touched] = out[touched] * (1 - cover[touched, None]) + shade * cover[touched, None]
    return out, 1


# ---------------------------------------------------------------------------
# confounded datasets


@dataclass
class ConfoundConfig:
    n_train: int = 2000
    n_test: int = 1000
    positive_rate: float = 0.5
    rho: float = 0.8
    hair_rate: float = 0.5
    test_positive_rate: float | None = None
    size: int = 64
    max_arcs: int = 6
    seed: int = 0
    style: LesionStyle = field(default_factory=LesionStyle)


def phi_coefficient(a: Sequence[int], b: Sequence[int]) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sa, sb = a.std(), b.std()
    if sa == 0 or sb == 0:
        return 0.0
    return float(((a - a.mean()) * (b - b.mean())).mean() / (sa * sb))


def joint_cell_counts(n: int, p: float, q: float, rho: float) -> dict[tuple[int, int], int]:
    """Cell counts of a 2×2 (melanoma, hair) table with phi close to ``rho``.

    Raises ConfigError when no joint distribution with these marginals
    reaches the requested correlation.
    """
    if not (0 < p < 1 and 0 < q < 1 and -1 <= rho <= 1):
        raise ConfigError(f"need 0<p<1, 0<q<1, -1<=rho<=1; got p={p}, q={q}, rho={rho}")
    p11 = p * q + rho * math.sqrt(p * (1 - p) * q * (1 - q))
    cells = {(1, 1): p11, (1, 0): p - p11, (0, 1): q - p11, (0, 0): 1 - p - q + p11}
    if min(cells.values()) < -1e-12:
        raise ConfigError(f"correlation {rho} infeasible with positive rate {p} and hair rate {q}")
    raw = {k: max(v, 0.0) * n for k, v in cells.items()}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    # largest remainder, ties broken by fixed cell order
    order = sorted(raw, key=lambda k: (-(raw[k] - counts[k]), k))
    for k in order[: n - sum(counts.values())]:
        counts[k] += 1
    return counts


def _draw_split(n, p, q, rho, split, cfg: ConfoundConfig, stream: int) -> list[LabeledSample]:
    counts = joint_cell_counts(n, p, q, rho)
    labels = [cell for cell in sorted(counts) for _ in range(counts[cell])]
    order = np.random.default_rng([cfg.seed, stream]).permutation(len(labels))
    samples = []
    for i, j in enumerate(order):
        mel, hair = labels[j]
        rng = sample_rng(cfg.seed, stream, i)
        img = gen_lesion_image(mel, cfg.size, rng, cfg.style)
        if hair:
            img, _ = add_hair_arcs(img, int(rng.integers(1, cfg.max_arcs + 1)), rng)
        samples.append(LabeledSample(img, mel, hair, "synthetic_toy", f"{split}_{i:05d}", split))
    return samples


def build_confounded_dataset(cfg: ConfoundConfig) -> tuple[Dataset, Dataset]:
    """Train set with hair correlated to melanoma at ``cfg.rho``; test set uncorrelated."""
    if cfg.n_train < 1 or cfg.n_test < 0:
        raise ConfigError("n_train must be >= 1 and n_test >= 0")
    test_p = cfg.positive_rate if cfg.test_positive_rate is None else cfg.test_positive_rate
    train = _draw_split(cfg.n_train, cfg.positive_rate, cfg.hair_rate, cfg.rho, "train", cfg, 1)
    test = _draw_split(cfg.n_test, test_p, cfg.hair_rate, 0.0, "test", cfg, 2) if cfg.n_test else []
    return Dataset(train), Dataset(test)


def enlarge_with_hair(dataset: Dataset, factor: int, seed: int, max_arcs: int = 6) -> Dataset:
    """Grow a dataset ``factor``-fold with hair-augmented copies of every image.

    The originals are kept; each extra copy gets 1..max_arcs random arcs.
    """
    if factor < 1:
        raise ConfigError(f"enlargement factor must be >= 1, got {factor}")
    out = list(dataset.samples)
    for copy in range(1, factor):
        for i, s in enumerate(dataset.samples):
            rng = sample_rng(seed, 3, copy, i)
            img, hair = add_hair_arcs(s.image, int(rng.integers(1, max_arcs + 1)), rng)
            out.append(replace(s, image=img, hair=hair, id=f"{s.id}_h{copy}"))
    return Dataset(out)


# ---------------------------------------------------------------------------
# folds


def stratified_kfold(labels: Sequence[int] | Dataset, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified k-fold split returning ``(train_idx, val_idx)`` pairs.

    Each class is shuffled and dealt round-robin; the dealing offset carries
    over between classes so fold sizes stay balanced too.
    """
    y = labels.melanoma if isinstance(labels, Dataset) else np.asarray(labels, dtype=int)
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        if members.size < k:
            raise StratificationError(f"class {cls} has {members.size} members, fewer than k={k}")
        members = members[rng.permutation(members.size)]
        for j, idx in enumerate(members):
            folds[(offset + j) % k].append(int(idx))
        offset = (offset + members.size) % k
    everything = np.arange(y.size)
    out = []
    for f in folds:
        val = np.sort(np.array(f, dtype=int))
        out.append((np.setdiff1d(everything, val), val))
    return out


# ---------------------------------------------------------------------------
# PNG + manifest IO


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: Path, image: np.ndarray) -> None:
    buf = io.BytesIO()
    Image.fromarray(to_uint8(image), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def sample_relpath(sample: LabeledSample) -> str:
    return f"{sample.source}/{sample.id}.png"


def save_manifest(dataset: Dataset, path: Path, write_images: bool = True) -> None:
    """Write PNGs under ``<manifest dir>/<source>/<id>.png`` and the CSV manifest."""
    path = Path(path)
    root = path.parent
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_HEADER)
    for s in dataset:
        rel = sample_relpath(s)
        if write_images:
            write_png(root / rel, s.image)
        writer.writerow([rel, s.melanoma, s.hair, s.split])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def _parse_binary(value: str, column: str, line: int) -> int:
    if value not in ("0", "1"):
        raise IngestionError(f"{column} must be 0 or 1, got {value!r}", line)
    return int(value)


def load_manifest(path: Path) -> Dataset:
    """Read a ``path,melanoma,hair,split`` CSV; paths are relative to its directory.

    The sample id is the file stem; the source is the first path component
    when it names a known source and ``real`` otherwise.
    """
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest not found: {path}")
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != MANIFEST_HEADER:
        raise IngestionError(f"header must be {','.join(MANIFEST_HEADER)}", 1)
    samples = []
    seen = set()
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise IngestionError(f"expected 4 fields, got {len(row)}", line)
        rel, mel, hair, split = row
        mel_v = _parse_binary(mel, "melanoma", line)
        hair_v = _parse_binary(hair, "hair", line)
        file = root / rel
        if not file.is_file():
            raise IngestionError(f"image file missing: {file}", line)
        try:
            image = read_png(file)
        except Exception as exc:  # PIL raises a zoo of types
            raise IngestionError(f"cannot decode image {file}: {exc}", line) from exc
        parts = Path(rel).parts
        source = parts[0] if len(parts) > 1 and parts[0] in SOURCES else "real"
        sid = Path(rel).stem
        if sid in seen:
            raise IngestionError(f"duplicate sample id {sid!r}", line)
        seen.add(sid)
        samples.append(LabeledSample(image, mel_v, hair_v, source, sid, split))
    return Dataset(samples)
