"""Synthetic data generators, normalization, and train/test batching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


@dataclass(frozen=True)
class NormalizationRecord:
    """Per-column min/max captured by :func:`minmax_normalize`."""

    col_min: np.ndarray
    col_max: np.ndarray


def minmax_normalize(x: np.ndarray) -> tuple[np.ndarray, NormalizationRecord]:
    """Affinely map every column to [0, 1]; constant columns map to 0."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValidationError("expected a 2-D feature matrix")
    if not np.all(np.isfinite(x)):
        raise ValidationError("feature matrix contains non-finite entries")
    col_min = x.min(axis=0)
    col_max = x.max(axis=0)
    span = col_max - col_min
    out = np.zeros_like(x)
    live = span > 0
    out[:, live] = (x[:, live] - col_min[live]) / span[live]
    return out, NormalizationRecord(col_min=col_min, col_max=col_max)


def minmax_denormalize(x_norm: np.ndarray, record: NormalizationRecord) -> np.ndarray:
    """Invert :func:`minmax_normalize` (constant columns recover their min)."""
    span = record.col_max - record.col_min
    return np.asarray(x_norm, dtype=float) * span + record.col_min


@dataclass
class LinearGaussianData:
    """Planted linear-regression dataset with min-max normalized features."""

    x: np.ndarray          # (n, p) normalized to [0, 1]
    y: np.ndarray          # (n, d) continuous private labels
    x_raw: np.ndarray      # pre-normalization draws; Y = x_raw @ theta_star + noise
    theta_star: np.ndarray
    noise_std: float
    norm: NormalizationRecord


def gen_linear_gaussian(
    n: int, p: int, d: int = 1, noise_std: float = 0.1, seed: int = 0
) -> LinearGaussianData:
    """Standard-normal features, linear continuous labels, seeded."""
    if not (n > p >= d >= 1):
        raise ValidationError(f"need n > p >= d >= 1, got n={n}, p={p}, d={d}")
    if noise_std < 0:
        raise ValidationError("noise_std must be nonnegative")
    rng = np.random.default_rng(seed)
    x_raw = rng.standard_normal((n, p))
    theta_star = rng.standard_normal((p, d))
    noise = noise_std * rng.standard_normal((n, d))
    y = x_raw @ theta_star + noise
    x, norm = minmax_normalize(x_raw)
    return LinearGaussianData(x=x, y=y, x_raw=x_raw, theta_star=theta_star,
                              noise_std=float(noise_std), norm=norm)


@dataclass
class LogisticPlantedData:
    """Planted binary-label dataset: P(y=+1 | x) = sigmoid(signal * theta.x)."""

    x: np.ndarray          # (n, p) normalized to [0, 1]
    y: np.ndarray          # (n,) labels in {-1, +1}
    x_raw: np.ndarray
    theta_star: np.ndarray  # unit norm
    signal_strength: float
    norm: NormalizationRecord


def gen_logistic_planted(
    n: int, p: int, signal_strength: float = 5.0, seed: int = 0
) -> LogisticPlantedData:
    if n < 20:
        raise ValidationError("need at least 20 samples")
    if p < 1:
        raise ValidationError("need at least one feature")
    if signal_strength < 0:
        raise ValidationError("signal_strength must be nonnegative")
    rng = np.random.default_rng(seed)
    x_raw = rng.standard_normal((n, p))
    theta_star = rng.standard_normal(p)
    theta_star /= np.linalg.norm(theta_star)
    prob_plus = 1.0 / (1.0 + np.exp(-signal_strength * (x_raw @ theta_star)))
    y = np.where(rng.random(n) < prob_plus, 1, -1).astype(int)
    x, norm = minmax_normalize(x_raw)
    return LogisticPlantedData(x=x, y=y, x_raw=x_raw, theta_star=theta_star,
                               signal_strength=float(signal_strength), norm=norm)


@dataclass
class BlockImageData:
    """Flattened noise "images" whose label is the sign of a block-mean bump."""

    x: np.ndarray          # (n, side*side) pixels in [0, 1]
    y: np.ndarray          # (n,) labels in {-1, +1}
    block_index: np.ndarray  # flat pixel indices of the labeled block
    side: int


def gen_block_images(
    n: int,
    side: int = 8,
    block_origin: tuple[int, int] = (3, 3),
    block_size: int = 2,
    pixel_noise: float = 0.15,
    label_noise: float = 0.03,
    seed: int = 0,
) -> BlockImageData:
    """Label = sign of (block mean - 0.5 + noise); pixels clipped to [0, 1]."""
    if block_origin[0] + block_size > side or block_origin[1] + block_size > side:
        raise ValidationError("block does not fit inside the image")
    rng = np.random.default_rng(seed)
    x = np.clip(0.5 + pixel_noise * rng.standard_normal((n, side * side)), 0.0, 1.0)
    rows = np.arange(block_origin[0], block_origin[0] + block_size)
    cols = np.arange(block_origin[1], block_origin[1] + block_size)
    block = (rows[:, None] * side + cols[None, :]).ravel()
    score = x[:, block].mean(axis=1) - 0.5 + label_noise * rng.standard_normal(n)
    y = np.where(score >= 0, 1, -1).astype(int)
    return BlockImageData(x=x, y=y, block_index=block, side=side)


@dataclass
class SplitBatches:
    """Disjoint train/test index split plus a batch partition of train."""

    train_indices: np.ndarray
    test_indices: np.ndarray
    batches: list[np.ndarray] = field(default_factory=list)


def split_and_batch(
    x: np.ndarray,
    y: np.ndarray,
    train_fraction: float = 0.8,
    batch_size: int | None = None,
    seed: int = 0,
) -> SplitBatches:
    """Seeded shuffle into train/test, then chunk train into solver batches.

    ``batch_size=None`` keeps all of train as one batch. For the linear-family
    mechanisms every batch must have more rows than features, so a trailing
    chunk of ``<= p`` rows is merged into its predecessor and ``batch_size <= p``
    is rejected outright.
    """
    x = np.asarray(x)
    n, p = x.shape
    if len(np.asarray(y)) != n:
        raise ValidationError("features and labels disagree on sample count")
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError("train_fraction must lie strictly between 0 and 1")
    if batch_size is not None and batch_size <= p:
        raise ValidationError(
            f"batch_size={batch_size} must exceed the feature count p={p} "
            "for the linear mechanisms"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train = np.sort(order[:n_train])
    test = np.sort(order[n_train:])

    shuffled_train = rng.permutation(train)
    if batch_size is None or batch_size >= n_train:
        batches = [shuffled_train.copy()] if n_train else []
    else:
        batches = [shuffled_train[i:i + batch_size] for i in range(0, n_train, batch_size)]
        if len(batches) > 1 and len(batches[-1]) <= p:
            batches[-2] = np.concatenate([batches[-2], batches[-1]])
            batches.pop()
    return SplitBatches(train_indices=train, test_indices=test, batches=batches)
