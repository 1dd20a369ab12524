"""Empirical privacy audit: kNN entropy, mutual information, PCA reduction.

Entropies use the classical Kozachenko-Leonenko k-th neighbor estimator in
nats; mutual information combines entropy terms (three-term for continuous
labels, class-conditional decomposition for binary labels).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .errors import DegenerateSample, ValidationError

JITTER_SCALE = 1e-12
JITTER_SEED = 20090930  # fixed so estimates are deterministic


@dataclass(frozen=True)
class EntropyEstimate:
    nats: float
    n: int
    k_nn: int
    dim: int
    jitter_applied: bool = False


@dataclass(frozen=True)
class MiEstimate:
    nats: float
    method: str  # "continuous" | "categorical"
    components: dict = field(default_factory=dict)


def _kth_distances(samples: np.ndarray, k_nn: int) -> np.ndarray:
    tree = cKDTree(samples)
    dists, _ = tree.query(samples, k=k_nn + 1)
    return dists[:, k_nn]


def knn_entropy(samples: np.ndarray, k_nn: int = 3) -> EntropyEstimate:
    """Kozachenko-Leonenko estimate psi(n) - psi(k) + ln V_m + (m/n) sum ln eps_i.

    Coincident points are separated by a deterministic jitter at 1e-12 of the
    data scale; if more than 10% of the k-th neighbor distances remain zero the
    sample is reported as degenerate.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, m = samples.shape
    if n < k_nn + 1:
        raise ValidationError(f"need at least k_nn+1={k_nn + 1} samples, got {n}")
    if not np.all(np.isfinite(samples)):
        raise ValidationError("samples contain non-finite values")

    eps = _kth_distances(samples, k_nn)
    jitter_applied = False
    if np.any(eps == 0.0):
        scale = float(samples.std())
        rng = np.random.default_rng(JITTER_SEED)
        samples = samples + JITTER_SCALE * scale * rng.standard_normal(samples.shape)
        eps = _kth_distances(samples, k_nn)
        jitter_applied = True
        if np.mean(eps == 0.0) > 0.10:
            raise DegenerateSample(
                f"{np.mean(eps == 0.0):.0%} of k-th neighbor distances are zero after jitter"
            )
    positive = eps > 0.0
    # A handful of residual exact ties (<=10%) are dropped from the log-mean.
    log_ball = (m / 2.0) * np.log(np.pi) - gammaln(m / 2.0 + 1.0)
    nats = (
        float(digamma(n) - digamma(k_nn))
        + float(log_ball)
        + m * float(np.mean(np.log(eps[positive])))
    )
    return EntropyEstimate(nats=nats, n=n, k_nn=k_nn, dim=m, jitter_applied=jitter_applied)


def mi_continuous(x: np.ndarray, y: np.ndarray, k_nn: int = 3) -> MiEstimate:
    """I(X;Y) = H(X) + H(Y) - H(X,Y), joint via column concatenation."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValidationError("sample counts differ")
    h_x = knn_entropy(x, k_nn)
    h_y = knn_entropy(y, k_nn)
    h_xy = knn_entropy(np.column_stack([x, y]), k_nn)
    nats = h_x.nats + h_y.nats - h_xy.nats
    return MiEstimate(
        nats=nats,
        method="continuous",
        components={"h_x": h_x.nats, "h_y": h_y.nats, "h_xy": h_xy.nats},
    )


def mi_categorical(x: np.ndarray, y: np.ndarray, k_nn: int = 3) -> MiEstimate:
    """I(X;Y) = H(X) - sum_c p(c) H(X | Y=c) with sample-frequency priors."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).ravel()
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != y.shape[0]:
        raise ValidationError("sample counts differ")
    if not np.all(np.isin(y, (-1, 1))):
        raise ValidationError("binary labels must take values in {-1, +1}")

    h_x = knn_entropy(x, k_nn)
    components: dict = {"h_x": h_x.nats}
    conditional = 0.0
    for cls in (-1, 1):
        mask = y == cls
        count = int(mask.sum())
        prior = count / len(y)
        components[f"p_{cls:+d}"] = prior
        if count == 0:
            components[f"h_x_given_{cls:+d}"] = None
            continue
        if count < k_nn + 1:
            raise ValidationError(
                f"class {cls:+d} has {count} samples, fewer than k_nn+1={k_nn + 1}"
            )
        h_c = knn_entropy(x[mask], k_nn)
        components[f"h_x_given_{cls:+d}"] = h_c.nats
        conditional += prior * h_c.nats
    return MiEstimate(nats=h_x.nats - conditional, method="categorical", components=components)


def pca_project(x: np.ndarray, d: int) -> tuple[np.ndarray, float]:
    """Centered PCA onto the top-d components; returns explained variance fraction."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    if d > p:
        raise ValidationError(f"cannot project {p}-dimensional data onto d={d} components")
    if d < 1:
        raise ValidationError("d must be >= 1")
    centered = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float(np.sum(s**2))
    explained = float(np.sum(s[:d] ** 2)) / total if total > 0 else 1.0
    return centered @ vt[:d].T, explained


def _standardize_columns(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    sd = a.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (a - a.mean(axis=0)) / sd


def audit_mi(
    x: np.ndarray,
    y: np.ndarray,
    label_kind: str,
    k_nn: int = 3,
    pca_dim: int = 16,
) -> MiEstimate:
    """MI between features and labels for the privacy audit.

    Features are PCA-reduced to at most ``pca_dim`` dimensions and, further,
    to their numerical rank: released matrices are often rank-deficient, and
    neighbor-distance entropies are ill-posed on degenerate dimensions.
    Mutual information is invariant to per-coordinate affine maps, so both
    sides are standardized to keep the neighbor metric commensurate.
    """
    x = np.asarray(x, dtype=float)
    centered = x - x.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    num_rank = max(1, int(np.sum(sv > 1e-8 * sv[0]))) if sv.size and sv[0] > 0 else 1
    d = min(pca_dim, num_rank, x.shape[1])
    if d < x.shape[1]:
        x, _ = pca_project(x, d)
    x = _standardize_columns(x)
    if label_kind == "continuous":
        return mi_continuous(x, _standardize_columns(y), k_nn)
    if label_kind == "binary":
        return mi_categorical(x, y, k_nn)
    raise ValidationError(f"unknown label kind {label_kind!r}")
