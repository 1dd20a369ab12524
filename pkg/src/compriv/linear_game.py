"""Continuous-label linear release game.

The holder picks a PSD compression matrix M and releases X~ = X M X^T X. The
least-squares attacker has a closed form, so the holder's problem relaxes to a
semidefinite program with a nuclear-norm (= trace, under PSD) penalty, solved
in the reduced coordinates N = V^T M V of the data's SVD. A multiplicative
search over the trace weight beta targets the desired effective rank.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numopt
from .dataset import SplitBatches
from .errors import (
    InfeasibleDistortion,
    NonConvergence,
    RankNotAttained,
    SingularCompression,
    ValidationError,
)

RANK_CUT_REL = 1e-12  # singular values below this times s_max are treated as zero


@dataclass(frozen=True)
class MomentCache:
    """Sample second moments C_xx = X^T X / n and C_xy = X^T Y / n."""

    c_xx: np.ndarray
    c_xy: np.ndarray
    n: int


@dataclass(frozen=True)
class SvdCache:
    """Thin SVD of X with the numerical-rank cut applied."""

    u: np.ndarray  # (n, r)
    s: np.ndarray  # (r,) descending, strictly positive
    v: np.ndarray  # (p, r)
    r: int

    @classmethod
    def from_matrix(cls, x: np.ndarray) -> "SvdCache":
        x = np.asarray(x, dtype=float)
        u, s, vt = np.linalg.svd(x, full_matrices=False)
        keep = s > RANK_CUT_REL * s[0] if s.size else np.zeros(0, dtype=bool)
        r = int(np.count_nonzero(keep))
        return cls(u=u[:, :r], s=s[:r].copy(), v=vt[:r].T.copy(), r=r)


@dataclass
class ReleaseMap:
    """Solved compression matrix with its achieved distortion bookkeeping."""

    m: np.ndarray
    effective_rank: int
    beta_final: float
    distortion: float
    gamma: float


@dataclass
class LinearGameConfig:
    gamma: float
    k: int
    eta: float = 0.01
    beta0: float = 1e-3
    max_outer: int = 60

    def __post_init__(self):
        if self.gamma < 0:
            raise ValidationError("gamma must be nonnegative")
        if self.k < 1:
            raise ValidationError("target rank k must be >= 1")
        if not 0.0 < self.eta < 1.0:
            raise ValidationError("eta must lie in (0, 1)")
        if not self.beta0 > 0:
            raise ValidationError("beta0 must be positive")


@dataclass(frozen=True)
class NoiseSpec:
    """Covariance of additive Gaussian noise on the compressed code."""

    sigma: np.ndarray

    def __post_init__(self):
        sig = numopt.as_symmetric(self.sigma)
        if np.linalg.eigvalsh(sig).min() < -1e-10:
            raise ValidationError("noise covariance must be PSD")
        object.__setattr__(self, "sigma", sig)


def cross_moments(x: np.ndarray, y: np.ndarray) -> MomentCache:
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 1 and x.shape[0] != 1:
        y = y.T
    if x.shape[0] != y.shape[0]:
        raise ValidationError("feature and label sample counts differ")
    n = x.shape[0]
    return MomentCache(c_xx=(x.T @ x) / n, c_xy=(x.T @ y) / n, n=n)


def _solve_gram(gram: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularCompression(
            f"{what} is numerically singular (condition number {cond:.3g})"
        )
    return np.linalg.solve(gram, rhs)


def attacker_theta(a: np.ndarray, mom: MomentCache) -> np.ndarray:
    """Best linear predictor of Y from the code X A: (A^T C_xx A)^-1 A^T C_xy."""
    a = np.asarray(a, dtype=float)
    gram = a.T @ mom.c_xx @ a
    return _solve_gram(gram, a.T @ mom.c_xy, "A^T C_xx A")


def attacker_loss(theta: np.ndarray, a: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """Mean squared attacker loss (1/n) sum_i ||Theta^T A^T x_i - y_i||^2."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 1 and x.shape[0] != 1:
        y = y.T
    resid = x @ a @ theta - y
    return float(np.sum(resid * resid) / x.shape[0])


def best_reconstruction(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Least-squares decoder: argmin_B ||X A B - X||_F."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    xtx = x.T @ x
    gram = a.T @ xtx @ a
    return _solve_gram(gram, a.T @ xtx, "A^T X^T X A")


def min_feasible_distortion(svd: SvdCache, k: int) -> float:
    """Frobenius-squared tail of the singular spectrum beyond rank k."""
    if not 1 <= k <= svd.r:
        raise ValidationError(f"k={k} out of range [1, {svd.r}]")
    return float(np.sum(svd.s[k:] ** 2))


def reduced_ellipsoid(svd: SvdCache, gamma: float) -> numopt.EllipsoidSpec:
    """Distortion constraint ||X M X^T X - X||_F^2 <= gamma in N-coordinates."""
    s = svd.s
    weights = s[:, None] * (s[None, :] ** 2)
    center = np.diag(1.0 / s**2)
    return numopt.EllipsoidSpec(weights=weights, center=center, radius_sq=gamma)


def _release_from_reduced(svd: SvdCache, n_red: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """Reassemble (M, X~, distortion) from the reduced variable."""
    m = svd.v @ n_red @ svd.v.T
    m = (m + m.T) / 2.0
    core = svd.s[:, None] * n_red * (svd.s[None, :] ** 2) - np.diag(svd.s)
    x_tilde = svd.u @ (core + np.diag(svd.s)) @ svd.v.T
    distortion = float(np.sum(core * core))
    return m, x_tilde, distortion


def _truncate_trivial_eigenvalues(
    n_red: np.ndarray, eta: float, spec: numopt.EllipsoidSpec
) -> np.ndarray:
    """Zero out sub-threshold eigenvalues so the release is exactly low rank.

    The solver leaves numerical residue in the directions the rank rule
    already deems trivial; the data SVD amplifies that residue into exactly
    the kind of faint full-rank trace a least-squares attacker can invert.
    Truncation is kept only if the release still fits the distortion budget.
    """
    vals, vecs = np.linalg.eigh(n_red)
    top = vals.max()
    if top <= 0:
        return n_red
    keep = vals > eta * top
    if keep.all():
        return n_red
    truncated = (vecs[:, keep] * vals[keep]) @ vecs[:, keep].T
    truncated = (truncated + truncated.T) / 2.0
    if spec.constraint_value(truncated) <= spec.radius_sq * (1.0 + 1e-9) + 1e-12:
        return truncated
    return n_red


def effective_rank(m: np.ndarray, eta: float) -> int:
    """Count of eigenvalues strictly above eta times the largest."""
    m = numopt.as_symmetric(m)
    vals = np.linalg.eigvalsh(m)
    top = vals.max() if vals.size else 0.0
    if top <= 0:
        return 0
    return int(np.count_nonzero(vals > eta * top))


def solve_release_map(
    x: np.ndarray,
    y: np.ndarray,
    gamma: float,
    beta: float,
    eta: float = 0.01,
    settings: numopt.SolverSettings | None = None,
    svd: SvdCache | None = None,
    admm_state: numopt.AdmmState | None = None,
) -> ReleaseMap:
    """Solve the relaxed release SDP at a fixed nuclear-norm weight beta.

    Reduced objective: Tr((Q_r + beta I) N) with Q_r = S (U^T Y)(U^T Y)^T S / n,
    minimized over PSD N inside the distortion ellipsoid via the exact-prox
    ADMM split (the ellipsoid weights s_i s_j^2 are too anisotropic for nested
    alternating projections). ``admm_state`` warm-starts repeated solves of
    the same instance at nearby beta values and is updated in place.
    """
    if gamma < 0:
        raise ValidationError("gamma must be nonnegative")
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 1 and x.shape[0] != 1:
        y = y.T
    svd = svd or SvdCache.from_matrix(x)
    uy = svd.u.T @ y
    q_r = (svd.s[:, None] * uy) @ (uy.T * svd.s[None, :]) / x.shape[0]
    q_lin = q_r + beta * np.eye(svd.r)
    spec = reduced_ellipsoid(svd, gamma)
    settings = settings or numopt.SolverSettings(tol=1e-10, max_iter=50000)
    try:
        n_star, new_state = numopt.admm_linear_min(q_lin, spec, settings, state=admm_state)
    except NonConvergence:
        if admm_state is None or admm_state.z.size == 0:
            raise
        # A stale warm start can strand the splitting; one cold retry.
        n_star, new_state = numopt.admm_linear_min(q_lin, spec, settings, state=None)
    if admm_state is not None:
        admm_state.z, admm_state.u, admm_state.rho = new_state.z, new_state.u, new_state.rho
    m, _, distortion = _release_from_reduced(svd, n_star)
    return ReleaseMap(
        m=m,
        effective_rank=effective_rank(m, eta),
        beta_final=float(beta),
        distortion=distortion,
        gamma=float(gamma),
    )


BETA_MIN, BETA_MAX = 1e-10, 1e10


def next_beta(beta: float, k_hat: int, k: int) -> float:
    """Multiplicative rank-targeting update: +beta/2 too high, -beta/4 too low."""
    if k_hat > k:
        return beta + beta / 2.0
    if k_hat < k:
        return beta - beta / 4.0
    return beta


def run_linear_game(
    x: np.ndarray,
    y: np.ndarray,
    cfg: LinearGameConfig,
    settings: numopt.SolverSettings | None = None,
) -> tuple[np.ndarray, ReleaseMap]:
    """Rank-targeting loop: adjust beta until the release has effective rank k.

    The feasibility gate rejects budgets below the rank-k truncation tail up
    front; the beta updates are the multiplicative rules beta + beta/2 (rank
    too high) and beta - beta/4 (rank too low).
    """
    x = np.asarray(x, dtype=float)
    if x.shape[0] <= x.shape[1]:
        raise ValidationError("need more rows than features in each solved batch")
    svd = SvdCache.from_matrix(x)
    k_bound = min(cfg.k, svd.r)
    bound = min_feasible_distortion(svd, k_bound)
    if cfg.gamma < bound - 1e-12 * max(bound, 1.0):
        raise InfeasibleDistortion(cfg.gamma, bound, cfg.k)

    beta = cfg.beta0
    best: ReleaseMap | None = None
    warm = numopt.AdmmState(z=np.zeros(0), u=np.zeros(0), rho=1.0)
    for _ in range(cfg.max_outer):
        rm = solve_release_map(
            x, y, cfg.gamma, beta, eta=cfg.eta, settings=settings, svd=svd, admm_state=warm
        )
        if best is None or abs(rm.effective_rank - cfg.k) < abs(best.effective_rank - cfg.k):
            best = rm
        if rm.effective_rank == cfg.k:
            n_red = svd.v.T @ rm.m @ svd.v
            n_red = _truncate_trivial_eigenvalues(n_red, cfg.eta, reduced_ellipsoid(svd, cfg.gamma))
            m, x_tilde, distortion = _release_from_reduced(svd, n_red)
            rm = ReleaseMap(
                m=m,
                effective_rank=effective_rank(m, cfg.eta),
                beta_final=rm.beta_final,
                distortion=distortion,
                gamma=rm.gamma,
            )
            return x_tilde, rm
        beta = next_beta(beta, rm.effective_rank, cfg.k)
        if not BETA_MIN <= beta <= BETA_MAX:
            break
    assert best is not None
    raise RankNotAttained(cfg.k, best.effective_rank, beta)


def calibrate_gamma_for_rank(
    x: np.ndarray,
    y: np.ndarray,
    k: int,
    beta0: float = 1e-3,
    eta: float = 0.01,
    max_probes: int = 24,
) -> float:
    """Find a budget gamma at which the solved release has effective rank k.

    The effective rank at fixed beta is monotone non-increasing in gamma, so
    a doubling bracket plus bisection lands on the rank-k band. On data with
    a flat singular spectrum the beta search alone cannot bridge between rank
    bands, so experiments calibrate gamma first and let the beta loop finish.
    """
    x = np.asarray(x, dtype=float)
    svd = SvdCache.from_matrix(x)
    if not 1 <= k <= svd.r:
        raise ValidationError(f"k={k} out of range [1, {svd.r}]")
    tail = min_feasible_distortion(svd, k)
    if k == svd.r:
        return tail  # zero-distortion budget keeps everything

    def rank_at(gamma: float) -> int:
        rm = solve_release_map(x, y, gamma, beta0, eta=eta, svd=svd)
        return rm.effective_rank

    lo = max(tail * 1.001, 1e-12)
    hi = max(lo * 1.3, 1e-9)
    for _ in range(max_probes):
        r_hi = rank_at(hi)
        if r_hi == k:
            return hi
        if r_hi < k:
            break
        lo = hi
        hi *= 1.6
    else:
        raise RankNotAttained(k, r_hi, beta0)
    for _ in range(max_probes):
        mid = 0.5 * (lo + hi)
        r_mid = rank_at(mid)
        if r_mid == k:
            return mid
        if r_mid > k:
            lo = mid
        else:
            hi = mid
    # The band may be razor thin; hand the closest bracket edge to the
    # beta loop, which can bridge a one-rank gap.
    return lo


def noisy_linear_objective(
    a: np.ndarray,
    noise: NoiseSpec,
    x: np.ndarray,
    y: np.ndarray,
) -> tuple[float, float]:
    """Exact expected losses for the noisy code Z = X A + E, rows of E ~ N(0, Sigma).

    Returns (attacker_loss, reconstruction_loss): the attacker's minimum
    expected mean squared prediction loss, and E||Z B - X||_F^2 at the best
    decoder B, both via trace identities (no sampling).
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 1 and x.shape[0] != 1:
        y = y.T
    n = x.shape[0]
    mom = cross_moments(x, y)
    gram = a.T @ mom.c_xx @ a + noise.sigma
    theta = _solve_gram(gram, a.T @ mom.c_xy, "A^T C_xx A + Sigma")
    mean_y_sq = float(np.sum(y * y)) / n
    attacker = mean_y_sq - float(np.trace(mom.c_xy.T @ a @ theta))

    b = _solve_gram(gram, a.T @ mom.c_xx, "A^T C_xx A + Sigma")
    resid = x @ a @ b - x
    reconstruction = float(np.sum(resid * resid)) + n * float(np.trace(b.T @ noise.sigma @ b))
    return attacker, reconstruction


def linear_attack_eval(
    x_tilde: np.ndarray,
    y: np.ndarray,
    split: SplitBatches,
    x_original: np.ndarray,
) -> dict:
    """Fit a linear attacker (with intercept) on train rows, score on test.

    Reports test RMSE and R^2 plus the relative release distortion
    ||X~ - X||_F^2 / ||X||_F^2.
    """
    x_tilde = np.asarray(x_tilde, dtype=float)
    x_original = np.asarray(x_original, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] == 1 and x_tilde.shape[0] != 1:
        y = y.T
    if x_tilde.shape != x_original.shape or y.shape[0] != x_tilde.shape[0]:
        raise ValidationError("mismatched shapes in attack evaluation")

    tr, te = split.train_indices, split.test_indices
    design = np.column_stack([x_tilde, np.ones(x_tilde.shape[0])])
    coef, *_ = np.linalg.lstsq(design[tr], y[tr], rcond=None)
    pred = design[te] @ coef
    resid = pred - y[te]
    rmse = float(np.sqrt(np.mean(resid**2)))
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y[te] - y[te].mean(axis=0)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0

    pred_tr = design[tr] @ coef
    resid_tr = pred_tr - y[tr]
    rmse_tr = float(np.sqrt(np.mean(resid_tr**2)))
    ss_tot_tr = float(np.sum((y[tr] - y[tr].mean(axis=0)) ** 2))
    r2_tr = 1.0 - float(np.sum(resid_tr**2)) / ss_tot_tr if ss_tot_tr > 0 else 0.0

    denom = float(np.sum(x_original**2))
    distortion = float(np.sum((x_tilde - x_original) ** 2)) / denom if denom > 0 else 0.0
    return {
        "rmse": rmse,
        "r2": r2,
        "rmse_train": rmse_tr,
        "r2_train": r2_tr,
        "distortion": distortion,
    }
