"""Categorical-label linear release game.

The attacker is a ridge-stabilized logistic model on the released rows
x~ = M x; the holder ascends its loss over PSD compression matrices under the
distortion constraint ||X M - X||_F^2 <= gamma with a trace penalty targeting
rank and a squared-norm penalty discouraging attacker-stationarity drift.
The released matrix is the iterate average, X~ = X M_bar.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numopt
from .dataset import SplitBatches
from .errors import NonConvergence, RankNotAttained, ValidationError
from .linear_game import SvdCache, _truncate_trivial_eigenvalues, effective_rank, next_beta

DEFAULT_RIDGE = 1e-6
ASCENT_STEP = 1.0
ASCENT_MAX_HALVINGS = 40


@dataclass
class LogisticAttacker:
    theta: np.ndarray
    ridge: float = DEFAULT_RIDGE


@dataclass
class CategoricalGameConfig:
    gamma: float
    k: int
    T: int = 60
    beta0: float = 0.05
    eta: float = 0.01
    stationarity_weight: float = 1.0
    tol: float = 1e-5  # convergence on ||M_t - M_{t-1}||_F at the target rank

    def __post_init__(self):
        if self.gamma < 0:
            raise ValidationError("gamma must be nonnegative")
        if self.T < 1:
            raise ValidationError("T must be >= 1")
        if not self.beta0 > 0:
            raise ValidationError("beta0 must be positive")
        if self.k < 1:
            raise ValidationError("target rank k must be >= 1")


def _check_labels(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y).ravel()
    if not np.all(np.isin(y, (-1, 1))):
        raise ValidationError("labels must take values in {-1, +1}")
    return y.astype(float)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    """Overflow-free logistic function, exact for |t| up to ~745."""
    t = np.asarray(t, dtype=float)
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def logistic_loss_grad_hess(
    theta: np.ndarray,
    m: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    ridge: float = DEFAULT_RIDGE,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Ridged mean logistic loss on x~ = M x with its exact gradient and Hessian."""
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x, dtype=float)
    y = _check_labels(y)
    n = x.shape[0]
    x_rel = x @ m  # rows are (M x_i)^T for symmetric M
    margins = x_rel @ theta
    z = y * margins
    loss = float(np.mean(np.logaddexp(0.0, -z))) + 0.5 * ridge * float(theta @ theta)
    sig_neg = _sigmoid(-z)
    grad = -(x_rel.T @ (sig_neg * y)) / n + ridge * theta
    # sigma(m)sigma(-m) is even in the margin, so the label drops out.
    curv = _sigmoid(margins) * _sigmoid(-margins)
    hess = (x_rel.T * curv) @ x_rel / n + ridge * np.eye(len(theta))
    return loss, grad, hess


def fit_logistic(
    m: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    tol: float = 1e-8,
    ridge: float = DEFAULT_RIDGE,
    max_newton: int = 200,
) -> LogisticAttacker:
    """Newton's method with step halving; ridge keeps separable data bounded."""
    if not tol > 0:
        raise ValidationError("tol must be positive")
    x = np.asarray(x, dtype=float)
    theta = np.zeros(x.shape[1])
    loss, grad, hess = logistic_loss_grad_hess(theta, m, x, y, ridge)
    for _ in range(max_newton):
        if np.linalg.norm(grad) <= tol:
            return LogisticAttacker(theta=theta, ridge=ridge)
        direction = np.linalg.solve(hess, grad)
        step = 1.0
        for _ in range(60):
            cand = theta - step * direction
            cand_loss, cand_grad, cand_hess = logistic_loss_grad_hess(cand, m, x, y, ridge)
            if cand_loss <= loss:
                theta, loss, grad, hess = cand, cand_loss, cand_grad, cand_hess
                break
            step /= 2.0
        else:
            raise NonConvergence("Newton step halving stalled", {"grad_norm": float(np.linalg.norm(grad))})
    if np.linalg.norm(grad) <= tol:
        return LogisticAttacker(theta=theta, ridge=ridge)
    raise NonConvergence(
        f"logistic fit did not reach gradient norm {tol:.1g} in {max_newton} Newton steps",
        {"grad_norm": float(np.linalg.norm(grad))},
    )


def _categorical_ellipsoid(svd: SvdCache, gamma: float) -> numopt.EllipsoidSpec:
    """||X M - X||_F^2 = sum_ij s_i^2 (N_ij - I_ij)^2 in reduced coordinates."""
    weights = np.repeat(svd.s[:, None], svd.r, axis=1)
    return numopt.EllipsoidSpec(weights=weights, center=np.eye(svd.r), radius_sq=gamma)


def _penalized_objective(
    theta: np.ndarray,
    m: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    beta: float,
    weight: float,
    ridge: float,
) -> float:
    loss, grad, _ = logistic_loss_grad_hess(theta, m, x, y, ridge)
    return loss - beta * float(np.trace(m)) - weight * float(grad @ grad)


def _penalized_gradient_m(
    theta: np.ndarray,
    m: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    beta: float,
    weight: float,
    ridge: float,
) -> np.ndarray:
    """Exact gradient of the penalized holder objective with respect to M."""
    x = np.asarray(x, dtype=float)
    yv = _check_labels(y)
    n = x.shape[0]
    x_rel = x @ m
    z = yv * (x_rel @ theta)
    sig_neg = _sigmoid(-z)
    sig_prime = sig_neg * (1.0 - sig_neg)  # sigma'(-z) = sigma(-z)(1 - sigma(-z))

    # d/dM of the mean logistic loss.
    g_loss = -np.outer(theta, x.T @ (sig_neg * yv)) / n

    # d/dM of ||grad_theta loss||^2 (stationarity penalty).
    grad_theta = -(x_rel.T @ (sig_neg * yv)) / n + ridge * theta
    c = x_rel @ grad_theta  # c_i = grad_theta . (M x_i)
    term1 = np.outer(theta, x.T @ (sig_prime * c)) * (2.0 / n)
    term2 = -np.outer(grad_theta, x.T @ (sig_neg * yv)) * (2.0 / n)

    total = g_loss - beta * np.eye(m.shape[0]) - weight * (term1 + term2)
    return (total + total.T) / 2.0


def holder_ascent_step(
    att: LogisticAttacker,
    m: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    beta: float,
    cfg: CategoricalGameConfig,
    step_size: float = ASCENT_STEP,
    settings: numopt.SolverSettings | None = None,
    svd: SvdCache | None = None,
) -> np.ndarray:
    """One line-searched projected-gradient ascent pass on the holder objective.

    The returned matrix is feasible (PSD and within the distortion budget) and
    its penalized objective is never more than 1e-9 below the input's.
    """
    if step_size < 0:
        raise ValidationError("step_size must be nonnegative")
    m = numopt.as_symmetric(m)
    if step_size == 0.0:
        return m
    x = np.asarray(x, dtype=float)
    svd = svd or SvdCache.from_matrix(x)
    spec = _categorical_ellipsoid(svd, cfg.gamma)
    weight = cfg.stationarity_weight

    def objective(mat: np.ndarray) -> float:
        return _penalized_objective(att.theta, mat, x, y, beta, weight, att.ridge)

    base = objective(m)
    grad = _penalized_gradient_m(att.theta, m, x, y, beta, weight, att.ridge)
    n_cur = svd.v.T @ m @ svd.v
    grad_red = svd.v.T @ grad @ svd.v
    alpha = step_size
    for _ in range(ASCENT_MAX_HALVINGS):
        n_cand = numopt.dykstra_intersect(n_cur + alpha * grad_red, spec, settings)
        m_cand = svd.v @ n_cand @ svd.v.T
        m_cand = (m_cand + m_cand.T) / 2.0
        if objective(m_cand) >= base - 1e-9:
            return m_cand
        alpha /= 2.0
    # No productive step; re-project the input so the feasibility contract holds.
    n_proj = numopt.dykstra_intersect(n_cur, spec, settings)
    m_proj = svd.v @ n_proj @ svd.v.T
    return (m_proj + m_proj.T) / 2.0


def run_categorical_game(
    x: np.ndarray,
    y: np.ndarray,
    cfg: CategoricalGameConfig,
    strict_rank: bool = False,
    newton_tol: float = 1e-8,
    step_size: float = ASCENT_STEP,
    settings: numopt.SolverSettings | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Alternate attacker fits and holder ascent; release the iterate average.

    Stops early once the iterate has effective rank k and stops moving; the
    beta updates mirror the linear game's rank targeting. By convexity of the
    constraint set the averaged matrix inherits feasibility. With
    ``strict_rank`` the run raises if no iterate ever reached rank k.
    """
    x = np.asarray(x, dtype=float)
    y = _check_labels(y)
    if x.shape[0] <= x.shape[1]:
        raise ValidationError("need more rows than features")
    svd = SvdCache.from_matrix(x)

    m_prev = np.eye(x.shape[1])
    att = fit_logistic(m_prev, x, y, tol=newton_tol)
    beta = cfg.beta0
    iterates: list[np.ndarray] = []
    ranks: list[int] = []
    closest = m_prev
    for _ in range(cfg.T):
        m_t = holder_ascent_step(att, m_prev, x, y, beta, cfg,
                                 step_size=step_size, settings=settings, svd=svd)
        att = fit_logistic(m_t, x, y, tol=newton_tol)
        iterates.append(m_t)
        k_hat = effective_rank(m_t, cfg.eta)
        ranks.append(k_hat)
        if abs(k_hat - cfg.k) < abs(effective_rank(closest, cfg.eta) - cfg.k):
            closest = m_t
        if k_hat == cfg.k and np.linalg.norm(m_t - m_prev) <= cfg.tol:
            m_prev = m_t
            break
        beta = next_beta(beta, k_hat, cfg.k)
        m_prev = m_t
    else:
        if strict_rank and all(r != cfg.k for r in ranks):
            raise RankNotAttained(cfg.k, effective_rank(closest, cfg.eta), beta)

    # Average the trailing window where the rank stopped moving: blending in
    # transient iterates from the approach phase would leave a faint full-rank
    # admixture that a refitted attacker can invert back out.
    stable_start = 0
    for i in range(len(ranks) - 1, 0, -1):
        if ranks[i] != ranks[i - 1]:
            stable_start = i
            break
    m_bar = np.mean(iterates[stable_start:], axis=0)
    m_bar = (m_bar + m_bar.T) / 2.0
    n_bar = svd.v.T @ m_bar @ svd.v
    n_bar = _truncate_trivial_eigenvalues(n_bar, cfg.eta, _categorical_ellipsoid(svd, cfg.gamma))
    m_bar = svd.v @ n_bar @ svd.v.T
    m_bar = (m_bar + m_bar.T) / 2.0
    return m_bar, x @ m_bar


def predict_labels(theta: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Decision rule sign(theta . x) with ties sent to +1."""
    return np.where(np.asarray(x) @ theta >= 0, 1, -1)


def logistic_attack_eval(
    x_tilde: np.ndarray,
    y: np.ndarray,
    split: SplitBatches,
    tol: float = 1e-6,
) -> dict:
    """Fit the logistic attacker on train rows, report train/test accuracy."""
    x_tilde = np.asarray(x_tilde, dtype=float)
    y = np.asarray(y).ravel()
    tr, te = split.train_indices, split.test_indices
    att = fit_logistic(np.eye(x_tilde.shape[1]), x_tilde[tr], y[tr], tol=tol)
    acc_train = float(np.mean(predict_labels(att.theta, x_tilde[tr]) == y[tr]))
    acc_test = float(np.mean(predict_labels(att.theta, x_tilde[te]) == y[te]))
    return {"accuracy_train": acc_train, "accuracy_test": acc_test}
