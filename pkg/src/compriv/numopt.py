"""Convex substrate for the linear release mechanisms.

Everything here works on small dense symmetric matrices in the reduced
coordinates of the data's SVD: the feasible set is the intersection of the
PSD cone with a weighted-ellipsoid distortion constraint, and the relaxed
release objective is linear (trace against a fixed coefficient matrix, since
the nuclear norm of a PSD matrix is its trace).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonConvergence, ValidationError

SYMMETRY_RTOL = 1e-10


def as_symmetric(a: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Validate near-symmetry and return the symmetrized copy (A + A^T)/2."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains non-finite entries")
    scale = max(1.0, float(np.abs(a).max()))
    if np.abs(a - a.T).max() > rtol * scale:
        raise ValidationError("matrix is not symmetric within tolerance")
    return (a + a.T) / 2.0


@dataclass(frozen=True)
class EllipsoidSpec:
    """Distortion constraint sum_ij w_ij^2 (N_ij - C_ij)^2 <= radius_sq.

    The domain is symmetric matrices, where entries (i, j) and (j, i) share
    one deviation, so asymmetric weights are canonicalized on construction to
    w_ij <- sqrt((w_ij^2 + w_ji^2)/2); the constraint value is unchanged on
    symmetric arguments and entrywise projections stay symmetric.
    ``radius_sq`` may be ``np.inf`` to mark the constraint inactive.
    """

    weights: np.ndarray
    center: np.ndarray
    radius_sq: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        c = np.asarray(self.center, dtype=float)
        if w.shape != c.shape or w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValidationError("weights and center must be square matrices of equal shape")
        if not np.all(w > 0):
            raise ValidationError("all ellipsoid weights must be strictly positive")
        if not np.all(np.isfinite(c)):
            raise ValidationError("ellipsoid center must be finite")
        if not self.radius_sq >= 0:
            raise ValidationError("radius_sq must be nonnegative")
        w = np.sqrt((w**2 + w.T**2) / 2.0)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "center", as_symmetric(c))

    def constraint_value(self, n: np.ndarray) -> float:
        d = self.weights * (n - self.center)
        return float(np.sum(d * d))

    def is_feasible(self, n: np.ndarray, slack: float = 0.0) -> bool:
        if np.isinf(self.radius_sq):
            return True
        return self.constraint_value(n) <= self.radius_sq + slack


@dataclass
class SolverSettings:
    """Knobs for the projected-gradient solve and the inner projections.

    ``step_size=None`` selects the default 1/(||Q||_F + 1) for the linear
    objective being minimized.
    """

    step_size: float | None = None
    max_iter: int = 5000
    tol: float = 1e-8
    projection_tol: float = 1e-8
    dykstra_max_iter: int = 500

    def __post_init__(self):
        if self.step_size is not None and not self.step_size > 0:
            raise ValidationError("step_size must be positive")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.max_iter < 1 or self.dykstra_max_iter < 1:
            raise ValidationError("iteration caps must be >= 1")


def pseudo_inverse(a: np.ndarray) -> np.ndarray:
    """Moore-Penrose pseudo-inverse of a p x k matrix (k <= p)."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise ValidationError(f"expected a matrix, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains non-finite entries")
    if a.shape[1] > a.shape[0]:
        raise ValidationError("expected a tall matrix (columns <= rows)")
    return np.linalg.pinv(a)


def psd_project(s: np.ndarray) -> np.ndarray:
    """Nearest (Frobenius) PSD matrix: clip negative eigenvalues to zero."""
    s = as_symmetric(s)
    vals, vecs = np.linalg.eigh(s)
    if np.all(vals >= 0):
        return s
    clipped = np.clip(vals, 0.0, None)
    out = (vecs * clipped) @ vecs.T
    return (out + out.T) / 2.0


def ellipsoid_project(p: np.ndarray, spec: EllipsoidSpec) -> np.ndarray:
    """Project onto the weighted ellipsoid in the plain Frobenius metric.

    The entrywise Lagrangian form N_ij = (P_ij + lam w_ij^2 C_ij)/(1 + lam w_ij^2)
    is exact; the multiplier is found by bisection because the constraint value
    is monotone decreasing in lam.
    """
    p = as_symmetric(p)
    if p.shape != spec.center.shape:
        raise ValidationError("point and ellipsoid have mismatched shapes")
    if np.isinf(spec.radius_sq):
        return p
    if spec.radius_sq == 0.0:
        return spec.center.copy()
    if spec.is_feasible(p):
        return p

    w2 = spec.weights**2
    diff2 = w2 * (p - spec.center) ** 2  # w^2 (P-C)^2
    radius = spec.radius_sq

    def constraint_at(lam: float) -> float:
        # constraint value at N(lam): sum w^2 (P-C)^2 / (1 + lam w^2)^2
        return float(np.sum(diff2 / (1.0 + lam * w2) ** 2))

    # The constraint value is convex and strictly decreasing in lam, so Newton
    # from lam = 0 approaches the root monotonically from the infeasible side.
    lam = 0.0
    g = constraint_at(lam)
    for _ in range(100):
        slope = -2.0 * float(np.sum(diff2 * w2 / (1.0 + lam * w2) ** 3))
        step = (g - radius) / (-slope)
        if not np.isfinite(step) or step <= 0:
            break
        lam += step
        g = constraint_at(lam)
        if g <= radius * (1.0 + 1e-13):
            break
    if g > radius:
        # Rare polish: bracket the feasible side and bisect.
        lam_hi = max(lam, 1e-16)
        doublings = 0
        while constraint_at(lam_hi) > radius:
            lam_hi = lam_hi * 2.0 + 1e-16
            doublings += 1
            if doublings > 2000:
                raise NonConvergence(
                    "ellipsoid projection could not bracket the multiplier "
                    "(pathological weights)",
                    {"lam_hi": lam_hi, "constraint": constraint_at(lam_hi)},
                )
        lam_lo = lam
        for _ in range(200):
            if (lam_hi - lam_lo) <= 1e-15 * lam_hi:
                break
            lam_mid = 0.5 * (lam_lo + lam_hi)
            if constraint_at(lam_mid) > radius:
                lam_lo = lam_mid
            else:
                lam_hi = lam_mid
        lam = lam_hi  # feasible side of the bracket
    out = (p + lam * w2 * spec.center) / (1.0 + lam * w2)
    return (out + out.T) / 2.0


def dykstra_intersect(
    p: np.ndarray,
    spec: EllipsoidSpec,
    settings: SolverSettings | None = None,
) -> np.ndarray:
    """Project onto PSD cone intersected with the distortion ellipsoid.

    Dykstra's alternating projections with correction terms; converges to the
    exact Frobenius projection because both sets are closed and convex and the
    intersection is nonempty for every spec produced by the release solvers.
    """
    settings = settings or SolverSettings()
    x = as_symmetric(p)
    if np.isinf(spec.radius_sq):
        return psd_project(x)
    if spec.radius_sq == 0.0:
        # Feasible set collapses to the center (assumed PSD by the callers).
        return spec.center.copy()

    inc_psd = np.zeros_like(x)
    inc_ell = np.zeros_like(x)
    for _ in range(settings.dykstra_max_iter):
        y = psd_project(x + inc_psd)
        inc_psd = x + inc_psd - y
        x_next = ellipsoid_project(y + inc_ell, spec)
        inc_ell = y + inc_ell - x_next
        change = float(np.linalg.norm(x_next - x))
        x = x_next
        if change < settings.tol:
            psd_residual = max(0.0, -float(np.linalg.eigvalsh(x).min()))
            if psd_residual <= settings.projection_tol:
                return x
    psd_residual = max(0.0, -float(np.linalg.eigvalsh(x).min()))
    ell_residual = max(0.0, spec.constraint_value(x) - spec.radius_sq)
    raise NonConvergence(
        "Dykstra projection did not converge",
        {"iterate_change": change, "psd_residual": psd_residual, "ellipsoid_residual": ell_residual},
    )


@dataclass
class AdmmState:
    """Warm-start carrier for :func:`admm_linear_min` (preconditioned coords)."""

    z: np.ndarray
    u: np.ndarray
    rho: float


def admm_linear_min(
    q_lin: np.ndarray,
    spec: EllipsoidSpec,
    settings: SolverSettings | None = None,
    state: AdmmState | None = None,
    over_relax: float = 1.0,
) -> tuple[np.ndarray, AdmmState]:
    """Minimize Tr(Q_lin N) over PSD ∩ ellipsoid by exact-prox ADMM.

    Same problem as :func:`projected_linear_min` but robust on strongly
    anisotropic ellipsoids, where nested alternating projections crawl. The
    variable is diagonally equilibrated by d_i = sqrt(w_ii) (a congruence, so
    the PSD prox stays an eigenvalue clip and the ellipsoid prox stays
    entrywise); both prox steps are exact, and the split converges to the
    constrained minimizer. Returns the ellipsoid-exact iterate plus the solver
    state for warm-starting a nearby objective.
    """
    settings = settings or SolverSettings()
    q = as_symmetric(q_lin)
    if np.isinf(spec.radius_sq):
        # Ellipsoid inactive: a linear objective over the PSD cone alone is
        # bounded only for PSD coefficients, with minimizer 0.
        if np.linalg.eigvalsh(q).min() < -settings.projection_tol:
            raise NonConvergence("unbounded: indefinite objective with inactive ellipsoid", {})
        return np.zeros_like(q), AdmmState(z=np.zeros_like(q), u=np.zeros_like(q), rho=1.0)
    if spec.radius_sq == 0.0:
        # The feasible set collapses to the (PSD, by construction) center.
        c = spec.center.copy()
        return c, AdmmState(z=c, u=np.zeros_like(c), rho=1.0)

    d = np.sqrt(np.diag(spec.weights))
    dinv_outer = np.outer(1.0 / d, 1.0 / d)
    q2 = q * dinv_outer
    spec2 = EllipsoidSpec(
        weights=spec.weights * dinv_outer,
        center=spec.center / dinv_outer,
        radius_sq=spec.radius_sq,
    )
    rho_floor = max(1.0, float(np.linalg.norm(q2)))
    if state is None or state.z.size == 0:
        rho = rho_floor
        z = spec2.center.copy()
        u = np.zeros_like(z)
    else:
        z, u, rho = state.z.copy(), state.u.copy(), state.rho
        if rho < 1e-3 * rho_floor:
            # The objective scale outgrew the warm rho; re-sync (u is the
            # scaled dual y/rho, so it rescales with rho).
            u *= rho / rho_floor
            rho = rho_floor

    r_primal = r_dual = np.inf
    for it in range(settings.max_iter):
        n = psd_project(z - u - q2 / rho)
        n_rel = over_relax * n + (1.0 - over_relax) * z
        z_prev = z
        z = ellipsoid_project(n_rel + u, spec2)
        u = u + n_rel - z
        r_primal = float(np.linalg.norm(n - z))
        r_dual = rho * float(np.linalg.norm(z - z_prev))
        eps_pri = settings.tol * max(1.0, float(np.linalg.norm(z)))
        eps_dual = settings.tol * max(1.0, rho * float(np.linalg.norm(u)))
        if r_primal < eps_pri and r_dual < eps_dual:
            return z * dinv_outer, AdmmState(z=z, u=u, rho=rho)
        if it % 10 == 9:
            if r_primal * eps_dual > 10.0 * r_dual * eps_pri:
                rho *= 2.0
                u /= 2.0
            elif r_dual * eps_pri > 10.0 * r_primal * eps_dual:
                rho /= 2.0
                u *= 2.0
    raise NonConvergence(
        "ADMM did not converge",
        {"primal_residual": r_primal, "dual_residual": r_dual, "rho": rho},
    )


def projected_linear_min(
    q_lin: np.ndarray,
    spec: EllipsoidSpec,
    n0: np.ndarray,
    settings: SolverSettings | None = None,
) -> np.ndarray:
    """Minimize Tr(Q_lin N) over PSD ∩ ellipsoid by projected gradient.

    The start point is projected onto the feasible set first, so with a zero
    objective the result is exactly the projection of ``n0``. With a linear
    objective every projected step decreases the objective for any positive
    step size, and the iteration map is firmly nonexpansive, so the iterates
    converge to a constrained minimizer.
    """
    settings = settings or SolverSettings()
    q = as_symmetric(q_lin)
    step = settings.step_size
    if step is None:
        step = 1.0 / (float(np.linalg.norm(q)) + 1.0)

    n = dykstra_intersect(as_symmetric(n0), spec, settings)
    for _ in range(settings.max_iter):
        stepped = n - step * q
        stepped = (stepped + stepped.T) / 2.0
        n_next = dykstra_intersect(stepped, spec, settings)
        change = float(np.linalg.norm(n_next - n))
        n = n_next
        if change < settings.tol:
            return n
    raise NonConvergence(
        "projected gradient did not converge",
        {
            "iterate_change": change,
            "objective": float(np.tensordot(q, n)),
            "ellipsoid_residual": max(0.0, spec.constraint_value(n) - spec.radius_sq),
        },
    )
