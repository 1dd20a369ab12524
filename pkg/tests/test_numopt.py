import numpy as np
import pytest
from scipy.optimize import minimize

from compriv import numopt
from compriv.errors import NonConvergence, ValidationError


def random_symmetric(rng, r, scale=1.0):
    a = scale * rng.standard_normal((r, r))
    return (a + a.T) / 2.0


# ---------------------------------------------------------------------------
# pseudo_inverse

def test_pinv_identity():
    assert np.allclose(numopt.pseudo_inverse(np.eye(3)), np.eye(3))


def test_pinv_column_vector():
    assert np.allclose(numopt.pseudo_inverse(np.array([[1.0], [1.0]])), [[0.5, 0.5]])


def test_pinv_moore_penrose_conditions():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 3))
    r = numopt.pseudo_inverse(a)
    assert np.linalg.norm(a @ r @ a - a) <= 1e-10
    assert np.linalg.norm(r @ a @ r - r) <= 1e-10
    assert np.linalg.norm((a @ r) - (a @ r).T) <= 1e-10
    assert np.linalg.norm((r @ a) - (r @ a).T) <= 1e-10


def test_pinv_rejects_nonfinite():
    with pytest.raises(ValidationError):
        numopt.pseudo_inverse(np.array([[np.nan, 0.0], [0.0, 1.0], [1.0, 2.0]]))


# ---------------------------------------------------------------------------
# psd_project

def test_psd_project_clips_eigenvalues():
    out = numopt.psd_project(np.diag([2.0, -3.0]))
    assert np.allclose(out, np.diag([2.0, 0.0]))


def test_psd_project_fixed_point_on_psd():
    rng = np.random.default_rng(0)
    b = rng.standard_normal((4, 4))
    psd = b @ b.T
    assert np.allclose(numopt.psd_project(psd), psd)


def test_psd_project_idempotent_and_floor():
    rng = np.random.default_rng(1)
    for _ in range(5):
        s = random_symmetric(rng, 5)
        once = numopt.psd_project(s)
        twice = numopt.psd_project(once)
        assert np.allclose(once, twice, atol=1e-12)
        assert np.linalg.eigvalsh(once).min() >= -1e-10


def test_psd_project_matches_factored_minimizer():
    # Oracle: multi-restart minimization over factors L of ||L L^T - S||_F.
    rng = np.random.default_rng(7)
    s = random_symmetric(rng, 4, scale=2.0)
    projected = numopt.psd_project(s)
    direct = np.linalg.norm(projected - s)

    def objective(vec):
        l = vec.reshape(4, 4)
        return np.linalg.norm(l @ l.T - s) ** 2

    best = np.inf
    for restart in range(8):
        x0 = rng.standard_normal(16)
        res = minimize(objective, x0, method="L-BFGS-B", options={"maxiter": 2000})
        best = min(best, np.sqrt(res.fun))
    assert abs(direct - best) <= 1e-6


# ---------------------------------------------------------------------------
# ellipsoid_project

def ball_spec(r, center, radius_sq):
    return numopt.EllipsoidSpec(weights=np.ones((r, r)), center=center, radius_sq=radius_sq)


def test_ellipsoid_project_uniform_weights_is_ball_projection():
    c = np.zeros((2, 2))
    p = np.array([[2.0, 0.0], [0.0, 0.0]])  # ||P - C||_F = 2
    out = numopt.ellipsoid_project(p, ball_spec(2, c, 1.0))
    assert np.allclose(out, c + (p - c) / 2.0, atol=1e-12)


def test_ellipsoid_project_interior_point_unchanged():
    rng = np.random.default_rng(5)
    c = random_symmetric(rng, 3)
    spec = numopt.EllipsoidSpec(weights=1.0 + rng.random((3, 3)), center=c, radius_sq=4.0)
    p = c + 1e-3 * random_symmetric(rng, 3)
    assert np.array_equal(numopt.ellipsoid_project(p, spec), p)


def test_ellipsoid_project_active_and_beats_samples():
    rng = np.random.default_rng(11)
    weights = 0.5 + rng.random((3, 3))
    center = random_symmetric(rng, 3)
    spec = numopt.EllipsoidSpec(weights=weights, center=center, radius_sq=0.7)
    p = center + random_symmetric(rng, 3, scale=3.0)
    assert not spec.is_feasible(p)
    out = numopt.ellipsoid_project(p, spec)
    assert abs(spec.constraint_value(out) - spec.radius_sq) <= 1e-10
    d_out = np.linalg.norm(out - p)
    # Oracle: the projection is no farther than any sampled feasible point.
    w = spec.weights
    for _ in range(10_000):
        z = random_symmetric(rng, 3)
        z = z / max(1.0, np.linalg.norm(w * z) / np.sqrt(spec.radius_sq))
        cand = center + z / w
        cand = (cand + cand.T) / 2.0
        if spec.is_feasible(cand, slack=1e-12):
            assert d_out <= np.linalg.norm(cand - p) + 1e-9


def test_ellipsoid_project_radius_zero_returns_center():
    rng = np.random.default_rng(2)
    c = random_symmetric(rng, 3)
    spec = numopt.EllipsoidSpec(weights=np.ones((3, 3)), center=c, radius_sq=0.0)
    out = numopt.ellipsoid_project(c + random_symmetric(rng, 3), spec)
    assert np.allclose(out, c)


def test_ellipsoid_asymmetric_weights_are_canonicalized():
    w = np.array([[1.0, 3.0], [2.0, 1.0]])
    spec = numopt.EllipsoidSpec(weights=w, center=np.zeros((2, 2)), radius_sq=1.0)
    assert np.allclose(spec.weights, spec.weights.T)
    n = np.array([[0.3, -0.2], [-0.2, 0.1]])
    raw = float(np.sum((w * n) ** 2))
    assert abs(spec.constraint_value(n) - raw) <= 1e-12  # unchanged on symmetric args


# ---------------------------------------------------------------------------
# dykstra_intersect

def test_dykstra_fixed_point_inside_intersection():
    rng = np.random.default_rng(4)
    b = rng.standard_normal((3, 3))
    p = 0.1 * (b @ b.T)
    spec = ball_spec(3, p, 5.0)
    out = numopt.dykstra_intersect(p, spec)
    assert np.allclose(out, p, atol=1e-10)


def test_dykstra_infinite_radius_degenerates_to_psd_projection():
    rng = np.random.default_rng(6)
    s = random_symmetric(rng, 4)
    spec = numopt.EllipsoidSpec(weights=np.ones((4, 4)), center=np.zeros((4, 4)), radius_sq=np.inf)
    assert np.allclose(numopt.dykstra_intersect(s, spec), numopt.psd_project(s))


def test_dykstra_membership_and_penalty_oracle():
    rng = np.random.default_rng(9)
    center = np.eye(3) * 0.5
    spec = numopt.EllipsoidSpec(weights=0.8 + rng.random((3, 3)), center=center, radius_sq=0.4)
    p = random_symmetric(rng, 3, scale=2.0)
    settings = numopt.SolverSettings(tol=1e-12, dykstra_max_iter=20000)
    out = numopt.dykstra_intersect(p, spec, settings)
    assert np.linalg.eigvalsh(out).min() >= -1e-8
    assert spec.constraint_value(out) <= spec.radius_sq + 1e-8

    # Oracle: penalized minimization with multiplier updates (augmented
    # Lagrangian) over the upper triangle, analytic gradients throughout.
    iu = np.triu_indices(3)

    def unpack(vec):
        z = np.zeros((3, 3))
        z[iu] = vec
        return z + np.triu(z, 1).T

    def pack_grad(g):
        sym = g + g.T
        sym[np.diag_indices(3)] /= 2.0
        return sym[iu]

    mu = 1e4

    def penalized(vec, lam):
        z = unpack(vec)
        eig, vecs = np.linalg.eigh(z)
        neg = np.minimum(eig, 0.0)
        viol = spec.constraint_value(z) - spec.radius_sq
        shifted = max(0.0, lam / mu + viol)
        val = (np.linalg.norm(z - p) ** 2
               + 0.5 * mu * shifted**2
               + mu * np.sum(neg**2))
        grad = 2.0 * (z - p) + mu * 2.0 * (vecs * neg) @ vecs.T
        if shifted > 0:
            grad += mu * shifted * 2.0 * spec.weights**2 * (z - spec.center)
        return val, pack_grad(grad)

    x0 = p[iu]
    lam = 0.0
    for _ in range(40):
        res = minimize(penalized, x0, args=(lam,), method="L-BFGS-B", jac=True,
                       options={"maxiter": 5000, "ftol": 1e-16, "gtol": 1e-12})
        x0 = res.x
        viol = spec.constraint_value(unpack(x0)) - spec.radius_sq
        lam = max(0.0, lam + mu * viol)
    oracle = unpack(x0)
    assert abs(np.linalg.norm(out - p) - np.linalg.norm(oracle - p)) <= 1e-5


def test_dykstra_nonconvergence_reports_residuals():
    spec = numopt.EllipsoidSpec(weights=np.ones((2, 2)), center=2 * np.eye(2), radius_sq=0.01)
    p = -10.0 * np.eye(2)
    with pytest.raises(NonConvergence) as err:
        numopt.dykstra_intersect(p, spec, numopt.SolverSettings(tol=1e-16, dykstra_max_iter=2))
    assert "iterate_change" in err.value.residuals


# ---------------------------------------------------------------------------
# projected_linear_min

def test_plm_zero_objective_projects_start_point():
    rng = np.random.default_rng(12)
    spec = ball_spec(3, np.eye(3), 0.5)
    n0 = random_symmetric(rng, 3, scale=2.0)
    out = numopt.projected_linear_min(np.zeros((3, 3)), spec, n0)
    assert np.allclose(out, numopt.dykstra_intersect(n0, spec), atol=1e-8)


def test_plm_ball_closed_form_and_kkt():
    # Feasible region: ball of radius 0.3 around 2I, interior of the PSD cone.
    spec = ball_spec(3, 2 * np.eye(3), 0.09)
    settings = numopt.SolverSettings(tol=1e-12, max_iter=50000)
    out = numopt.projected_linear_min(np.eye(3), spec, 2 * np.eye(3), settings)
    expected = 2 * np.eye(3) - 0.3 * np.eye(3) / np.sqrt(3)
    assert np.linalg.norm(out - expected) <= 1e-8
    # KKT: gradient I + lam * 2(N - C) = 0 with lam >= 0 and active constraint.
    lam = np.sqrt(3) / 0.6
    assert np.linalg.norm(np.eye(3) + lam * 2 * (out - 2 * np.eye(3))) <= 1e-8
    assert abs(spec.constraint_value(out) - 0.09) <= 1e-10


def _seeded_instance(rng, r=5):
    q = random_symmetric(rng, r)
    q = q @ q.T / r + 0.1 * np.eye(r)
    weights = 0.7 + rng.random((r, r))
    b = rng.standard_normal((r, r))
    center = 0.4 * (b @ b.T) / r + 0.2 * np.eye(r)
    spec = numopt.EllipsoidSpec(weights=weights, center=center, radius_sq=1.2)
    return q, spec


def test_plm_long_run_reference_oracle():
    rng = np.random.default_rng(21)
    q, spec = _seeded_instance(rng)
    settings = numopt.SolverSettings(tol=1e-8, max_iter=5000)
    out = numopt.projected_linear_min(q, spec, spec.center, settings)
    obj = float(np.tensordot(q, out))

    step = 1.0 / (np.linalg.norm(q) + 1.0)
    long_run = numopt.SolverSettings(step_size=step / 10.0, tol=1e-6, max_iter=50000)
    best = np.inf
    starts = [spec.center] + [random_symmetric(rng, 5) for _ in range(4)]
    for n0 in starts:
        ref = numopt.projected_linear_min(q, spec, n0, long_run)
        best = min(best, float(np.tensordot(q, ref)))
    assert obj <= best + 1e-5 * abs(best)


def test_plm_objective_monotone_and_beats_feasible_family():
    rng = np.random.default_rng(31)
    q, spec = _seeded_instance(rng)
    # Monotone objective along the projected-gradient path.
    settings = numopt.SolverSettings(tol=1e-9, max_iter=4000)
    n = numopt.dykstra_intersect(spec.center + random_symmetric(rng, 5), spec, settings)
    step = 1.0 / (np.linalg.norm(q) + 1.0)
    prev = float(np.tensordot(q, n))
    for _ in range(40):
        n = numopt.dykstra_intersect(n - step * q, spec, settings)
        cur = float(np.tensordot(q, n))
        assert cur <= prev + 1e-9
        prev = cur
    out = numopt.projected_linear_min(q, spec, spec.center, settings)
    obj = float(np.tensordot(q, out))
    # Solver result beats random feasible reference points.
    for _ in range(200):
        z = random_symmetric(rng, 5)
        cand = numopt.dykstra_intersect(spec.center + 0.5 * z, spec, settings)
        ref = float(np.tensordot(q, cand))
        assert obj <= ref + 1e-5 * max(1.0, abs(ref))


# ---------------------------------------------------------------------------
# admm_linear_min (robust path used by the release solver)

def test_admm_matches_projected_gradient_on_easy_instance():
    rng = np.random.default_rng(41)
    q, spec = _seeded_instance(rng)
    pgd = numopt.projected_linear_min(q, spec, spec.center, numopt.SolverSettings(tol=1e-10, max_iter=20000))
    admm, _ = numopt.admm_linear_min(q, spec, numopt.SolverSettings(tol=1e-11, max_iter=50000))
    assert abs(float(np.tensordot(q, admm)) - float(np.tensordot(q, pgd))) <= 1e-6
    assert spec.constraint_value(admm) <= spec.radius_sq + 1e-10
    assert np.linalg.eigvalsh(admm).min() >= -1e-8


def test_admm_warm_start_reuses_state():
    rng = np.random.default_rng(43)
    q, spec = _seeded_instance(rng)
    settings = numopt.SolverSettings(tol=1e-10, max_iter=50000)
    out1, state = numopt.admm_linear_min(q, spec, settings)
    out2, _ = numopt.admm_linear_min(q * 1.01, spec, settings, state=state)
    assert np.linalg.norm(out1 - out2) < 0.5  # nearby objective, nearby solution


def test_solver_settings_validation():
    with pytest.raises(ValidationError):
        numopt.SolverSettings(step_size=-1.0)
    with pytest.raises(ValidationError):
        numopt.SolverSettings(tol=0.0)
    with pytest.raises(ValidationError):
        numopt.EllipsoidSpec(weights=np.zeros((2, 2)), center=np.zeros((2, 2)), radius_sq=1.0)
