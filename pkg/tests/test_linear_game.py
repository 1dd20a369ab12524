import numpy as np
import pytest

from compriv import dataset, linear_game, numopt
from compriv.errors import InfeasibleDistortion, RankNotAttained, SingularCompression, ValidationError


def reduced_objective(x, y, beta, svd=None):
    svd = svd or linear_game.SvdCache.from_matrix(x)
    uy = svd.u.T @ np.atleast_2d(y.T).T if y.ndim == 1 else svd.u.T @ y
    q_r = (svd.s[:, None] * uy) @ (uy.T * svd.s[None, :]) / x.shape[0]
    return q_r + beta * np.eye(svd.r), svd


# ---------------------------------------------------------------------------
# cross_moments

def test_cross_moments_two_sample():
    mom = linear_game.cross_moments(np.eye(2), np.array([2.0, 4.0]))
    assert np.allclose(mom.c_xx, np.eye(2) / 2)
    assert np.allclose(mom.c_xy, [[1.0], [2.0]])


def test_cross_moments_single_sample():
    mom = linear_game.cross_moments(np.array([[1.0, 2.0]]), np.array([3.0]))
    assert np.allclose(mom.c_xx, [[1, 2], [2, 4]])
    assert np.allclose(mom.c_xy, [[3.0], [6.0]])


def test_cross_moments_matches_accumulation_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((17, 4))
    y = rng.standard_normal((17, 2))
    mom = linear_game.cross_moments(x, y)
    c_xx = sum(np.outer(xi, xi) for xi in x) / 17
    c_xy = sum(np.outer(xi, yi) for xi, yi in zip(x, y)) / 17
    assert np.abs(mom.c_xx - c_xx).max() <= 1e-12
    assert np.abs(mom.c_xy - c_xy).max() <= 1e-12


# ---------------------------------------------------------------------------
# attacker_theta

def test_attacker_theta_identity_compression_is_ols():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((30, 4))
    y = rng.standard_normal((30, 1))
    mom = linear_game.cross_moments(x, y)
    theta = linear_game.attacker_theta(np.eye(4), mom)
    assert np.allclose(theta, np.linalg.solve(mom.c_xx, mom.c_xy), atol=1e-10)


def test_attacker_theta_orthogonal_reparametrization_invariance():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((40, 5))
    y = rng.standard_normal((40, 2))
    mom = linear_game.cross_moments(x, y)
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    pred_ols = x @ linear_game.attacker_theta(np.eye(5), mom)
    pred_q = x @ q @ linear_game.attacker_theta(q, mom)
    assert np.abs(pred_ols - pred_q).max() <= 1e-10


def test_attacker_theta_gradient_and_local_optimality():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((50, 6))
    y = rng.standard_normal((50, 1))
    a = rng.standard_normal((6, 3))
    mom = linear_game.cross_moments(x, y)
    theta = linear_game.attacker_theta(a, mom)
    grad = 2.0 * (a.T @ mom.c_xx @ a @ theta - a.T @ mom.c_xy)
    assert np.linalg.norm(grad) <= 1e-8
    base = linear_game.attacker_loss(theta, a, x, y)
    for _ in range(100):
        delta = rng.standard_normal(theta.shape)
        delta *= 1e-3 / np.linalg.norm(delta)
        assert linear_game.attacker_loss(theta + delta, a, x, y) >= base - 1e-12


def test_attacker_theta_singular_compression():
    x = np.eye(3)
    mom = linear_game.cross_moments(x, np.ones(3))
    with pytest.raises(SingularCompression):
        linear_game.attacker_theta(np.zeros((3, 2)), mom)


# ---------------------------------------------------------------------------
# best_reconstruction

def test_best_reconstruction_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((20, 4))
    assert np.allclose(linear_game.best_reconstruction(np.eye(4), x), np.eye(4), atol=1e-10)


def test_best_reconstruction_pinv_special_case():
    # The pseudo-inverse identity holds when X^T X is proportional to I.
    rng = np.random.default_rng(5)
    q, _ = np.linalg.qr(rng.standard_normal((10, 4)))
    x = np.sqrt(3.0) * q.T @ np.eye(10)[:, :]  # rows orthonormal scaled
    x = np.sqrt(3.0) * q  # 10x4 with X^T X = 3 I
    a = rng.standard_normal((4, 2))
    b = linear_game.best_reconstruction(a, x)
    assert np.abs(b - numopt.pseudo_inverse(a)).max() <= 1e-10


def test_best_reconstruction_least_squares_probes():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((25, 5))
    a = rng.standard_normal((5, 3))
    b = linear_game.best_reconstruction(a, x)
    base = np.linalg.norm(x @ a @ b - x)
    for _ in range(100):
        delta = rng.standard_normal(b.shape) * 1e-3
        assert np.linalg.norm(x @ a @ (b + delta) - x) >= base - 1e-12


# ---------------------------------------------------------------------------
# min_feasible_distortion / effective_rank / next_beta

def test_min_feasible_distortion_diagonal():
    svd = linear_game.SvdCache.from_matrix(np.diag([3.0, 2.0, 1.0]))
    assert linear_game.min_feasible_distortion(svd, 2) == pytest.approx(1.0)
    assert linear_game.min_feasible_distortion(svd, 1) == pytest.approx(5.0)
    assert linear_game.min_feasible_distortion(svd, 3) == pytest.approx(0.0)
    with pytest.raises(ValidationError):
        linear_game.min_feasible_distortion(svd, 4)


def test_effective_rank_threshold():
    assert linear_game.effective_rank(np.diag([1.0, 0.5, 0.005]), 0.01) == 2
    assert linear_game.effective_rank(np.zeros((3, 3)), 0.01) == 0


def test_effective_rank_of_truncated_construction():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((30, 6))
    svd = linear_game.SvdCache.from_matrix(x)
    k = 4
    m = svd.v[:, :k] @ np.diag(1.0 / svd.s[:k] ** 2) @ svd.v[:, :k].T
    # Well-conditioned standard normal X keeps all 1/s^2 within the eta band.
    assert linear_game.effective_rank(m, 0.01) == k


def test_next_beta_update_arithmetic():
    assert linear_game.next_beta(1.0, k_hat=5, k=3) == pytest.approx(1.5)
    assert linear_game.next_beta(1.0, k_hat=2, k=3) == pytest.approx(0.75)
    assert linear_game.next_beta(1.0, k_hat=3, k=3) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# solve_release_map

def test_release_map_zero_gamma_returns_data_exactly():
    gen = dataset.gen_linear_gaussian(40, 8, 1, 0.1, seed=1)
    rm = linear_game.solve_release_map(gen.x, gen.y, gamma=0.0, beta=0.1)
    svd = linear_game.SvdCache.from_matrix(gen.x)
    x_tilde = gen.x @ rm.m @ (gen.x.T @ gen.x)
    assert np.abs(x_tilde - gen.x).max() <= 1e-8
    assert rm.distortion <= 1e-12
    n_red = svd.v.T @ rm.m @ svd.v
    assert np.abs(n_red - np.diag(1.0 / svd.s**2)).max() <= 1e-10


def test_release_map_uncorrelated_labels_shrinks_to_zero():
    gen = dataset.gen_linear_gaussian(40, 8, 1, 0.1, seed=2)
    y0 = np.zeros((40, 1))
    gamma = float(np.sum(gen.x**2)) * 1.5
    rm = linear_game.solve_release_map(gen.x, y0, gamma=gamma, beta=0.1)
    assert np.linalg.norm(rm.m) <= 1e-8
    assert rm.effective_rank == 0


def test_release_map_beats_truncated_family():
    for seed in range(3):
        gen = dataset.gen_linear_gaussian(40, 8, 1, 0.1, seed=seed)
        svd = linear_game.SvdCache.from_matrix(gen.x)
        gamma = float(np.sum(svd.s[4:] ** 2)) * 1.1
        beta = 0.05
        rm = linear_game.solve_release_map(gen.x, gen.y, gamma, beta, svd=svd)
        q_lin, _ = reduced_objective(gen.x, gen.y, beta, svd)
        obj = float(np.tensordot(q_lin, svd.v.T @ rm.m @ svd.v))
        for j in range(1, svd.r + 1):
            if float(np.sum(svd.s[j:] ** 2)) <= gamma:
                n_j = np.diag(np.concatenate([1.0 / svd.s[:j] ** 2, np.zeros(svd.r - j)]))
                assert obj <= float(np.tensordot(q_lin, n_j)) + 1e-6
        assert np.linalg.eigvalsh(rm.m).min() >= -1e-8
        assert rm.distortion <= gamma + 1e-6


# ---------------------------------------------------------------------------
# run_linear_game

def test_run_linear_game_infeasible_gate():
    gen = dataset.gen_linear_gaussian(30, 6, 1, 0.1, seed=3)
    svd = linear_game.SvdCache.from_matrix(gen.x)
    bound = linear_game.min_feasible_distortion(svd, 3)
    cfg = linear_game.LinearGameConfig(gamma=0.5 * bound, k=3)
    with pytest.raises(InfeasibleDistortion) as err:
        linear_game.run_linear_game(gen.x, gen.y, cfg)
    assert f"{bound:.6g}" in str(err.value)


def test_run_linear_game_full_rank_zero_gamma():
    # Well-conditioned X (raw standard normal, condition number < 10).
    rng = np.random.default_rng(8)
    x = rng.standard_normal((30, 5))
    y = rng.standard_normal((30, 1))
    cfg = linear_game.LinearGameConfig(gamma=0.0, k=5)
    x_tilde, rm = linear_game.run_linear_game(x, y, cfg)
    assert np.abs(x_tilde - x).max() <= 1e-8
    assert rm.effective_rank == 5


def test_run_linear_game_attains_calibrated_ranks():
    gen = dataset.gen_linear_gaussian(120, 8, 8, 0.1, seed=4)
    for k in (3, 6):
        gamma = linear_game.calibrate_gamma_for_rank(gen.x, gen.y, k)
        cfg = linear_game.LinearGameConfig(gamma=gamma, k=k)
        x_tilde, rm = linear_game.run_linear_game(gen.x, gen.y, cfg)
        assert rm.effective_rank == k
        assert rm.distortion <= gamma + 1e-6
        assert np.linalg.eigvalsh(rm.m).min() >= -1e-8
        # Release rank matches the declared effective rank.
        sv = np.linalg.svd(x_tilde, compute_uv=False)
        assert int(np.sum(sv > 1e-7 * sv[0])) <= k


def test_run_linear_game_rank_not_attained_reports_closest():
    gen = dataset.gen_linear_gaussian(60, 6, 6, 0.05, seed=5)
    # A budget calibrated for rank 3 cannot yield rank 6 in two outer rounds.
    gamma = linear_game.calibrate_gamma_for_rank(gen.x, gen.y, 3)
    cfg = linear_game.LinearGameConfig(gamma=gamma, k=6, max_outer=2)
    with pytest.raises(RankNotAttained) as err:
        linear_game.run_linear_game(gen.x, gen.y, cfg)
    assert err.value.target == 6
    assert 1 <= err.value.closest < 6


# ---------------------------------------------------------------------------
# noisy_linear_objective

def test_noisy_objective_zero_noise_matches_closed_forms():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((30, 4))
    y = rng.standard_normal((30, 2))
    a = rng.standard_normal((4, 2))
    noise = linear_game.NoiseSpec(sigma=np.zeros((2, 2)))
    att, rec = linear_game.noisy_linear_objective(a, noise, x, y)
    mom = linear_game.cross_moments(x, y)
    theta = linear_game.attacker_theta(a, mom)
    att_ref = linear_game.attacker_loss(theta, a, x, y)
    b = linear_game.best_reconstruction(a, x)
    rec_ref = float(np.sum((x @ a @ b - x) ** 2))
    assert abs(att - att_ref) <= 1e-10
    assert abs(rec - rec_ref) <= 1e-10


def test_noisy_objective_huge_noise_kills_predictor():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((20, 3))
    y = rng.standard_normal((20, 1))
    a = rng.standard_normal((3, 2))
    noise = linear_game.NoiseSpec(sigma=(1e6**2) * np.eye(2))
    att, _ = linear_game.noisy_linear_objective(a, noise, x, y)
    mean_sq = float(np.sum(y**2)) / 20
    assert abs(att - mean_sq) <= 1e-3 * mean_sq


def test_noisy_objective_monte_carlo_oracle():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((25, 3))
    y = rng.standard_normal((25, 1))
    a = rng.standard_normal((3, 2))
    sigma = np.array([[0.5, 0.1], [0.1, 0.3]])
    noise = linear_game.NoiseSpec(sigma=sigma)
    att, rec = linear_game.noisy_linear_objective(a, noise, x, y)

    mom = linear_game.cross_moments(x, y)
    gram = a.T @ mom.c_xx @ a + sigma
    theta = np.linalg.solve(gram, a.T @ mom.c_xy)
    b = np.linalg.solve(gram, a.T @ mom.c_xx)
    chol = np.linalg.cholesky(sigma)
    draws = 100_000
    att_mc = 0.0
    rec_mc = 0.0
    batch = 5000
    done = 0
    while done < draws:
        m = min(batch, draws - done)
        eps = rng.standard_normal((m, 25, 2)) @ chol.T
        code = x @ a + eps  # (m, 25, 2)
        pred = code @ theta
        att_mc += float(np.sum((pred - y) ** 2)) / 25
        recon = code @ b
        rec_mc += float(np.sum((recon - x) ** 2))
        done += m
    att_mc /= draws
    rec_mc /= draws
    assert abs(att - att_mc) <= 1e-2 * abs(att_mc)
    assert abs(rec - rec_mc) <= 1e-2 * abs(rec_mc)


# ---------------------------------------------------------------------------
# linear_attack_eval

def test_attack_eval_perfect_recovery():
    gen = dataset.gen_linear_gaussian(100, 5, 1, 0.0, seed=12)
    split = dataset.split_and_batch(gen.x, gen.y, 0.8, seed=0)
    ev = linear_game.linear_attack_eval(gen.x, gen.y, split, gen.x)
    assert ev["r2"] >= 1.0 - 1e-8
    assert ev["rmse"] <= 1e-8
    assert ev["distortion"] == 0.0


def test_attack_eval_permuted_labels_near_zero_r2():
    rng = np.random.default_rng(13)
    gen = dataset.gen_linear_gaussian(500, 5, 1, 0.05, seed=13)
    y_perm = gen.y[rng.permutation(500)]
    split = dataset.split_and_batch(gen.x, y_perm, 0.8, seed=1)
    ev = linear_game.linear_attack_eval(gen.x, y_perm, split, gen.x)
    assert ev["r2"] <= 0.05


def test_attack_rmse_non_increasing_in_rank():
    # Trend invariant over seeds: higher kept rank, better attacker.
    ranks = (3, 5, 7)
    means = {k: [] for k in ranks}
    for seed in range(10):
        gen = dataset.gen_linear_gaussian(120, 9, 9, 0.1, seed=seed)
        split = dataset.split_and_batch(gen.x, gen.y, 0.8, seed=100 + seed)
        for k in ranks:
            gamma = linear_game.calibrate_gamma_for_rank(gen.x, gen.y, k)
            x_tilde, _ = linear_game.run_linear_game(
                gen.x, gen.y, linear_game.LinearGameConfig(gamma=gamma, k=k))
            ev = linear_game.linear_attack_eval(x_tilde, gen.y, split, gen.x)
            means[k].append(ev["rmse"])
    avg = {k: np.mean(means[k]) for k in ranks}
    assert avg[3] >= avg[5] >= avg[7]
