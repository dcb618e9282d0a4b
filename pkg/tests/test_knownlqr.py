import math

import numpy as np
import pytest
import scipy.linalg as sla

from safeswitch import knownlqr as kl
from safeswitch.errors import DegenerateError, StabilityError, UnstabilizableError, ValidationError
from safeswitch.plant import CostMatrices, ModeBounds, ModeDynamics

GOLDEN = (1 + math.sqrt(5)) / 2
UNIT = CostMatrices([[1.0]], [[1.0]])


def scalar(a, b):
    return ModeDynamics([[a]], [[b]])


def fixed(P, H):
    P, H = np.asarray(P, float), np.asarray(H, float)
    return kl.FixedPolicyData(np.zeros((1, P.shape[0])), P, H, np.eye(P.shape[0]), float(np.trace(P)))


# -------------------------------------------------------------------- DARE


def test_dare_zero_dynamics():
    sol = kl.solve_dare(scalar(0, 1), UNIT)
    assert np.allclose(sol.P_star, 1) and np.allclose(sol.K_star, 0)


def test_dare_golden_ratio():
    sol = kl.solve_dare(scalar(1, 1), UNIT)
    assert sol.P_star[0, 0] == pytest.approx(GOLDEN, abs=1e-9)
    assert sol.K_star[0, 0] == pytest.approx(-(GOLDEN - 1), abs=1e-9)
    assert sol.J_star == pytest.approx(GOLDEN, abs=1e-9)


def test_dare_unstabilizable():
    with pytest.raises(UnstabilizableError):
        kl.solve_dare(scalar(2, 0), UNIT)


@pytest.mark.parametrize("seed", range(5))
def test_dare_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3)) / np.sqrt(3)
    B = rng.standard_normal((3, 2))
    Q, R = np.diag([1.0, 2.0, 0.5]), np.diag([1.0, 3.0])
    sol = kl.solve_dare(ModeDynamics(A, B), CostMatrices(Q, R), sigma_w=0.5)
    P = sla.solve_discrete_are(A, B, Q, R)
    assert np.allclose(sol.P_star, P, rtol=1e-7, atol=1e-8)
    assert np.allclose(sol.K_star, -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A), atol=1e-7)
    assert sol.J_star == pytest.approx(0.25 * np.trace(P), rel=1e-7)
    assert np.max(np.abs(sol.P_star - kl.riccati_map(sol.P_star, ModeDynamics(A, B), CostMatrices(Q, R)))) < 1e-8


# -------------------------------------------------------------------- exact SDP


def test_exact_sdp_scalar():
    res = kl.exact_sdp(scalar(1, 1), UNIT)
    assert res.J_star == pytest.approx(GOLDEN, abs=1e-5)
    assert res.K[0, 0] == pytest.approx(-(GOLDEN - 1), abs=1e-4)
    assert res.primal_value == pytest.approx(res.dual_value, abs=1e-5)


def test_exact_sdp_no_dynamics():
    res = kl.exact_sdp(scalar(0, 1), UNIT)
    assert res.P_dual[0, 0] == pytest.approx(1.0, abs=1e-5)
    assert res.J_star == pytest.approx(1.0, abs=1e-5)


@pytest.mark.parametrize("seed", range(3))
def test_exact_sdp_matches_dare(seed):
    rng = np.random.default_rng(100 + seed)
    dyn = ModeDynamics(rng.standard_normal((2, 2)) / np.sqrt(2), rng.standard_normal((2, 1)))
    costs = CostMatrices(np.eye(2), np.eye(1))
    dare = kl.solve_dare(dyn, costs)
    res = kl.exact_sdp(dyn, costs)
    assert abs(res.J_star - dare.J_star) / dare.J_star <= 1e-4
    assert np.allclose(res.K, dare.K_star, atol=1e-4)


def test_exact_sdp_rejects_singular_W():
    with pytest.raises(ValidationError):
        kl.exact_sdp(scalar(1, 1), UNIT, W=np.zeros((1, 1)))


# -------------------------------------------------------------------- fixed policies


def test_fixed_policy_open_loop_geometric_series():
    d = kl.fixed_policy_data(scalar(0.5, 0), np.zeros((1, 1)), UNIT)
    assert d.P_K[0, 0] == pytest.approx(4 / 3, abs=1e-10)


def test_fixed_policy_deadbeat():
    d = kl.fixed_policy_data(scalar(0.5, 1), np.array([[-0.5]]), UNIT)
    assert d.P_K[0, 0] == pytest.approx(1.25, abs=1e-12)


def test_fixed_policy_at_optimum():
    dyn = scalar(1, 1)
    dare = kl.solve_dare(dyn, UNIT)
    d = kl.fixed_policy_data(dyn, dare.K_star, UNIT)
    assert np.allclose(d.P_K, dare.P_star, atol=1e-8)
    assert d.J == pytest.approx(dare.J_star, abs=1e-8)


def test_fixed_policy_matches_scipy_lyapunov():
    A = np.array([[0.9, 0.3], [0.0, 0.5]])
    B = np.array([[0.0], [1.0]])
    K = np.array([[-0.2, -0.1]])
    costs = CostMatrices(np.eye(2), [[2.0]])
    d = kl.fixed_policy_data(ModeDynamics(A, B), K, costs, sigma_w=0.7)
    L = A + B @ K
    assert np.allclose(d.P_K, sla.solve_discrete_lyapunov(L.T, np.eye(2) + 2 * K.T @ K), atol=1e-9)
    assert np.allclose(d.Sigma_xx, sla.solve_discrete_lyapunov(L, 0.49 * np.eye(2)), atol=1e-9)
    dare = kl.solve_dare(ModeDynamics(A, B), costs, sigma_w=0.7)
    # two routes to the same policy cost
    assert kl.policy_cost_via_gap(ModeDynamics(A, B), K, costs, 0.7, dare) == pytest.approx(d.J, abs=1e-6)


def test_fixed_policy_unstable():
    with pytest.raises(StabilityError):
        kl.fixed_policy_data(scalar(1.2, 0), np.zeros((1, 1)), UNIT)


# -------------------------------------------------------------------- dwell


def test_dwell_operators_identity_multiples():
    assert kl.dwell_operators_fixed(fixed(3 * np.eye(2), 3 * np.eye(2)), fixed(3 * np.eye(2), np.eye(2))) == \
        pytest.approx((1, 1, 1))


def test_dwell_operators_diagonal():
    eta, rho, chi = kl.dwell_operators_fixed(fixed(np.diag([1, 2]), np.eye(2)), fixed(np.diag([2, 4]), np.eye(2)))
    assert (eta, rho, chi) == pytest.approx((0.5, 4, 1))


def test_dwell_operators_singular():
    with pytest.raises(DegenerateError):
        kl.dwell_operators_fixed(fixed(np.diag([0.0, 1.0]), np.eye(2)), fixed(np.eye(2), np.eye(2)))


def test_dwell_from_operators_examples():
    d = kl.dwell_from_operators(0.5, 1, 1, 0.9)
    assert d.raw == pytest.approx(-math.log(0.9) / math.log(2), abs=1e-12)
    assert d.raw == pytest.approx(0.152, abs=1e-3) and d.tau == 1 and d.malignant
    d = kl.dwell_from_operators(0.5, 2, 1.5, 0.9)
    assert d.raw == pytest.approx(1.737, abs=1e-3) and d.tau == 2 and d.malignant


def test_dwell_benign_is_one():
    d = kl.dwell_from_operators(0.1, 0.5, 1.0, 0.9)
    assert not d.malignant and d.tau == 1


def test_dwell_boundary_is_benign():
    d = kl.dwell_from_operators(0.3, 0.9, 1.0, 0.9)
    assert not d.malignant and d.tau == 1


def test_dwell_eta_one_degenerate():
    d = kl.dwell_from_operators(1.0, 2.0, 2.0, 0.5)
    assert d.degenerate and d.tau == 1


def test_dwell_rejects_alpha():
    with pytest.raises(ValidationError):
        kl.dwell_from_operators(0.5, 1, 1, 1.0)


def test_dwell_star_identical_modes():
    dare = kl.solve_dare(scalar(1, 1), UNIT)
    d = kl.dwell_star(dare, UNIT, dare, 0.9)
    assert d.rho * d.chi_cross == pytest.approx(1) and d.tau == 1


def test_dwell_star_two_scalar_modes():
    d1 = kl.solve_dare(scalar(1, 1), UNIT)
    d2 = kl.solve_dare(scalar(2, 0.5), UNIT)
    H1 = 1 + d1.K_star[0, 0] ** 2
    P1, P2 = d1.P_star[0, 0], d2.P_star[0, 0]
    raw = -(math.log(P2 / P1) + math.log(P1 / P2) - math.log(0.5)) / math.log(1 - H1 / P1)
    assert kl.dwell_star(d1, UNIT, d2, 0.5).tau == max(1, math.ceil(raw))
    raw = -(math.log(P2 / P1) + math.log(P1 / P2) - math.log(0.01)) / math.log(1 - H1 / P1)
    assert kl.dwell_star(d1, UNIT, d2, 0.01).tau == max(1, math.ceil(raw))


def test_dwell_star_monotone_in_alpha():
    d1 = kl.solve_dare(scalar(1, 1), UNIT)
    d2 = kl.solve_dare(scalar(0.3, 0.2), CostMatrices([[5.0]], [[1.0]]))
    taus = [kl.dwell_star(d1, UNIT, d2, a).tau for a in np.linspace(0.001, 0.999, 60)]
    assert all(x >= y for x, y in zip(taus, taus[1:])) and min(taus) >= 1 and taus[0] > 1


# -------------------------------------------------------------------- bounds


def test_beta_bar_examples():
    assert kl.beta_bar(1, 0.5, 1, 1) == pytest.approx(64)
    assert kl.beta_bar(1, 0.25, 1, 1) == pytest.approx(4 * kl.beta_bar(1, 0.5, 1, 1))
    assert kl.beta_bar(200, 0.5, 1, 1) / kl.beta_bar(100, 0.5, 1, 1) == pytest.approx(2**8, rel=1e-3)
    with pytest.raises(ValidationError):
        kl.beta_bar(1, 0.5, 0, 1)


def test_baseline_cost_examples():
    assert kl.baseline_cost([(1, 1.618034), (1, 1.618034)]) == pytest.approx(3.236068)
    assert kl.baseline_cost([]) == 0
    assert kl.baseline_cost([(3, 2.0)]) == 6
    with pytest.raises(ValidationError):
        kl.baseline_cost([(0, 1.0)])


def test_bound_calculators_examples():
    b = kl.bound_calculators(4, [1.618], np.array([[1]]))
    assert (b.L1, b.U3, b.gap) == pytest.approx((6.472, 6.472, 0))
    b = kl.bound_calculators(2, [1, 2], np.array([[1, 2], [3, 1]]))
    assert (b.L1, b.U3, b.gap) == pytest.approx((2, 12, 10))
    assert kl.bound_calculators(0, [1, 2], np.ones((2, 2))) == kl.BoundSummary(0, 0, 0)


def test_kappa_gamma_scalar():
    c = kl.kappa_gamma_decompose(np.array([[0.5]]))
    assert (c.H[0, 0], c.L[0, 0], c.kappa, c.gamma) == pytest.approx((1, 0.5, 1, 0.25))


def test_kappa_gamma_nilpotent():
    c = kl.kappa_gamma_decompose(np.zeros((2, 2)))
    assert c.gamma == 0.5 and np.allclose(c.L, 0)


def test_kappa_gamma_jordan_block():
    M = np.array([[0.5, 1.0], [0.0, 0.5]])
    c = kl.kappa_gamma_decompose(M)
    assert c.kappa > 1
    assert np.max(np.abs(c.H @ c.L @ np.linalg.inv(c.H) - M)) <= 1e-8
    assert np.linalg.norm(c.L, 2) <= 1 - c.gamma + 1e-10
    assert np.linalg.cond(c.H) <= c.kappa * (1 + 1e-10)


def test_kappa_gamma_unstable():
    with pytest.raises(StabilityError):
        kl.kappa_gamma_decompose(np.array([[1.0]]))


def test_tau_dw_max_examples():
    val, flag = kl.tau_dw_max([ModeBounds(1, 1, 1, 2)], 1.0)
    assert not flag and val == pytest.approx(-math.log(2) / math.log(1 - 0.125), abs=1e-12)
    assert val == pytest.approx(5.19, abs=0.01)
    # kappa = e needs nu = e^2 / 2 with alpha0 = sigma = 1
    val, _ = kl.tau_dw_max([ModeBounds(1, 1, 1, math.e**2 / 2)], 1.0)
    assert val == pytest.approx(-1 / math.log(1 - 1 / (2 * math.e**2)), rel=1e-12)
    both, _ = kl.tau_dw_max([ModeBounds(1, 1, 1, 2), ModeBounds(1, 1, 1, math.e**2 / 2)], 1.0)
    assert both == pytest.approx(val)
    assert kl.tau_dw_max([ModeBounds(1, 1, 1, 0.4)], 1.0) == (1.0, True)


def test_policy_class_contains():
    assert kl.policy_class_contains(np.zeros((1, 1)), scalar(0.5, 1), 1, 0.4)
    assert not kl.policy_class_contains(np.zeros((1, 1)), scalar(0.7, 1), 1, 0.4)
    assert kl.policy_class_contains(np.array([[-0.5]]), scalar(0.5, 1), 0.5, 0.4)
    assert not kl.policy_class_contains(np.array([[-0.5]]), scalar(0.5, 1), 0.49, 0.4)


# -------------------------------------------------------------------- invariants


def test_policy_cost_dominates_optimum():
    rng = np.random.default_rng(7)
    dyn = ModeDynamics([[0.8, 0.3], [0.0, 0.6]], [[0.0], [1.0]])
    costs = CostMatrices(np.eye(2), np.eye(1))
    dare = kl.solve_dare(dyn, costs)
    for _ in range(20):
        K = dare.K_star + 0.2 * rng.standard_normal((1, 2))
        if kl.spectral_radius(dyn.closed_loop(K)) >= 1:
            continue
        d = kl.fixed_policy_data(dyn, K, costs)
        assert d.J >= dare.J_star - 1e-9
        assert np.linalg.eigvalsh(d.P_K - d.H_K).min() >= -1e-9
        c = kl.kappa_gamma_decompose(dyn.closed_loop(K))
        assert np.linalg.norm(d.P_K, 2) <= c.kappa**2 / c.gamma * np.linalg.norm(d.H_K, 2) + 1e-9


def test_operators_invariant_under_rotation():
    P_i, H_i, P_j = np.array([[2.0, 0.3], [0.3, 1.0]]), np.array([[1.0, 0.1], [0.1, 0.5]]), np.diag([3.0, 0.7])
    t = 0.4
    U = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    a = kl.spectral_operators(P_i, H_i, P_j)
    b = kl.spectral_operators(U @ P_i @ U.T, U @ H_i @ U.T, U @ P_j @ U.T)
    assert a == pytest.approx(b, rel=1e-12)
