import dataclasses
import math

import numpy as np
import pytest

from safeswitch import knownlqr, ofu, sdp, sysid
from safeswitch.errors import CertificationError, PreconditionError, ValidationError
from safeswitch.plant import CostMatrices, ModeBounds, ModeDynamics

GOLDEN = (1 + math.sqrt(5)) / 2
UNIT = CostMatrices([[1.0]], [[1.0]])
W1 = np.eye(1)


def conf_for(theta, V, r=0.0):
    theta = np.atleast_2d(np.asarray(theta, float))
    V = np.atleast_2d(np.asarray(V, float))
    return sysid.ConfidenceSet(theta, V, r, float(np.linalg.eigvalsh(V)[0]), 0.1, 100, 1.0, 0.0)


def test_primal_shapes_scalar():
    prob = ofu.build_relaxed_primal(conf_for([[1.0], [1.0]], np.eye(2)), UNIT, 0.0, W1)
    assert prob.block_dims == {"Sigma": 2}
    lmis = [c for c in prob.constraints if c.kind == "psd" and c.name != "Sigma>=0"]
    assert [c.dim for c in lmis] == [1]


def test_primal_zero_mu_matches_exact():
    conf = conf_for([[1.0], [1.0]], np.eye(2))
    sol = sdp.solve(ofu.build_relaxed_primal(conf, UNIT, 0.0, W1))
    assert sol.objective == pytest.approx(GOLDEN, abs=1e-5)
    assert sol.objective == pytest.approx(knownlqr.exact_sdp(ModeDynamics([[1.0]], [[1.0]]), UNIT).J_star, abs=1e-5)


def test_primal_accepts_hand_feasible_point():
    # stationary covariance of A + BK with K = -0.5: x variance 1/(1 - 0.25)
    conf = conf_for([[1.0], [1.0]], np.eye(2))
    prob = ofu.build_relaxed_primal(conf, UNIT, 0.0, W1)
    s = 4 / 3
    Sigma = np.array([[s, -0.5 * s], [-0.5 * s, 0.25 * s]])
    rep = sdp.check_solution(prob, {"Sigma": Sigma})
    assert rep.max_violation >= -1e-9
    assert rep.objective == pytest.approx(s * 1.25)


def test_solve_relaxed_zero_mu_is_dare():
    sol = ofu.solve_relaxed(conf_for([[1.0], [1.0]], np.eye(2)), UNIT, 0.0, W1)
    assert sol.K[0, 0] == pytest.approx(-(GOLDEN - 1), abs=1e-4)
    assert sol.P[0, 0] == pytest.approx(GOLDEN, abs=1e-4)
    assert sol.primal_value == pytest.approx(sol.dual_value, abs=1e-5)
    assert ofu.verify_dual_identity(sol, UNIT) <= 1e-5


@pytest.mark.parametrize("mu", [1e-4, 1e-3, 1e-2])
def test_relaxation_is_optimistic(mu):
    conf = conf_for([[1.0], [1.0]], 100 * np.eye(2))
    sol = ofu.solve_relaxed(conf, UNIT, mu, W1)
    assert float(np.sum(sol.P * W1)) <= GOLDEN + 1e-6
    assert ofu.verify_dual_identity(sol, UNIT) <= 1e-5


def test_relaxed_matches_exact_on_matrix_mode():
    dyn = ModeDynamics([[0.9, 0.2], [0.0, 0.7]], [[0.0], [1.0]])
    costs = CostMatrices(np.eye(2), np.eye(1))
    sol = ofu.solve_relaxed(conf_for(dyn.theta, np.eye(3)), costs, 0.0, np.eye(2))
    dare = knownlqr.solve_dare(dyn, costs)
    assert np.allclose(sol.K, dare.K_star, atol=1e-4)
    assert np.allclose(sol.P, dare.P_star, atol=1e-4)


def test_precondition_refusal():
    b = ModeBounds(1.0, 1.0, 2.0, 5.0)
    conf = conf_for([[1.0], [1.0]], np.eye(2), r=0.5)
    assert ofu.precondition_margin(conf, 1.0, b, 1.0) < 0
    with pytest.raises(PreconditionError):
        ofu.solve_relaxed(conf, UNIT, 1.0, W1, bounds=b, sigma_w=1.0)


def test_verify_dual_identity_detects_perturbation():
    sol = ofu.solve_relaxed(conf_for([[1.0], [1.0]], np.eye(2)), UNIT, 0.0, W1)
    bad = dataclasses.replace(sol, P=sol.P + 0.1 * np.eye(1))
    assert ofu.verify_dual_identity(bad, UNIT) > 0.05


def test_stability_params_examples():
    c = ofu.stability_params(ModeBounds(1.0, 1.0, 1.0, 2.0), 1.0)
    assert (c.kappa, c.gamma) == pytest.approx((2.0, 0.125))
    c = ofu.stability_params(ModeBounds(1.0, 1.0, 1.0, 0.5), 1.0)
    assert (c.kappa, c.gamma) == pytest.approx((1.0, 0.5))
    ks = [ofu.stability_params(ModeBounds(1.0, 1.0, 1.0, nu), 1.0).kappa for nu in (1, 2, 4, 8)]
    assert ks == sorted(ks)


def test_h_matrix_hand_instance():
    conf = conf_for([[1.0], [1.0]], 4 * np.eye(2))
    sol = ofu.RelaxedSolution(np.eye(2), np.array([[-0.5]]), np.array([[2.0]]), 0.1, conf, 0.0, 0.0)
    # Y'V^-1Y = (1 + 0.25) / 4
    assert ofu.h_matrix(sol, UNIT)[0, 0] == pytest.approx(1.25 - 2 * 0.1 * 2.0 * 1.25 / 4)
    zero = dataclasses.replace(sol, mu=0.0)
    assert ofu.h_matrix(zero, UNIT)[0, 0] == pytest.approx(1.25)


def test_chi_hand_instance():
    conf = conf_for([[1.0], [1.0]], 4 * np.eye(2))
    sol = ofu.RelaxedSolution(np.eye(2), np.array([[-0.5]]), np.array([[2.0]]), 0.1, conf, 0.0, 0.0)
    cert = ofu.StabilityCert(2.0, 0.125)
    assert ofu.chi_diagnostic(sol, cert)[0, 0] == pytest.approx(2 * 4 * 0.1 / 0.125 * 2.0 * 1.25 / 4)
    assert ofu.chi_diagnostic(dataclasses.replace(sol, mu=0.0), cert)[0, 0] == 0


def test_chi_shrinks_with_data():
    b = ModeBounds(1.0, 1.0, 2.0, 4.0)
    cert = ofu.stability_params(b, 1.0)
    sizes = []
    for scale in (1e4, 1e5, 1e6):
        conf = conf_for([[0.9], [1.0]], scale * np.eye(2), r=1.0)
        mu = sysid.mu_inflation(conf, b.vartheta)
        sol = ofu.solve_relaxed(conf, UNIT, mu, W1, bounds=b, sigma_w=1.0)
        sizes.append(ofu.chi_diagnostic(sol, cert)[0, 0])
    assert sizes[0] > sizes[1] > sizes[2]


def test_h_lower_bound_on_synthesized_solution():
    b = ModeBounds(1.0, 1.0, 2.0, 4.0)
    conf = conf_for([[0.9], [1.0]], 1e4 * np.eye(2), r=1.0)
    mu = sysid.mu_inflation(conf, b.vartheta)
    sol = ofu.solve_relaxed(conf, UNIT, mu, W1, bounds=b, sigma_w=1.0)
    assert np.linalg.eigvalsh(ofu.h_matrix(sol, UNIT))[0] >= b.alpha0 / 2


def test_tau_estimate_collapses_to_dwell_star():
    dyn = ModeDynamics([[1.0]], [[1.0]])
    sol = ofu.solve_relaxed(conf_for(dyn.theta, np.eye(2)), UNIT, 0.0, W1)
    dare = knownlqr.solve_dare(dyn, UNIT)
    est = ofu.tau_estimate(sol, sol.P, UNIT, 0.9)
    ref = knownlqr.dwell_star(dare, UNIT, dare, 0.9)
    assert est.tau == ref.tau == 1
    assert est.decision.eta == pytest.approx(ref.eta, abs=1e-5)


def test_tau_estimate_hand_example():
    conf = conf_for(np.zeros((3, 2)), np.eye(3))
    # mu = 0 and K = 0 make H = Q, so choose Q to give lambda_min(H) = 0.5
    costs = CostMatrices(np.diag([0.5, 1.0]), [[1.0]])
    sol = ofu.RelaxedSolution(np.eye(3), np.zeros((1, 2)), np.diag([1.0, 2.0]), 0.0, conf, 0.0, 0.0)
    est = ofu.tau_estimate(sol, np.diag([2.0, 4.0]), costs, 0.9)
    eta, rho, chi = 0.5 / 2.0, 4.0 / 1.0, 2.0 / 2.0
    raw = -(math.log(rho) + math.log(chi) - math.log(0.9)) / math.log(1 - eta)
    assert (est.decision.eta, est.decision.rho, est.decision.chi_cross) == pytest.approx((eta, rho, chi))
    assert est.tau == math.ceil(raw)


def test_tau_estimate_rejects_bad_eta():
    conf = conf_for([[1.0], [1.0]], np.eye(2))
    sol = ofu.RelaxedSolution(np.eye(2), np.array([[0.0]]), np.array([[1.0]]), 1.0, conf, 0.0, 0.0)
    with pytest.raises(CertificationError):
        ofu.tau_estimate(sol, np.eye(1), UNIT, 0.9)


def test_dwell_error_bound_examples():
    b = ModeBounds(1.0, 1.0, 1.0, 2.0)
    assert ofu.dwell_error_bound(0.0, b, b, 1.0, 2.0) == 0.0
    # nu = 2: alpha0_bar = sqrt(8), beta0_bar = 1/2
    val = ofu.dwell_error_bound(3 * np.eye(2), b, b, 1.0, 2.0)
    assert val == pytest.approx(math.log(2.5) / -math.log(0.75))
    # nu = 1 gives beta0_bar = 1
    unit = ModeBounds(1.0, 1.0, 1.0, 1.0)
    assert ofu.dwell_error_bound(3.0, unit, unit, 1.0, 2.0) == pytest.approx(4.82, abs=0.01)
    vals = [ofu.dwell_error_bound(x, b, b, 1.0, 2.0) for x in (0.5, 1, 2, 4)]
    assert vals == sorted(vals)
    with pytest.raises(ValidationError):
        ofu.dwell_error_bound(1.0, b, b, 1.0, 1.0)


def test_sandwich_slacks_hand():
    lo, hi = ofu.sandwich_slacks(np.eye(2), 0.5 * np.eye(2), np.diag([1.2, 1.4]))
    assert lo == pytest.approx(0.2) and hi == pytest.approx(0.1)


def test_fault_injection_flips_gain():
    conf = conf_for([[1.0], [1.0]], np.eye(2))
    with ofu.inject_fault("flip-feedback-sign"):
        bad = ofu.solve_relaxed(conf, UNIT, 0.0, W1)
    good = ofu.solve_relaxed(conf, UNIT, 0.0, W1)
    assert bad.K[0, 0] == pytest.approx(-good.K[0, 0])
