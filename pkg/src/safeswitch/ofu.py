"""Optimistic synthesis from a confidence ellipsoid.

The relaxed covariance program and its dual are solved as two independent
SDPs. The primal gives the feedback gain, the dual gives the value matrix
used for dwell-time certification.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import knownlqr, sdp
from .errors import CertificationError, PreconditionError, SynthesisError, ValidationError
from .plant import CostMatrices, ModeBounds, ModeDynamics
from .sysid import ConfidenceSet

log = logging.getLogger(__name__)

ETA_CLAMP = 1e-12
eta_clamp_warnings = 0

# Test-only fault injection; see inject_fault().
_feedback_sign = 1.0


@contextlib.contextmanager
def inject_fault(kind: str = "flip-feedback-sign"):
    """Temporarily corrupt the gain extraction (used by the self-test harness)."""
    global _feedback_sign
    if kind != "flip-feedback-sign":
        raise ValidationError(f"unknown fault {kind!r}")
    _feedback_sign = -1.0
    try:
        yield
    finally:
        _feedback_sign = 1.0


def build_relaxed_primal(conf: ConfidenceSet, costs: CostMatrices, mu: float, W: np.ndarray) -> sdp.SdpProblem:
    if mu < 0:
        raise ValidationError("mu must be non-negative")
    theta = conf.theta_hat
    n = theta.shape[1]
    D = costs.block
    Vinv = conf.V_inv()
    prob = sdp.SdpProblem({"Sigma": theta.shape[0]}, "min")
    prob.set_objective(lambda X: np.sum(D * X["Sigma"]))

    def lmi(X):
        S = X["Sigma"]
        return S[:n, :n] - theta.T @ S @ theta - W + mu * np.sum(S * Vinv) * np.eye(n)

    prob.add_lmi(lmi, "covariance")
    return prob


def build_relaxed_dual(conf: ConfidenceSet, costs: CostMatrices, mu: float, W: np.ndarray) -> sdp.SdpProblem:
    if mu < 0:
        raise ValidationError("mu must be non-negative")
    theta = conf.theta_hat
    n = theta.shape[1]
    D = costs.block
    Vinv = conf.V_inv()
    prob = sdp.SdpProblem({"P": n}, "max")
    prob.set_objective(lambda X: np.sum(X["P"] * W))

    def lmi(X):
        P = X["P"]
        M = D + theta @ P @ theta.T - mu * np.trace(P) * Vinv
        M[:n, :n] -= P
        return M

    prob.add_lmi(lmi, "bellman")
    return prob


@dataclass(frozen=True)
class StabilityCert:
    kappa: float
    gamma: float


def stability_params(bounds: ModeBounds, sigma_w: float) -> StabilityCert:
    kappa = knownlqr.stability_kappa(bounds, sigma_w)
    return StabilityCert(kappa, 1.0 / (2.0 * kappa**2))


def precondition_margin(conf: ConfidenceSet, mu: float, bounds: ModeBounds, sigma_w: float) -> float:
    """lambda_min(V) minus the level the synthesized gain needs to be strongly stabilizing."""
    need = 4.0 * bounds.nu * mu / (bounds.alpha0 * sigma_w**2)
    return float(np.linalg.eigvalsh(conf.V)[0]) - need


@dataclass
class RelaxedSolution:
    Sigma: np.ndarray
    K: np.ndarray
    P: np.ndarray
    mu: float
    source_conf: ConfidenceSet
    primal_value: float
    dual_value: float
    primal: sdp.SdpSolution | None = None
    dual: sdp.SdpSolution | None = None

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def Y(self) -> np.ndarray:
        return np.vstack([np.eye(self.n), self.K])

    def uncertainty_gram(self) -> np.ndarray:
        """[I; K]' V^-1 [I; K], the n x n weight of the uncertainty terms."""
        Y = self.Y()
        return Y.T @ self.source_conf.V_inv() @ Y


def _solve_dual_problem(conf, costs, mu, W, tol):
    prob = build_relaxed_dual(conf, costs, mu, W)
    sol = sdp.solve(prob, tol=tol)
    if not sol.ok:
        raise SynthesisError(f"relaxed dual SDP ended with status {sol.status}")
    return prob, sol


def solve_relaxed_dual(conf: ConfidenceSet, costs: CostMatrices, mu: float, W: np.ndarray,
                       tol: float = 1e-7, *, full: bool = False):
    """Relaxed dual value matrix P; with ``full`` the (problem, solution) pair instead."""
    out = _solve_dual_problem(conf, costs, mu, W, tol)
    return out if full else out[1].blocks["P"]


def solve_relaxed(conf: ConfidenceSet, costs: CostMatrices, mu: float, W: np.ndarray, *,
                  bounds: ModeBounds | None = None, sigma_w: float | None = None,
                  tol: float = 1e-7, debug_path=None, dual=None) -> RelaxedSolution:
    """Solve both relaxed programs and extract K = Sigma_ux Sigma_xx^-1.

    When ``bounds`` and ``sigma_w`` are given, the regularization precondition
    on V is checked first and a violation raises PreconditionError. ``dual``
    may carry an already solved (problem, solution) pair for the same set.
    """
    if bounds is not None:
        if sigma_w is None:
            raise ValidationError("sigma_w is required with bounds")
        margin = precondition_margin(conf, mu, bounds, sigma_w)
        if margin < -1e-9 * max(1.0, float(np.linalg.eigvalsh(conf.V)[-1])):
            raise PreconditionError(
                f"lambda_min(V) falls short of 4 nu mu / (alpha0 sigma^2) by {-margin:.6g}")
    n = conf.theta_hat.shape[1]
    pprob = build_relaxed_primal(conf, costs, mu, W)
    ps = sdp.solve(pprob, tol=tol)
    dprob, ds = _solve_dual_problem(conf, costs, mu, W, tol) if dual is None else dual
    if debug_path is not None:
        sdp.dump_debug(debug_path, pprob, ps, dual_problem=None if dprob is None else dprob.to_dict(),
                       dual_solution=ds.to_dict(), mu=mu)
    if not ps.ok:
        raise SynthesisError(f"relaxed primal SDP ended with status {ps.status}")
    S = ps.blocks["Sigma"]
    Sxx = S[:n, :n]
    if np.linalg.cond(Sxx) > 1e12:
        raise SynthesisError("state covariance block is numerically singular")
    K = _feedback_sign * np.linalg.solve(Sxx, S[:n, n:]).T
    return RelaxedSolution(S, K, ds.blocks["P"], float(mu), conf, ps.objective, ds.objective, ps, ds)


def h_matrix(sol: RelaxedSolution, costs: CostMatrices) -> np.ndarray:
    H = costs.Q + sol.K.T @ costs.R @ sol.K - 2.0 * sol.mu * np.trace(sol.P) * sol.uncertainty_gram()
    return 0.5 * (H + H.T)


@dataclass(frozen=True)
class OnlineDwell:
    decision: knownlqr.DwellDecision
    H: np.ndarray

    @property
    def tau(self) -> int:
        return self.decision.tau


def tau_estimate(sol_i: RelaxedSolution, P_j: np.ndarray, costs_i: CostMatrices,
                 alpha_bar: float) -> OnlineDwell:
    """Certified dwell time for the switch i -> j from the optimistic solutions."""
    global eta_clamp_warnings
    H = h_matrix(sol_i, costs_i)
    eta, rho, chi = knownlqr.spectral_operators(sol_i.P, H, P_j)
    if not 0.0 < eta < 1.0:
        raise CertificationError(f"contraction rate {eta:.6g} outside (0, 1)")
    if eta < ETA_CLAMP or eta > 1.0 - ETA_CLAMP:
        eta_clamp_warnings += 1
        log.warning("clamping contraction rate %.3g", eta)
        eta = min(max(eta, ETA_CLAMP), 1.0 - ETA_CLAMP)
    return OnlineDwell(knownlqr.dwell_from_operators(eta, rho, chi, alpha_bar), H)


def chi_diagnostic(sol: RelaxedSolution, cert: StabilityCert) -> np.ndarray:
    scale = 2.0 * cert.kappa**2 * sol.mu / cert.gamma
    g = float(np.linalg.norm(sol.uncertainty_gram(), 2))
    return scale * float(np.trace(sol.P)) * g * np.eye(sol.n)


def dwell_error_bound(chi_i: np.ndarray | float, bounds_i: ModeBounds, bounds_j: ModeBounds,
                      sigma_w: float, kappa_i: float, nu_all: Sequence[float] | None = None) -> float:
    """Upper bound on tau_es - tau* for the switch i -> j.

    ``nu_all`` lists the cost bounds of every mode; it defaults to the pair.
    """
    if kappa_i <= 1.0:
        raise ValidationError("the dwell error bound needs kappa > 1")
    lam = float(np.max(np.linalg.eigvalsh(np.atleast_2d(chi_i)))) if np.ndim(chi_i) else float(chi_i)
    nus = list(nu_all) if nu_all is not None else [bounds_i.nu, bounds_j.nu]
    a0 = max(math.sqrt(2.0 * bounds_i.nu * nu) for nu in nus) / sigma_w**2
    b0 = 2.0 * bounds_j.nu / (sigma_w**2 * a0**2)
    return math.log1p(b0 * max(lam, 0.0)) / -math.log1p(-kappa_i**-2)


def verify_dual_identity(sol: RelaxedSolution, costs: CostMatrices) -> float:
    """Frobenius residual of P = H_K + L'PL - mu tr(P) [I;K]'V^-1[I;K] at the estimate."""
    th = sol.source_conf.theta_hat
    n = sol.n
    L = th[:n].T + th[n:].T @ sol.K
    rhs = (costs.Q + sol.K.T @ costs.R @ sol.K + L.T @ sol.P @ L
           - sol.mu * np.trace(sol.P) * sol.uncertainty_gram())
    return float(np.linalg.norm(sol.P - rhs, "fro"))


def perturbation_slack(sol: RelaxedSolution, dyn: ModeDynamics, costs: CostMatrices) -> float:
    """Smallest eigenvalue of P - [H_K + L*'PL* - 2 mu tr(P) [I;K]'V^-1[I;K]] under the true dynamics."""
    L = dyn.closed_loop(sol.K)
    rhs = h_matrix(sol, costs) + L.T @ sol.P @ L
    return float(np.linalg.eigvalsh(0.5 * (sol.P - rhs + (sol.P - rhs).T))[0])


def sandwich_slacks(P_hat: np.ndarray, chi: np.ndarray, P_true: np.ndarray) -> tuple[float, float]:
    """(lambda_min(P_true - P_hat), lambda_min(P_hat + chi - P_true))."""
    lo = np.linalg.eigvalsh(0.5 * ((P_true - P_hat) + (P_true - P_hat).T))[0]
    hi = np.linalg.eigvalsh(0.5 * ((P_hat + chi - P_true) + (P_hat + chi - P_true).T))[0]
    return float(lo), float(hi)
