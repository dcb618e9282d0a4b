"""Known-parameter LQR machinery.

Everything here assumes the true dynamics are given: Riccati and Lyapunov
solutions, the exact covariance SDP, fixed-policy dwell times, the benchmark
strategy's dwell time and cost, and the closed-form bound calculators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import kernels, sdp
from .errors import DegenerateError, SynthesisError, StabilityError, UnstabilizableError, ValidationError
from .plant import CostMatrices, ModeBounds, ModeDynamics

DARE_TOL = 1e-10
DARE_MAX_ITER = 100_000
_BLOWUP = 1e14


def spectral_radius(M: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(M)))))


def _eig_extremes(M: np.ndarray) -> tuple[float, float]:
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return float(w[0]), float(w[-1])


@dataclass(frozen=True)
class DareSolution:
    P_star: np.ndarray
    K_star: np.ndarray
    J_star: float
    iterations: int = 0


def riccati_map(P: np.ndarray, dyn: ModeDynamics, costs: CostMatrices) -> np.ndarray:
    A, B = dyn.A, dyn.B
    S = costs.R + B.T @ P @ B
    G = B.T @ P @ A
    return costs.Q + A.T @ P @ A - G.T @ np.linalg.solve(S, G)


def gain_from_value(P: np.ndarray, dyn: ModeDynamics, costs: CostMatrices) -> np.ndarray:
    A, B = dyn.A, dyn.B
    return -np.linalg.solve(costs.R + B.T @ P @ B, B.T @ P @ A)


def h_matrix(costs: CostMatrices, K: np.ndarray) -> np.ndarray:
    return costs.Q + K.T @ costs.R @ K


def solve_dare(dyn: ModeDynamics, costs: CostMatrices, sigma_w: float = 1.0,
               tol: float = DARE_TOL, max_iter: int = DARE_MAX_ITER) -> DareSolution:
    """Stabilizing DARE solution by value iteration started at P = Q."""
    P, it, change = kernels.riccati_iterate(dyn.A, dyn.B, costs.Q, costs.R, tol, max_iter, _BLOWUP)
    scale = max(1.0, float(np.abs(P).max())) if np.all(np.isfinite(P)) else np.inf
    if not np.isfinite(scale) or scale > _BLOWUP or change > tol * scale:
        raise UnstabilizableError(f"Riccati iteration did not converge after {it} steps")
    K = gain_from_value(P, dyn, costs)
    if spectral_radius(dyn.closed_loop(K)) >= 1.0:
        raise UnstabilizableError("Riccati fixed point is not stabilizing")
    return DareSolution(P, K, float(sigma_w**2 * np.trace(P)), int(it))


@dataclass(frozen=True)
class FixedPolicyData:
    K: np.ndarray
    P_K: np.ndarray
    H_K: np.ndarray
    Sigma_xx: np.ndarray
    J: float


def lyapunov_solve(L: np.ndarray, H: np.ndarray, tol: float = 1e-12,
                   max_iter: int = DARE_MAX_ITER) -> np.ndarray:
    """Solve P = H + L'PL by fixed-point iteration (requires rho(L) < 1)."""
    if spectral_radius(L) >= 1.0:
        raise StabilityError("Lyapunov iteration needs a stable matrix")
    P, it, change = kernels.lyapunov_iterate(np.ascontiguousarray(L, dtype=float),
                                             np.ascontiguousarray(H, dtype=float),
                                             tol, max_iter, _BLOWUP)
    if change > max(tol, 1e-10) * max(1.0, float(np.abs(P).max())):
        raise StabilityError(f"Lyapunov iteration did not converge after {it} steps")
    return P


def fixed_policy_data(dyn: ModeDynamics, K: np.ndarray, costs: CostMatrices,
                      sigma_w: float = 1.0) -> FixedPolicyData:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    L = dyn.closed_loop(K)
    if spectral_radius(L) >= 1.0:
        raise StabilityError(f"closed loop has spectral radius {spectral_radius(L):.6g}")
    H = h_matrix(costs, K)
    P = lyapunov_solve(L, H)
    Sxx = lyapunov_solve(L.T, sigma_w**2 * np.eye(dyn.n))
    return FixedPolicyData(K, P, H, Sxx, float(sigma_w**2 * np.trace(P)))


def policy_cost_via_gap(dyn: ModeDynamics, K: np.ndarray, costs: CostMatrices,
                        sigma_w: float = 1.0, dare: DareSolution | None = None) -> float:
    """J* + tr(Sigma_xx (K - K*)'(R + B'P*B)(K - K*)), an independent route to J(K)."""
    dare = dare or solve_dare(dyn, costs, sigma_w)
    data = fixed_policy_data(dyn, K, costs, sigma_w)
    dK = data.K - dare.K_star
    M = costs.R + dyn.B.T @ dare.P_star @ dyn.B
    return float(dare.J_star + np.trace(data.Sigma_xx @ dK.T @ M @ dK))


@dataclass
class ExactSdpResult:
    Sigma: np.ndarray
    P_dual: np.ndarray
    J_star: float
    K: np.ndarray
    primal_value: float
    dual_value: float
    primal: sdp.SdpSolution
    dual: sdp.SdpSolution


def exact_sdp(dyn: ModeDynamics, costs: CostMatrices, W: np.ndarray | None = None,
              tol: float = 1e-7) -> ExactSdpResult:
    """Covariance SDP for the average-cost LQR problem and its dual."""
    n, m = dyn.n, dyn.m
    W = np.eye(n) if W is None else np.atleast_2d(np.asarray(W, dtype=float))
    if np.linalg.eigvalsh(W).min() <= 0:
        raise ValidationError("W must be positive definite")
    theta, D = dyn.theta, costs.block

    primal = sdp.SdpProblem({"Sigma": n + m}, "min")
    primal.set_objective(lambda X: np.sum(D * X["Sigma"]))
    primal.add_equality(lambda X: X["Sigma"][:n, :n] - theta.T @ X["Sigma"] @ theta - W, "stationarity")
    ps = sdp.solve(primal, tol=tol)

    dual = build_exact_dual(theta, costs, W)
    ds = sdp.solve(dual, tol=tol)
    for name, s in (("primal", ps), ("dual", ds)):
        if not s.ok:
            raise SynthesisError(f"exact {name} SDP ended with status {s.status}")
    S = ps.blocks["Sigma"]
    K = np.linalg.solve(S[:n, :n], S[n:, :n].T).T
    P = ds.blocks["P"]
    return ExactSdpResult(S, P, float(np.sum(P * W)), K, ps.objective, ds.objective, ps, ds)


def build_exact_dual(theta: np.ndarray, costs: CostMatrices, W: np.ndarray) -> sdp.SdpProblem:
    n = costs.Q.shape[0]
    D = costs.block
    prob = sdp.SdpProblem({"P": n}, "max")
    prob.set_objective(lambda X: np.sum(X["P"] * W))

    def lmi(X):
        M = D + theta @ X["P"] @ theta.T
        M[:n, :n] -= X["P"]
        return M

    prob.add_lmi(lmi, "bellman")
    return prob


@dataclass(frozen=True)
class DwellDecision:
    tau: int
    eta: float
    rho: float
    chi_cross: float
    malignant: bool
    raw: float
    degenerate: bool = False


def dwell_from_operators(eta: float, rho: float, chi_cross: float, alpha_bar: float) -> DwellDecision:
    """Minimum dwell time from the contraction rate and the switch penalties."""
    if not 0.0 < alpha_bar < 1.0:
        raise ValidationError("alpha_bar must lie in (0, 1)")
    if rho <= 0 or chi_cross <= 0:
        raise DegenerateError("switch operators must be positive")
    log_jump = math.log(rho) + math.log(chi_cross)
    malignant = log_jump > math.log(alpha_bar)
    if eta >= 1.0:
        return DwellDecision(1, float(eta), rho, chi_cross, malignant, 0.0, degenerate=True)
    if eta <= 0.0:
        raise DegenerateError(f"contraction rate {eta} is not positive")
    raw = -(log_jump - math.log(alpha_bar)) / math.log1p(-eta)
    tau = max(1, math.ceil(raw - 1e-12))
    return DwellDecision(int(tau), float(eta), float(rho), float(chi_cross), malignant, float(raw))


def spectral_operators(P_i: np.ndarray, H_i: np.ndarray, P_j: np.ndarray) -> tuple[float, float, float]:
    """(eta, rho, chi) from the value matrices of both modes and the stage matrix of mode i."""
    lo_i, hi_i = _eig_extremes(np.atleast_2d(P_i))
    lo_j, hi_j = _eig_extremes(np.atleast_2d(P_j))
    if lo_i <= 0 or lo_j <= 0:
        raise DegenerateError("value matrix is singular")
    h_lo, _ = _eig_extremes(np.atleast_2d(H_i))
    return h_lo / hi_i, hi_j / lo_i, hi_i / lo_j


def dwell_operators_fixed(data_i: FixedPolicyData, data_j: FixedPolicyData) -> tuple[float, float, float]:
    return spectral_operators(data_i.P_K, data_i.H_K, data_j.P_K)


def dwell_fixed(data_i: FixedPolicyData, data_j: FixedPolicyData, alpha_bar: float) -> DwellDecision:
    return dwell_from_operators(*dwell_operators_fixed(data_i, data_j), alpha_bar)


def dwell_star(dare_i: DareSolution, costs_i: CostMatrices, dare_j: DareSolution,
               alpha_bar: float) -> DwellDecision:
    """Benchmark dwell time for the switch i -> j built from the Riccati solutions."""
    H = h_matrix(costs_i, dare_i.K_star)
    return dwell_from_operators(*spectral_operators(dare_i.P_star, H, dare_j.P_star), alpha_bar)


def beta_bar(kappa_c: float, gamma_c: float, alpha0: float, alpha1: float) -> float:
    if min(kappa_c, gamma_c, alpha0, alpha1) <= 0 or gamma_c >= 1:
        raise ValidationError("beta_bar needs positive arguments and gamma in (0, 1)")
    return 4 * alpha1**2 * kappa_c**4 * (1 + kappa_c**2) ** 2 / (alpha0**2 * gamma_c**2)


def baseline_cost(epochs: Iterable[tuple[int, float]]) -> float:
    """Sum of tau* J* over (tau*, J*) pairs."""
    total = 0.0
    for tau, j in epochs:
        if tau < 1:
            raise ValidationError("dwell times must be at least one")
        total += tau * j
    return total


@dataclass(frozen=True)
class BoundSummary:
    L1: float
    U3: float
    gap: float


def bound_calculators(ns: int, j_star: Sequence[float], tau_star: np.ndarray) -> BoundSummary:
    """Lower bound ns * min J* and worst-case ns * tau*_ij * J*_i upper bound."""
    if ns == 0:
        return BoundSummary(0.0, 0.0, 0.0)
    j = np.asarray(j_star, dtype=float)
    tau = np.atleast_2d(np.asarray(tau_star, dtype=float))
    L1 = ns * float(j.min())
    U3 = float(np.max(ns * tau * j[:, None]))
    return BoundSummary(L1, U3, U3 - L1)


def dwell_star_table(dares: Sequence[DareSolution], costs: Sequence[CostMatrices],
                     alpha_bar: float) -> np.ndarray:
    k = len(dares)
    out = np.ones((k, k), dtype=int)
    for i in range(k):
        for j in range(k):
            out[i, j] = dwell_star(dares[i], costs[i], dares[j], alpha_bar).tau
    return out


@dataclass(frozen=True)
class StrongStability:
    H: np.ndarray
    L: np.ndarray
    kappa: float
    gamma: float


def kappa_gamma_decompose(closed_loop: np.ndarray, gamma: float | None = None) -> StrongStability:
    """Write a stable matrix as H L H^-1 with ||L|| <= 1 - gamma and cond(H) = kappa."""
    M = np.atleast_2d(np.asarray(closed_loop, dtype=float))
    rho = spectral_radius(M)
    if rho >= 1.0:
        raise StabilityError(f"matrix has spectral radius {rho:.6g}")
    if gamma is None:
        gamma = (1.0 - rho) / 2.0
    if not 0.0 < gamma < 1.0 or rho >= 1.0 - gamma:
        raise ValidationError("gamma must satisfy 0 < gamma < 1 - rho")
    n = M.shape[0]
    P = lyapunov_solve(M / (1.0 - gamma), np.eye(n), tol=1e-14)
    w, U = np.linalg.eigh(P)
    # H^-1 = sqrt(P / lambda_max) so that ||H^-1|| = 1.
    H = U @ np.diag(np.sqrt(w[-1] / w)) @ U.T
    Hinv = U @ np.diag(np.sqrt(w / w[-1])) @ U.T
    L = Hinv @ M @ H
    if not (np.all(np.isfinite(L)) and w[0] > 0):
        raise StabilityError("matrix is too ill-conditioned for a strong-stability certificate")
    return StrongStability(H, L, float(np.sqrt(w[-1] / w[0])), float(gamma))


def stability_kappa(bounds: ModeBounds, sigma_w: float) -> float:
    if sigma_w <= 0:
        raise ValidationError("the stability constant needs a positive noise level")
    return math.sqrt(2.0 * bounds.nu / (sigma_w**2 * bounds.alpha0))


def tau_dw_max(bounds: Sequence[ModeBounds], sigma_w: float) -> tuple[float, bool]:
    """Longest epoch any certified dwell time can require; flag is set when degenerate."""
    kappa = max(stability_kappa(b, sigma_w) for b in bounds)
    if kappa <= 1.0:
        return 1.0, True
    gamma = 1.0 / (2.0 * kappa**2)
    return -math.log(kappa) / math.log1p(-gamma), False


def policy_class_contains(K: np.ndarray, dyn: ModeDynamics, kappa_c: float, gamma_c: float) -> bool:
    K = np.atleast_2d(np.asarray(K, dtype=float))
    if K.shape != (dyn.m, dyn.n):
        raise ValidationError("gain shape does not match the dynamics")
    return bool(np.linalg.norm(K, 2) <= kappa_c and spectral_radius(dyn.closed_loop(K)) < 1.0 - gamma_c)
