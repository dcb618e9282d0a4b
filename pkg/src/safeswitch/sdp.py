"""Small dense semidefinite programs over named symmetric matrix blocks.

A problem is stated with plain numpy callables: the objective and every
constraint are affine functions of a dict ``{block name: symmetric matrix}``.
Coefficients are extracted by probing each callable at zero and at each
symmetric basis element, so constraint code reads like the math. The compiled
form is solved with cvxopt's primal-dual interior point method and then
certified independently by :func:`check_solution`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from cvxopt import matrix as cvx_matrix
from cvxopt import solvers

from .errors import ValidationError

log = logging.getLogger(__name__)

Blocks = Mapping[str, np.ndarray]


def _sym_basis(p: int) -> list[tuple[int, int, np.ndarray]]:
    out = []
    for i in range(p):
        for j in range(i, p):
            E = np.zeros((p, p))
            E[i, j] = E[j, i] = 1.0
            out.append((i, j, E))
    return out


@dataclass
class Constraint:
    name: str
    kind: str  # "psd" (expr >= 0) or "eq" (expr == 0)
    const: np.ndarray
    coeffs: list[np.ndarray]  # one matrix per scalar variable

    @property
    def dim(self) -> int:
        return self.const.shape[0]

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        out = self.const.copy()
        for xk, Fk in zip(x, self.coeffs):
            if xk != 0.0:
                out += xk * Fk
        return out


class SdpProblem:
    """Linear objective over symmetric blocks with LMI and equality constraints."""

    def __init__(self, blocks: Mapping[str, int], sense: str = "min", psd_blocks: bool = True):
        if sense not in ("min", "max"):
            raise ValidationError("sense must be 'min' or 'max'")
        if not blocks:
            raise ValidationError("need at least one block")
        self.sense = sense
        self.block_dims = {k: int(v) for k, v in blocks.items()}
        self._index: list[tuple[str, int, int, np.ndarray]] = []
        for name, p in self.block_dims.items():
            if p <= 0:
                raise ValidationError(f"block {name} has dimension {p}")
            for i, j, E in _sym_basis(p):
                self._index.append((name, i, j, E))
        self.objective_c = np.zeros(len(self._index))
        self.objective_const = 0.0
        self.constraints: list[Constraint] = []
        if psd_blocks:
            for name in self.block_dims:
                self.add_lmi(lambda X, _n=name: X[_n], name=f"{name}>=0")

    @property
    def n_vars(self) -> int:
        return len(self._index)

    def _zero(self) -> dict[str, np.ndarray]:
        return {k: np.zeros((p, p)) for k, p in self.block_dims.items()}

    def _probe(self, fn: Callable[[Blocks], np.ndarray | float]):
        base = fn(self._zero())
        out = []
        for name, _, _, E in self._index:
            X = self._zero()
            X[name] = E
            out.append(np.asarray(fn(X), dtype=float) - np.asarray(base, dtype=float))
        return np.asarray(base, dtype=float), out

    def set_objective(self, fn: Callable[[Blocks], float]) -> None:
        base, coeffs = self._probe(fn)
        self.objective_const = float(base)
        self.objective_c = np.array([float(c) for c in coeffs])

    def _add(self, fn, name: str, kind: str) -> None:
        base, coeffs = self._probe(lambda X: np.atleast_2d(fn(X)))
        if base.shape[0] != base.shape[1]:
            raise ValidationError(f"constraint {name} is not square")
        sym = lambda M: 0.5 * (M + M.T)
        self.constraints.append(Constraint(name, kind, sym(base), [sym(c) for c in coeffs]))

    def add_lmi(self, fn: Callable[[Blocks], np.ndarray], name: str = "lmi") -> None:
        """Require ``fn(X)`` to be positive semidefinite."""
        self._add(fn, name, "psd")

    def add_equality(self, fn: Callable[[Blocks], np.ndarray], name: str = "eq") -> None:
        """Require the symmetric matrix ``fn(X)`` to vanish."""
        self._add(fn, name, "eq")

    def pack(self, blocks: Blocks) -> np.ndarray:
        return np.array([blocks[name][i, j] for name, i, j, _ in self._index])

    def unpack(self, x: np.ndarray) -> dict[str, np.ndarray]:
        X = self._zero()
        for xk, (name, i, j, _) in zip(x, self._index):
            X[name][i, j] = X[name][j, i] = xk
        return X

    def objective(self, blocks: Blocks) -> float:
        return float(self.objective_c @ self.pack(blocks) + self.objective_const)

    def to_dict(self) -> dict:
        def coeff_list(c: Constraint):
            return [{"var": k, "matrix": F.tolist()} for k, F in enumerate(c.coeffs) if np.any(F)]

        return {
            "sense": self.sense,
            "blocks": self.block_dims,
            "variables": [{"block": n, "i": i, "j": j} for n, i, j, _ in self._index],
            "objective": {"coeffs": self.objective_c.tolist(), "const": self.objective_const},
            "constraints": [
                {"name": c.name, "kind": c.kind, "const": c.const.tolist(), "coeffs": coeff_list(c)}
                for c in self.constraints
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SdpProblem":
        prob = cls(data["blocks"], data["sense"], psd_blocks=False)
        prob.objective_c = np.asarray(data["objective"]["coeffs"], dtype=float)
        prob.objective_const = float(data["objective"]["const"])
        for c in data["constraints"]:
            const = np.asarray(c["const"], dtype=float)
            coeffs = [np.zeros_like(const) for _ in range(prob.n_vars)]
            for entry in c["coeffs"]:
                coeffs[entry["var"]] = np.asarray(entry["matrix"], dtype=float)
            prob.constraints.append(Constraint(c["name"], c["kind"], const, coeffs))
        return prob


@dataclass
class ResidualReport:
    lmi_min_eig: dict[str, float]
    eq_max_abs: dict[str, float]
    objective: float

    @property
    def max_violation(self) -> float:
        """Most negative LMI eigenvalue or minus the worst equality residual (0 if feasible)."""
        vals = [min(0.0, v) for v in self.lmi_min_eig.values()]
        vals += [-v for v in self.eq_max_abs.values()]
        return min(vals) if vals else 0.0


@dataclass
class SdpSolution:
    status: str
    blocks: dict[str, np.ndarray]
    objective: float
    iterations: int = 0
    primal_residual: float = float("nan")
    dual_residual: float = float("nan")
    gap: float = float("nan")
    solver_status: str = ""
    duals: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "optimal"

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "solver_status": self.solver_status,
            "objective": self.objective,
            "iterations": self.iterations,
            "primal_residual": self.primal_residual,
            "dual_residual": self.dual_residual,
            "gap": self.gap,
            "blocks": {k: v.tolist() for k, v in self.blocks.items()},
            "duals": {k: v.tolist() for k, v in self.duals.items()},
        }


def check_solution(problem: SdpProblem, solution: SdpSolution | Blocks) -> ResidualReport:
    """Recompute constraint slacks and the objective from scratch."""
    blocks = solution.blocks if isinstance(solution, SdpSolution) else solution
    x = problem.pack(blocks)
    lmi, eq = {}, {}
    for c in problem.constraints:
        M = c.evaluate(x)
        if c.kind == "psd":
            lmi[c.name] = float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())
        else:
            eq[c.name] = float(np.abs(M).max())
    return ResidualReport(lmi, eq, problem.objective(blocks))


def _independent_rows(A: np.ndarray, b: np.ndarray, tol: float = 1e-10):
    if A.shape[0] == 0:
        return A, b
    from scipy.linalg import qr

    _, R, piv = qr(A.T, pivoting=True, mode="economic")
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > tol * max(1.0, diag.max() if diag.size else 1.0)))
    keep = np.sort(piv[:rank])
    return A[keep], b[keep]


def solve(problem: SdpProblem, tol: float = 1e-7, max_iter: int = 100,
          solver_tol: float | None = None) -> SdpSolution:
    """Solve with cvxopt and certify the result at tolerance ``tol``.

    Status is one of ``optimal``, ``infeasible``, ``unbounded``, ``max_iter``.
    A solve is only reported optimal when the independently recomputed primal
    residual, cvxopt's dual residual and the relative gap are all within
    ``tol`` (residuals measured relative to the constraint data scale).
    """
    sign = 1.0 if problem.sense == "min" else -1.0
    c = sign * problem.objective_c
    Gs, hs, Arows, brows = [], [], [], []
    for con in problem.constraints:
        if con.kind == "psd":
            Gs.append(cvx_matrix(np.column_stack([-F.flatten(order="F") for F in con.coeffs])))
            hs.append(cvx_matrix(con.const.copy()))
        else:
            iu = np.triu_indices(con.dim)
            Arows.append(np.column_stack([F[iu] for F in con.coeffs]))
            brows.append(-con.const[iu])
    kwargs = {}
    if Arows:
        A, b = _independent_rows(np.vstack(Arows), np.concatenate(brows))
        kwargs["A"], kwargs["b"] = cvx_matrix(A), cvx_matrix(b)
    stol = solver_tol if solver_tol is not None else max(min(tol * 1e-3, 1e-9), 1e-12)
    ladder = [stol] + [t for t in (1e-9, 1e-8, tol * 0.1) if t > stol]
    out = None
    for attempt in ladder:
        out = _solve_once(problem, c, Gs, hs, kwargs, attempt, tol, max_iter)
        if out.status in ("optimal", "infeasible", "unbounded"):
            return out
        log.debug("retrying sdp with solver tolerance above %.1e (%s)", attempt, out.solver_status)
    return out


def _solve_once(problem, c, Gs, hs, kwargs, stol, tol, max_iter) -> SdpSolution:
    options = {"show_progress": False, "maxiters": max_iter,
               "abstol": stol, "reltol": stol, "feastol": stol}
    try:
        res = solvers.sdp(cvx_matrix(c), Gs=Gs, hs=hs, options=options, **kwargs)
    except (ValueError, ArithmeticError) as exc:
        return SdpSolution("max_iter", problem._zero(), float("nan"), solver_status=f"error: {exc}")

    status = res["status"]
    if status == "primal infeasible":
        return SdpSolution("infeasible", problem._zero(), float("nan"), res["iterations"], solver_status=status)
    if status == "dual infeasible":
        return SdpSolution("unbounded", problem._zero(), float("nan"), res["iterations"], solver_status=status)

    x = np.array(res["x"]).ravel()
    blocks = problem.unpack(x)
    report = check_solution(problem, blocks)
    scale = max([1.0] + [float(np.abs(con.const).max()) for con in problem.constraints])
    primal_res = -report.max_violation / scale
    dual_res = float(res["dual infeasibility"] or 0.0)
    pobj, dobj = res["primal objective"], res["dual objective"]
    gap = abs(pobj - dobj) / max(1.0, abs(pobj)) if pobj is not None and dobj is not None else float("inf")
    psd = [k for k in problem.constraints if k.kind == "psd"]
    duals = {con.name: np.array(z) for con, z in zip(psd, res["zs"])}
    certified = primal_res <= tol and dual_res <= tol and gap <= tol
    if not certified:
        log.debug("sdp not certified: status=%s primal=%.2e dual=%.2e gap=%.2e",
                  status, primal_res, dual_res, gap)
    return SdpSolution("optimal" if certified else "max_iter", blocks, report.objective,
                       res["iterations"], primal_res, dual_res, gap, status, duals)


def dump_debug(path, problem: SdpProblem, solution: SdpSolution | None = None, **extra) -> None:
    """Write the compiled problem (and optionally its solution) as JSON."""
    payload = {"problem": problem.to_dict()}
    if solution is not None:
        payload["solution"] = solution.to_dict()
        payload["residuals"] = check_solution(problem, solution).__dict__
    payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, default=float)
