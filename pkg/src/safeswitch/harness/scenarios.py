"""Scenario generation: concrete switched plants plus the side information the learner gets."""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .. import knownlqr
from ..errors import UnstabilizableError, ValidationError
from ..plant import CostMatrices, Mode, ModeBounds, ModeDynamics, NoiseModel, SwitchedPlant

MAX_N, MAX_M = 10, 4
MAX_RESAMPLES = 100
VARTHETA_MARGIN = 1.1
NU_MARGIN = 1.5
RANDOM_A_SCALE = 0.5

_RANDOM = re.compile(r"^random-(\d+)x(\d+)$")


def parse_recipe(recipe: str) -> tuple[str, int | None, int | None]:
    if recipe == "scalar-pair":
        return "scalar-pair", 1, 1
    if recipe == "explicit":
        return "explicit", None, None
    hit = _RANDOM.match(recipe)
    if not hit:
        raise ValueError(f"unknown scenario recipe {recipe!r}")
    n, m = int(hit.group(1)), int(hit.group(2))
    if not (1 <= n <= MAX_N and 1 <= m <= MAX_M):
        raise ValueError(f"recipe dimensions must satisfy n <= {MAX_N}, m <= {MAX_M}")
    return "random", n, m


@dataclass
class Scenario:
    dynamics: list[ModeDynamics]
    costs: list[CostMatrices]
    bounds: list[ModeBounds]
    dares: list[knownlqr.DareSolution]
    resamples: int = 0

    @property
    def n(self) -> int:
        return self.dynamics[0].n

    @property
    def m(self) -> int:
        return self.dynamics[0].m

    @property
    def n_modes(self) -> int:
        return len(self.dynamics)

    def plant(self, sigma_w: float = 1.0, kind: str = "gaussian", x0=None) -> SwitchedPlant:
        modes = [Mode(d, c, b) for d, c, b in zip(self.dynamics, self.costs, self.bounds)]
        return SwitchedPlant(modes, NoiseModel(sigma_w, kind), x0)

    def default_gains(self, kind: str = "auto") -> list[np.ndarray]:
        """Zero gain where the open loop is stable, else the true Riccati gain."""
        out = []
        for d, dare in zip(self.dynamics, self.dares):
            zero = np.zeros((d.m, d.n))
            if kind == "zero" or knownlqr.spectral_radius(d.A) < 1.0:
                out.append(zero)
            else:
                out.append(dare.K_star.copy())
        return out


def _draw(kind: str, n: int, m: int, rng: np.random.Generator) -> ModeDynamics:
    if kind == "scalar-pair":
        a = rng.uniform(-1.2, 1.2)
        b = rng.uniform(0.3, 1.5) * rng.choice([-1.0, 1.0])
        return ModeDynamics([[a]], [[b]])
    # Moderate gains keep J* (and hence the cost bound nu) small enough for short warm-ups.
    A = RANDOM_A_SCALE * rng.standard_normal((n, n)) / np.sqrt(n)
    B = rng.standard_normal((n, m)) / np.sqrt(n)
    return ModeDynamics(A, B)


def _solve_all(dyn, costs, sigma_w):
    return [knownlqr.solve_dare(d, c, sigma_w) for d, c in zip(dyn, costs)]


def derive_bounds(dynamics, costs, dares) -> list[ModeBounds]:
    """Side information from the ground truth: norm bound and cost bound shared across modes."""
    vt = VARTHETA_MARGIN * max(float(np.linalg.norm(d.theta, 2)) for d in dynamics)
    nu = NU_MARGIN * max(s.J_star for s in dares)
    out = []
    for c in costs:
        lo, hi = c.eig_range
        out.append(ModeBounds(lo, hi, vt, nu))
    return out


def generate_scenario(spec, rng: np.random.Generator, sigma_w: float = 1.0) -> Scenario:
    """Build the modes described by a ScenarioSpec, resampling until every mode is stabilizable."""
    kind, n, m = parse_recipe(spec.recipe)
    resamples = 0
    if kind == "explicit":
        dyn, costs = [], []
        for i, ms in enumerate(spec.modes):
            d = ModeDynamics(ms.A, ms.B, i)
            dyn.append(d)
            costs.append(CostMatrices(np.eye(d.n) if ms.Q is None else ms.Q,
                                      np.eye(d.m) if ms.R is None else ms.R))
        try:
            dares = _solve_all(dyn, costs, sigma_w or 1.0)
        except UnstabilizableError as exc:
            raise ValidationError(f"explicit scenario has an unstabilizable mode: {exc}") from None
    else:
        M = 2 if kind == "scalar-pair" else spec.n_modes
        dyn, dares = [], []
        costs = [CostMatrices(np.eye(n), np.eye(m)) for _ in range(M)]
        for i in range(M):
            for attempt in range(MAX_RESAMPLES):
                d = _draw(kind, n, m, rng)
                d = ModeDynamics(d.A, d.B, i)
                try:
                    dare = knownlqr.solve_dare(d, costs[i], 1.0)
                except UnstabilizableError:
                    resamples += 1
                    continue
                dyn.append(d)
                dares.append(dare)
                break
            else:
                raise ValidationError(f"no stabilizable mode after {MAX_RESAMPLES} draws")
        dares = _solve_all(dyn, costs, sigma_w or 1.0)
    if spec.bounds is not None:
        bounds = [ModeBounds(b.alpha0, b.alpha1, b.vartheta, b.nu) for b in spec.bounds]
    else:
        bounds = derive_bounds(dyn, costs, dares)
    return Scenario(dyn, costs, bounds, dares, resamples)
