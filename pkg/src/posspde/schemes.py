"""One-step maps of the fully discrete schemes.

States are nodal arrays of shape ``(..., N)``; the per-step Gaussians in
:class:`StepContext` have shape ``(..., M)`` with the same leading axes, so a
whole batch of Monte Carlo paths advances in one call.

All schemes treat the diffusion term with backward Euler (``solver`` has
weight ``dt``, ``half_solver`` weight ``dt/2``) except SEXP, which uses the
exact semigroup ``exp(-dt A)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .assembly import FemOperators
from .errors import ConfigurationError
from .linalg import ImplicitSolver, expm_action
from .noise import NoiseModel

__all__ = [
    "SchemeId",
    "StepContext",
    "Stepper",
    "milstein_multiplier",
    "step_ema",
    "step_emi",
    "step_emi_clip",
    "step_split2",
    "step_strang_a",
    "step_strang_b",
    "step_sexp",
    "POSITIVE_SCHEMES",
]


class SchemeId(str, enum.Enum):
    EMA = "ema"
    EMI = "emi"
    EMI_CLIP = "emi_clip"
    SPLIT2 = "split2"
    STRANG_A = "strang_a"
    STRANG_B = "strang_b"
    SEXP = "sexp"

    @classmethod
    def parse(cls, name) -> "SchemeId":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower().replace("-", "_"))
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ConfigurationError(f"unknown scheme {name!r}; choose from {choices}") from None


# Nonnegativity holds by construction for these.
POSITIVE_SCHEMES = (SchemeId.SPLIT2, SchemeId.STRANG_A, SchemeId.STRANG_B)

_LINEAR_ONLY = (SchemeId.SPLIT2, SchemeId.STRANG_A, SchemeId.STRANG_B, SchemeId.SEXP)
_MILSTEIN = (SchemeId.EMI, SchemeId.EMI_CLIP)


@dataclass(frozen=True, eq=False)
class StepContext:
    """Everything one step needs besides the state."""

    dt: float
    G: np.ndarray
    model: NoiseModel
    ops: FemOperators
    solver: ImplicitSolver | None = None
    half_solver: ImplicitSolver | None = None
    G1: np.ndarray | None = None
    G2: np.ndarray | None = None


def _g(G):
    # (..., M) -> (..., 1) for the single-mode schemes
    return np.asarray(G)[..., 0:1]


def _exp_factor(ctx, G, dt):
    a = ctx.model.lam * np.sqrt(dt) * ctx.model.E[0]
    return np.exp(a * _g(G) - 0.5 * a * a)


def step_split2(U, ctx: StepContext):
    """Exponential noise factor, then one backward-Euler diffusion solve."""
    return ctx.solver.solve(_exp_factor(ctx, ctx.G, ctx.dt) * U)


def step_strang_a(U, ctx: StepContext):
    """Half diffusion solve, full exponential factor, half diffusion solve."""
    U = ctx.half_solver.solve(U)
    U = _exp_factor(ctx, ctx.G, ctx.dt) * U
    return ctx.half_solver.solve(U)


def step_strang_b(U, ctx: StepContext):
    """Half exponential factor (G1), full diffusion solve, half factor (G2)."""
    if ctx.G1 is None or ctx.G2 is None:
        raise ConfigurationError("strang_b needs half-step Gaussians (coarsening factor >= 2)")
    half = 0.5 * ctx.dt
    U = _exp_factor(ctx, ctx.G1, half) * U
    U = ctx.solver.solve(U)
    return _exp_factor(ctx, ctx.G2, half) * U


def _noise_increment(U, ctx):
    # sqrt(dt) sum_k G_k E_k f(U)
    fU = ctx.model.spec.f(U)
    G = np.asarray(ctx.G)
    return np.sqrt(ctx.dt) * np.einsum("...k,kn->...n", G, ctx.model.E) * fU


def step_ema(U, ctx: StepContext):
    """Euler-Maruyama noise with a backward-Euler diffusion solve."""
    return ctx.solver.solve(U + _noise_increment(U, ctx))


def milstein_multiplier(a, G):
    """Nodal EMi factor for linear noise, ``1 + a G + a^2 (G^2 - 1) / 2``."""
    return 1.0 + a * G + 0.5 * a * a * (G * G - 1.0)


def step_emi(U, ctx: StepContext):
    """Euler-Milstein noise with a backward-Euler diffusion solve (M = 1)."""
    model = ctx.model
    G = _g(ctx.G)
    if model.linear:
        a = model.lam * np.sqrt(ctx.dt) * model.E[0]
        rhs = milstein_multiplier(a, G) * U
    else:
        E = model.E[0]
        fU = model.spec.f(U)
        rhs = (U + np.sqrt(ctx.dt) * G * E * fU
               + 0.5 * model.spec.df(U) * fU * E * E * ctx.dt * (G * G - 1.0))
    return ctx.solver.solve(rhs)


def step_emi_clip(U, ctx: StepContext):
    """EMi with negative values truncated to zero."""
    return np.maximum(step_emi(U, ctx), 0.0)


def step_sexp(U, ctx: StepContext):
    """Stochastic exponential Euler: noise increment, then ``exp(-dt A)``."""
    a = ctx.model.lam * np.sqrt(ctx.dt) * ctx.model.E[0]
    return expm_action(ctx.ops, U + a * _g(ctx.G) * U, ctx.dt)


_STEP = {
    SchemeId.EMA: step_ema,
    SchemeId.EMI: step_emi,
    SchemeId.EMI_CLIP: step_emi_clip,
    SchemeId.SPLIT2: step_split2,
    SchemeId.STRANG_A: step_strang_a,
    SchemeId.STRANG_B: step_strang_b,
    SchemeId.SEXP: step_sexp,
}


class Stepper:
    """A scheme bound to operators, noise model and time step.

    Builds the implicit solvers once; :meth:`step` then advances a state.
    """

    def __init__(self, scheme, ops: FemOperators, model: NoiseModel, dt: float,
                 solver_mode: str = "auto", tol: float = 1e-10, max_iter: int | None = None):
        self.scheme = SchemeId.parse(scheme)
        if dt <= 0:
            raise ConfigurationError("dt must be positive")
        if model.E.shape[1] != ops.num_dofs:
            raise ConfigurationError("noise model and operators live on different meshes")
        if self.scheme in _LINEAR_ONLY and not (model.linear and model.M == 1):
            raise ConfigurationError(
                f"{self.scheme.value} needs a linear diffusion coefficient and M = 1")
        if self.scheme in _MILSTEIN:
            if model.M != 1:
                raise ConfigurationError("Milstein schemes are limited to M = 1")
            if not model.linear and model.spec.df is None:
                raise ConfigurationError("Milstein schemes need the derivative f'")
        self.ops, self.model, self.dt = ops, model, float(dt)
        self.needs_halves = self.scheme is SchemeId.STRANG_B
        self.solver = self.half_solver = None
        if self.scheme is SchemeId.STRANG_A:
            self.half_solver = ImplicitSolver(ops, 0.5 * dt, solver_mode, tol, max_iter)
        elif self.scheme is not SchemeId.SEXP:
            self.solver = ImplicitSolver(ops, dt, solver_mode, tol, max_iter)
        self._fn = _STEP[self.scheme]

    def context(self, G, G1=None, G2=None) -> StepContext:
        return StepContext(dt=self.dt, G=G, model=self.model, ops=self.ops,
                           solver=self.solver, half_solver=self.half_solver, G1=G1, G2=G2)

    def step(self, U, G, G1=None, G2=None):
        return self._fn(U, self.context(G, G1, G2))
