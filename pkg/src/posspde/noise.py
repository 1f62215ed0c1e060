"""Noise model and coupled Brownian increments.

A :class:`BrownianLattice` holds the increments of one Brownian path (all
modes) at the finest time resolution.  Coarser resolutions are obtained by
repeated pairwise summation, so a level-``2k`` increment is *bitwise* the sum
of its two level-``k`` children.  Each (seed, path, mode) triple keys its own
Philox counter-based stream, so a path is reproducible no matter which
worker generates it or in which order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, InputError
from .mesh import Mesh

__all__ = [
    "Linear",
    "General",
    "NoiseModel",
    "builtin_model",
    "model_from_expressions",
    "BrownianLattice",
    "StepNoise",
    "increments_at",
    "batch_increments_at",
    "lattice_batch",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Linear:
    """Diffusion coefficient ``f(u) = lam * u``."""

    lam: float

    def f(self, u):
        return self.lam * u

    def df(self, u):
        return np.full_like(u, self.lam)

    @property
    def c_f(self) -> float:
        return abs(self.lam)


@dataclass(frozen=True)
class General:
    """User-supplied Lipschitz coefficient with ``f(0) = 0``.

    ``df`` is only needed by the Milstein schemes.
    """

    f: Callable
    c_f: float
    df: Callable | None = None

    def __post_init__(self):
        f0 = float(np.asarray(self.f(np.zeros(1)))[0])
        if abs(f0) > 1e-14:
            raise ConfigurationError(f"diffusion coefficient must satisfy f(0)=0, got {f0}")


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Truncated noise ``W(t, x) = sum_k e_k(x) B_k(t)`` on a mesh.

    Attributes
    ----------
    E : ndarray, shape (M, N)
        Nodal values of the noise modes.
    c_e : float
        Bound on ``max_k sup |e_k|``.
    spec : Linear or General
    c_e_exact : bool
        False when ``c_e`` is only the nodal maximum.
    """

    E: np.ndarray
    c_e: float
    spec: Linear | General
    c_e_exact: bool = True

    def __post_init__(self):
        if self.E.ndim != 2:
            raise InputError("E must have shape (M, N)")
        if np.max(np.abs(self.E)) > self.c_e * (1 + 1e-12):
            raise InputError("mode samples exceed c_e")

    @property
    def M(self) -> int:
        return self.E.shape[0]

    @property
    def linear(self) -> bool:
        return isinstance(self.spec, Linear)

    @property
    def lam(self) -> float:
        if not self.linear:
            raise ConfigurationError("scheme requires a linear diffusion coefficient")
        return self.spec.lam


def _sine_modes(dim, M):
    """First ``M`` products of sines, ordered by total frequency."""
    if dim == 1:
        return [(p,) for p in range(1, M + 1)]
    pairs = sorted(
        ((p, q) for p in range(1, M + 1) for q in range(1, M + 1)),
        key=lambda pq: (pq[0] + pq[1], pq[0]),
    )
    return pairs[:M]


def builtin_model(name: str, mesh: Mesh, lam: float = 1.0, modes: int = 1) -> NoiseModel:
    """Built-in sine noise with linear coefficient ``f(u) = lam u``.

    ``sine2d`` uses ``e(x, y) = sin(pi x) sin(pi y)`` (with ``modes > 1``,
    higher sine products follow); ``sine1d`` uses ``sin(pi x)``.
    """
    dims = {"sine1d": 1, "sine2d": 2}
    if name not in dims:
        raise ConfigurationError(f"unknown noise model {name!r}; choose from {sorted(dims)}")
    if dims[name] != mesh.dim:
        raise ConfigurationError(f"noise model {name} needs a {dims[name]}D mesh")
    if modes < 1:
        raise ConfigurationError("noise.modes must be >= 1")
    x = mesh.dof_coords
    E = np.empty((modes, mesh.num_dofs))
    for k, freqs in enumerate(_sine_modes(mesh.dim, modes)):
        E[k] = np.prod([np.sin(p * np.pi * x[:, a]) for a, p in enumerate(freqs)], axis=0)
    return NoiseModel(E=E, c_e=1.0, spec=Linear(float(lam)))


_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "exp", "sqrt", "abs", "tanh", "sinh", "cosh", "log", "pi")
}


def model_from_expressions(exprs, mesh: Mesh, lam: float = 1.0) -> NoiseModel:
    """Noise modes given as closed-form strings in ``x`` (and ``y``).

    ``c_e`` is the nodal maximum, an approximation of the sup norm; this is
    logged and recorded as ``c_e_exact=False``.
    """
    coords = dict(zip("xy", mesh.dof_coords.T))
    E = np.empty((len(exprs), mesh.num_dofs))
    for k, src in enumerate(exprs):
        val = eval(src, {"__builtins__": {}}, {**_EXPR_NAMESPACE, **coords})  # noqa: S307
        E[k] = np.broadcast_to(np.asarray(val, dtype=float), (mesh.num_dofs,))
    if not np.all(np.isfinite(E)):
        raise InputError("noise mode expression is not finite at every DOF")
    c_e = float(np.max(np.abs(E))) if E.size else 0.0
    log.warning("c_e=%.6g approximated by the nodal maximum of the modes", c_e)
    return NoiseModel(E=E, c_e=c_e, spec=Linear(float(lam)), c_e_exact=False)


@dataclass(eq=False)
class BrownianLattice:
    """Finest-level increments of one Brownian path.

    ``dB[k, j] ~ N(0, T / K_fine)`` for mode ``k`` and fine step ``j``.
    """

    master_seed: int
    path_id: int
    M: int
    K_fine: int
    T: float
    dB: np.ndarray = field(init=False, repr=False)
    _levels: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        if self.K_fine < 1 or self.K_fine & (self.K_fine - 1):
            raise ConfigurationError(f"K_fine={self.K_fine} must be a power of two")
        if self.T <= 0:
            raise ConfigurationError("T must be positive")
        sd = np.sqrt(self.T / self.K_fine)
        self.dB = np.stack([sd * _stream(self.master_seed, self.path_id, k, self.K_fine)
                            for k in range(self.M)])
        self._levels = {1: self.dB}

    def level(self, factor: int) -> np.ndarray:
        """Increments over ``factor`` fine steps, shape (M, K_fine // factor)."""
        _check_factor(factor, self.K_fine)
        if factor not in self._levels:
            child = self.level(factor // 2)
            self._levels[factor] = child[:, 0::2] + child[:, 1::2]
        return self._levels[factor]


def _stream(master_seed, path_id, mode, count):
    key = np.random.SeedSequence([master_seed, path_id, mode]).generate_state(2, np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(count)


def _check_factor(factor, K_fine):
    if factor < 1 or factor & (factor - 1) or K_fine % factor:
        raise ConfigurationError(
            f"coarsening factor {factor} must be a power of two dividing K_fine={K_fine}"
        )


@dataclass(frozen=True, eq=False)
class StepNoise:
    """Per-step noise at one resolution.

    Shapes are ``(..., M, K)`` with ``K = K_fine / factor``.  ``G = dB /
    sqrt(dt)``; ``G1``, ``G2`` are the normalized half-step Gaussians (None
    at ``factor == 1``).
    """

    dt: float
    dB: np.ndarray
    G: np.ndarray
    G1: np.ndarray | None
    G2: np.ndarray | None


def _from_levels(coarse, half, dt):
    G = coarse / np.sqrt(dt)
    if half is None:
        return StepNoise(dt, coarse, G, None, None)
    sh = np.sqrt(dt / 2)
    return StepNoise(dt, coarse, G, half[..., 0::2] / sh, half[..., 1::2] / sh)


def increments_at(lattice: BrownianLattice, factor: int) -> StepNoise:
    """Increments with ``dt = T factor / K_fine`` plus half-step data."""
    coarse = lattice.level(factor)
    half = lattice.level(factor // 2) if factor >= 2 else None
    return _from_levels(coarse, half, lattice.T * factor / lattice.K_fine)


def lattice_batch(master_seed: int, path_ids, M: int, K_fine: int, T: float) -> np.ndarray:
    """Fine increments for several paths, shape (P, M, K_fine)."""
    return np.stack([BrownianLattice(master_seed, int(p), M, K_fine, T).dB for p in path_ids])


def batch_increments_at(dB_fine: np.ndarray, factor: int, T: float) -> StepNoise:
    """:func:`increments_at` for stacked fine increments ``(..., M, K_fine)``.

    Coarsening follows the same pairwise tree as :meth:`BrownianLattice.level`,
    so results agree bitwise with the single-path version.
    """
    K_fine = dB_fine.shape[-1]
    _check_factor(factor, K_fine)
    levels = {1: dB_fine}
    f = 1
    while f < factor:
        child = levels[f]
        f *= 2
        levels[f] = child[..., 0::2] + child[..., 1::2]
    half = levels[factor // 2] if factor >= 2 else None
    return _from_levels(levels[factor], half, T * factor / K_fine)

