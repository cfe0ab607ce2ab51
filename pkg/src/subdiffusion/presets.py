"""Built-in problems and the translation of a run config into a :class:`ProblemSpec`."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .elliptic import DiffusionField, SpatialMesh, assemble_mass, assemble_stiffness
from .expr import Expression
from .fracderiv import TimeGrid, mittag_leffler
from .timestepper import NodalSource, ProblemSpec, approximate_initial

if TYPE_CHECKING:
    from .config import RunConfig

Exact = Callable[[np.ndarray, float], np.ndarray]

ANISO_MATRIX = ((2.0, 0.5), (0.5, 1.0))
ANISO_LAMBDA = 0.79  # smallest eigenvalue is 1.5 - sqrt(0.5) ~ 0.7929
UNIT_LAMBDA = 0.99


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    defaults: dict
    ladder: tuple[tuple[int, int], ...]
    oracle: str
    exact_kind: str | None
    build: Callable[["RunConfig", SpatialMesh], tuple[DiffusionField, Callable, Callable, Exact | None]]


@dataclass(frozen=True)
class BuiltProblem:
    problem: ProblemSpec
    exact: Exact | None


def _modes(mesh: SpatialMesh, points: np.ndarray) -> tuple[np.ndarray, list[float]]:
    """Product of first Dirichlet sine modes and the per-axis wave numbers."""
    out = np.ones(len(points))
    ks = []
    for axis, (lo, hi) in enumerate(mesh.bounds):
        k = math.pi / (hi - lo)
        out = out * np.sin(k * (points[:, axis] - lo))
        ks.append(k)
    return out, ks


def _zero(cfg, mesh):
    zero = lambda p, t=0.0: np.zeros(len(p))  # noqa: E731
    return DiffusionField.constant(np.eye(mesh.dim), UNIT_LAMBDA), zero, zero, zero


def _eigenmode(cfg, mesh):
    alpha = cfg.alpha
    lam = sum(k * k for k in _modes(mesh, mesh.nodes[:1])[1])

    def initial(p):
        return _modes(mesh, p)[0]

    def exact(p, t):
        return mittag_leffler(alpha, -lam * t**alpha) * _modes(mesh, p)[0]

    source = lambda p, t: np.zeros(len(p))  # noqa: E731
    return DiffusionField.constant(np.eye(mesh.dim), UNIT_LAMBDA), source, initial, exact


def _time_factor(alpha: float) -> tuple[Callable[[float], float], Callable[[float], float]]:
    """``1 + t^2`` and its Caputo derivative ``2 t^{2-alpha} / Gamma(3-alpha)``."""
    coeff = 2.0 / math.gamma(3.0 - alpha)
    return (lambda t: 1.0 + t * t), (lambda t: coeff * t ** (2.0 - alpha))


def _manufactured(cfg, mesh):
    q, dq = _time_factor(cfg.alpha)

    def source(p, t):
        s, (k,) = _modes(mesh, p)
        return s * dq(t) + k * k * q(t) * s

    initial = lambda p: _modes(mesh, p)[0]  # noqa: E731
    exact = lambda p, t: q(t) * _modes(mesh, p)[0]  # noqa: E731
    return DiffusionField.constant(np.eye(1), UNIT_LAMBDA), source, initial, exact


def _aniso2d(cfg, mesh):
    q, dq = _time_factor(cfg.alpha)
    (a11, a12), (_, a22) = ANISO_MATRIX
    (xlo, _), (ylo, _) = mesh.bounds

    def source(p, t):
        s, (k1, k2) = _modes(mesh, p)
        cc = np.cos(k1 * (p[:, 0] - xlo)) * np.cos(k2 * (p[:, 1] - ylo))
        return s * dq(t) + q(t) * ((a11 * k1 * k1 + a22 * k2 * k2) * s - 2.0 * a12 * k1 * k2 * cc)

    initial = lambda p: _modes(mesh, p)[0]  # noqa: E731
    exact = lambda p, t: q(t) * _modes(mesh, p)[0]  # noqa: E731
    return DiffusionField.constant(ANISO_MATRIX, ANISO_LAMBDA), source, initial, exact


def _stationary(cfg, mesh):
    """``f = M^{-1} A U_0`` so the discrete solution is constant in time."""
    a = DiffusionField.constant(np.eye(mesh.dim), UNIT_LAMBDA)
    initial = lambda p: _modes(mesh, p)[0]  # noqa: E731
    U0 = approximate_initial(initial, mesh)
    A, Mass = assemble_stiffness(mesh, a), assemble_mass(mesh)
    f = (A @ U0) / Mass.matrix.diagonal()
    return a, NodalSource(f, mesh.nodes), initial, None


_UNIT = {"alpha": 0.5, "T": 1.0, "bounds": [[0.0, 1.0]]}

PRESETS: dict[str, Preset] = {
    p.name: p
    for p in (
        Preset("zero", "u0 = 0, f = 0, a = 1 on (0,1)", {**_UNIT, "M": 64, "N": 63},
               ((16, 15), (32, 31), (64, 63)), "manufactured", "manufactured", _zero),
        Preset("eigenmode", "u0 = sin(pi x), f = 0, a = 1; exact E_alpha(-pi^2 t^alpha) sin(pi x)",
               {**_UNIT, "M": 256, "N": 255},
               ((128, 511), (256, 511), (512, 511), (1024, 511)), "eigenmode", "eigenmode", _eigenmode),
        Preset("manufactured", "exact u = (1 + t^2) sin(pi x), a = 1", {**_UNIT, "M": 256, "N": 255},
               ((64, 2047), (128, 2047), (256, 2047), (512, 2047)), "manufactured", "manufactured", _manufactured),
        Preset("aniso2d", "unit square, a = [[2, 0.5], [0.5, 1]], exact u = (1 + t^2) sin(pi x) sin(pi y)",
               {**_UNIT, "bounds": [[0.0, 1.0], [0.0, 1.0]], "M": 128, "N": 63},
               ((32, 15), (64, 31), (128, 63)), "none", "manufactured", _aniso2d),
        Preset("stationary", "u0 = sin(pi x), f = M^-1 A U0 (discrete steady state), a = 1",
               {**_UNIT, "M": 64, "N": 63},
               ((16, 63), (32, 63), (64, 63)), "none", None, _stationary),
    )
}


# -- custom problems from expressions --------------------------------------------------


def _expression_field(cfg: "RunConfig", mesh: SpatialMesh) -> DiffusionField:
    dim = mesh.dim
    if cfg.a is None or isinstance(cfg.a, str):
        scalar = Expression.parse(cfg.a or "1")
        evaluator = lambda p: np.asarray(scalar(p), dtype=float)[:, None, None] * np.eye(dim)  # noqa: E731
    else:
        entries = [[Expression.parse(e) for e in row] for row in cfg.a]

        def evaluator(p):
            out = np.empty((len(p), dim, dim))
            for i in range(dim):
                for j in range(dim):
                    out[:, i, j] = entries[i][j](p)
            return out

    lam = cfg.ellipticity
    if lam is None:
        # estimate from a fine sample including the faces and centres the assembly uses
        axes = [np.linspace(lo, hi, 2 * (n + 1) + 1) for (lo, hi), n in zip(mesh.bounds, mesh.shape)]
        pts = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
        smallest = float(np.linalg.eigvalsh(evaluator(pts))[:, 0].min())
        lam = min(UNIT_LAMBDA, 0.99 * smallest)
        if not lam > 0:
            from .elliptic import InvalidCoefficientsError

            raise InvalidCoefficientsError(f"coefficient is not elliptic (min eigenvalue {smallest:.6g})")
    return DiffusionField(evaluator, lam, dim)


def build_problem(cfg: "RunConfig") -> BuiltProblem:
    """Assemble the problem described by ``cfg``; expressions override preset data."""
    mesh = SpatialMesh(cfg.bounds, cfg.N)
    grid = TimeGrid(cfg.T, cfg.M)
    if cfg.preset is not None:
        a, f, u0, exact = PRESETS[cfg.preset].build(cfg, mesh)
        if cfg.overrides_data:
            exact = None
    else:
        a, f, u0, exact = None, None, None, None
    if cfg.a is not None or a is None:
        a = _expression_field(cfg, mesh)
    elif cfg.ellipticity is not None:
        a = DiffusionField(a.evaluator, cfg.ellipticity, a.dim)
    if cfg.f is not None or f is None:
        f_expr = Expression.parse(cfg.f or "0")
        f = lambda p, t: f_expr(p, t)  # noqa: E731
    if cfg.u0 is not None:
        u_expr = Expression.parse(cfg.u0)
        u0 = lambda p: u_expr(p)  # noqa: E731
    if cfg.exact is not None:
        ex = Expression.parse(cfg.exact)
        exact = lambda p, t: ex(p, t)  # noqa: E731
    name = cfg.preset or "custom"
    return BuiltProblem(ProblemSpec(cfg.alpha, grid, mesh, a, f, u0, name=name), exact)
