"""Implicit time march for ``d_t^alpha u + L u = f`` and its time reconstructions."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Literal

import numpy as np

from .elliptic import (
    DiffusionField,
    SparseOperator,
    SpatialMesh,
    StepSolver,
    assemble_mass,
    assemble_stiffness,
    laplacian,
)
from .fracderiv import CoefficientTable, TimeGrid, build_coefficients, validate_order

logger = logging.getLogger(__name__)

Source = Callable[[np.ndarray, float], np.ndarray]
Initial = Callable[[np.ndarray], np.ndarray]

BOUNDARY_ATOL = 1e-12


@dataclass(frozen=True)
class ProblemSpec:
    """Data of the initial-boundary value problem.

    ``source(points, t)`` and ``initial(points)`` take node coordinates of
    shape ``(n, d)`` and return one value per point.
    """

    alpha: float
    grid: TimeGrid
    mesh: SpatialMesh
    diffusion: DiffusionField
    source: Source
    initial: Initial
    name: str = "custom"

    def __post_init__(self) -> None:
        object.__setattr__(self, "alpha", validate_order(self.alpha))
        if self.diffusion.dim != self.mesh.dim:
            raise ValueError("diffusion field and mesh dimensions differ")

    def source_at(self, t: float) -> np.ndarray:
        """Source sampled at the interior nodes at time ``t``."""
        nodes = self.mesh.nodes
        vals = np.broadcast_to(np.asarray(self.source(nodes, t), dtype=float), (len(nodes),))
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"source is not finite at t={t}")
        return np.array(vals)


class NodalSource:
    """Time-independent source given directly by its interior nodal values.

    Lets a problem use a source defined through the discrete operator
    (e.g. ``f = M^{-1} A u0``), which continuous expressions cannot express.
    """

    def __init__(self, values: np.ndarray, nodes: np.ndarray):
        self.values = np.asarray(values, dtype=float)
        self._nodes = np.asarray(nodes, dtype=float)

    def __call__(self, points: np.ndarray, t: float) -> np.ndarray:
        if points.shape != self._nodes.shape or not np.array_equal(points, self._nodes):
            raise ValueError("nodal source can only be evaluated at the mesh nodes")
        return self.values


def approximate_initial(u0: Initial, mesh: SpatialMesh) -> np.ndarray:
    """Nodal interpolant of ``u0``; rejects data that does not vanish on the boundary."""
    boundary = np.asarray(u0(mesh.boundary_nodes), dtype=float)
    worst = float(np.max(np.abs(boundary))) if boundary.size else 0.0
    if worst > BOUNDARY_ATOL:
        raise ValueError(f"initial datum must vanish on the boundary (max |u0| = {worst:.3e})")
    vals = np.broadcast_to(np.asarray(u0(mesh.nodes), dtype=float), (mesh.n_dof,))
    return np.array(vals)


@dataclass(frozen=True)
class StepEvent:
    step: int
    residual: float
    wall_time: float


class Discretization:
    """Operators, weights and solver shared by every step of one problem."""

    def __init__(self, problem: ProblemSpec):
        self.problem = problem
        self.table: CoefficientTable = build_coefficients(problem.alpha, problem.grid.M)
        self.stiffness: SparseOperator = assemble_stiffness(problem.mesh, problem.diffusion)
        self.mass: SparseOperator = assemble_mass(problem.mesh)
        self.gradient: SparseOperator = laplacian(problem.mesh)
        self.c = self.table.caputo_factor(problem.grid.h)
        self.solver = StepSolver(self.stiffness, self.mass, self.c)

    def step_rhs(self, fields: np.ndarray, m: int) -> np.ndarray:
        """``M (c sum_k C_{m,k} U_k + f(., m h))``."""
        history = self.table.row(m) @ fields[:m]
        f_m = self.problem.source_at(m * self.problem.grid.h)
        return self.mass @ (self.c * history + f_m)

    def advance(self, fields: np.ndarray, m: int) -> tuple[np.ndarray, float]:
        """Compute ``U_m`` from ``fields[0:m]``; returns the field and its relative residual."""
        if not 1 <= m <= self.problem.grid.M:
            raise IndexError(f"step m={m} outside 1..{self.problem.grid.M}")
        if len(fields) < m:
            raise ValueError(f"need U_0..U_{m - 1}, got {len(fields)} fields")
        rhs = self.step_rhs(fields, m)
        return self.solver.solve(rhs, x0=fields[m - 1])


def advance(disc: Discretization, fields: np.ndarray, m: int) -> np.ndarray:
    return disc.advance(fields, m)[0]


@dataclass(frozen=True)
class SchemeHistory:
    """Fields ``U_0, ..., U_M`` (rows of ``fields``) with their discretisation."""

    fields: np.ndarray
    disc: Discretization = field(repr=False)
    residuals: np.ndarray = field(repr=False)

    @property
    def problem(self) -> ProblemSpec:
        return self.disc.problem

    @property
    def table(self) -> CoefficientTable:
        return self.disc.table

    @property
    def grid(self) -> TimeGrid:
        return self.disc.problem.grid

    @property
    def mesh(self) -> SpatialMesh:
        return self.disc.problem.mesh

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def M(self) -> int:
        return self.grid.M

    @cached_property
    def sources(self) -> np.ndarray:
        """``f(., m h)`` at the nodes, one row per ``m = 0..M``."""
        return np.array([self.problem.source_at(t) for t in self.grid.times])

    def with_fields(self, fields: np.ndarray) -> "SchemeHistory":
        """Copy carrying different fields; diagnostics use it for fault injection."""
        fields = np.array(fields, dtype=float)
        fields.setflags(write=False)
        return SchemeHistory(fields, self.disc, self.residuals)


def run(problem: ProblemSpec, progress: Callable[[StepEvent], None] | None = None) -> SchemeHistory:
    """March ``U_0 .. U_M``; ``progress`` receives one :class:`StepEvent` per step."""
    disc = Discretization(problem)
    M = problem.grid.M
    fields = np.empty((M + 1, problem.mesh.n_dof))
    fields[0] = approximate_initial(problem.initial, problem.mesh)
    residuals = np.zeros(M)
    start = time.perf_counter()
    for m in range(1, M + 1):
        fields[m], residuals[m - 1] = disc.advance(fields, m)
        if progress is not None:
            progress(StepEvent(m, residuals[m - 1], time.perf_counter() - start))
    logger.debug("ran %d steps in %.3fs", M, time.perf_counter() - start)
    fields.setflags(write=False)
    residuals.setflags(write=False)
    return SchemeHistory(fields, disc, residuals)


def _interval_index(t: float, h: float, M: int) -> tuple[int, float]:
    """Step index ``m`` with ``t`` in ``[m h, (m+1) h)`` and the offset ``t - m h``."""
    q = t / h
    m = int(round(q)) if abs(q - round(q)) < 1e-9 else int(np.floor(q))
    m = min(m, M)
    return m, t - m * h


@dataclass(frozen=True)
class Reconstruction:
    """Piecewise-constant (``"constant"``) or piecewise-linear (``"linear"``) interpolant in time."""

    history: SchemeHistory
    mode: Literal["constant", "linear"] = "linear"

    def __post_init__(self) -> None:
        if self.mode not in ("constant", "linear"):
            raise ValueError(f"unknown reconstruction mode {self.mode!r}")

    def field(self, t: float) -> np.ndarray:
        T, h, M = self.history.grid.T, self.history.h, self.history.M
        if not 0.0 <= t <= T * (1 + 1e-14):
            raise ValueError(f"t={t} outside [0, {T}]")
        m, offset = _interval_index(t, h, M)
        U = self.history.fields
        if self.mode == "constant" or m == M or offset == 0.0:
            return U[m]
        return U[m] + (U[m + 1] - U[m]) * (offset / h)

    def evaluate(self, node: int, t: float) -> float:
        return float(self.field(t)[node])


def evaluate(recon: Reconstruction, node: int, t: float) -> float:
    return recon.evaluate(node, t)


def step_increment_sup(history: SchemeHistory) -> float:
    """``max_k |U_{k+1} - U_k|_inf``."""
    if history.M == 0:
        return 0.0
    return float(np.max(np.abs(np.diff(history.fields, axis=0))))
