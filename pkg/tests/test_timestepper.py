import math

import numpy as np
import pytest

from conftest import eigenmode_history, eigenmode_problem, manufactured_history, sine_initial, zero_source
from subdiffusion.elliptic import DiffusionField, SpatialMesh, assemble_mass, assemble_stiffness
from subdiffusion.fracderiv import TimeGrid, discrete_caputo, mittag_leffler
from subdiffusion.timestepper import (
    Discretization,
    NodalSource,
    ProblemSpec,
    Reconstruction,
    StepEvent,
    advance,
    approximate_initial,
    evaluate,
    run,
    step_increment_sup,
)


def unit_problem(M, N, source=zero_source, initial=sine_initial, alpha=0.5, a=None):
    mesh = SpatialMesh.interval(0.0, 1.0, N)
    a = a or DiffusionField.constant([[1.0]], 0.99)
    return ProblemSpec(alpha, TimeGrid(1.0, M), mesh, a, source, initial)


# -- initial data ----------------------------------------------------------------------


def test_initial_zero_and_sine():
    mesh = SpatialMesh.interval(0.0, 1.0, 15)
    np.testing.assert_array_equal(approximate_initial(lambda p: np.zeros(len(p)), mesh), 0.0)
    U0 = approximate_initial(sine_initial, mesh)
    np.testing.assert_allclose(U0, np.sin(np.pi * mesh.nodes[:, 0]))
    assert np.all(np.abs(sine_initial(mesh.boundary_nodes)) <= 1e-12)


def test_initial_interpolation_gap_bound():
    N = 31
    mesh = SpatialMesh.interval(0.0, 1.0, N)
    u0 = lambda p: p[:, 0] * (1 - p[:, 0])  # noqa: E731
    U0 = approximate_initial(u0, mesh)
    xs = np.linspace(0, 1, 20001)
    full = np.concatenate([[0.0], U0, [0.0]])
    grid = np.linspace(0, 1, N + 2)
    gap = np.max(np.abs(np.interp(xs, grid, full) - xs * (1 - xs)))
    dx = mesh.spacing[0]
    assert gap <= dx**2 / 4 * (1 + 1e-9)


def test_initial_rejects_nonzero_boundary():
    mesh = SpatialMesh.interval(0.0, 1.0, 7)
    with pytest.raises(ValueError, match="vanish on the boundary"):
        approximate_initial(lambda p: np.cos(p[:, 0]), mesh)


def test_nonfinite_source_rejected():
    prob = unit_problem(4, 7, source=lambda p, t: np.full(len(p), np.nan))
    with pytest.raises(ValueError, match="not finite"):
        run(prob)


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        ProblemSpec(0.5, TimeGrid(1, 4), SpatialMesh.interval(0, 1, 5), DiffusionField.constant(np.eye(2), 0.5),
                    zero_source, sine_initial)


# -- stepping --------------------------------------------------------------------------


def test_zero_problem_stays_zero():
    h = run(unit_problem(16, 15, initial=lambda p: np.zeros(len(p))))
    np.testing.assert_array_equal(h.fields, 0.0)


def test_single_step_run():
    h = run(unit_problem(1, 9))
    assert h.fields.shape == (2, 9)


def test_first_step_is_plain_implicit_step():
    prob = unit_problem(8, 31, source=lambda p, t: np.sin(p[:, 0]) * (1 + t))
    disc = Discretization(prob)
    U0 = approximate_initial(prob.initial, prob.mesh)
    U1 = advance(disc, U0[None, :], 1)
    A, Mass = disc.stiffness.matrix.toarray(), disc.mass.matrix.toarray()
    rhs = Mass @ (disc.c * U0 + prob.source_at(prob.grid.h))
    np.testing.assert_allclose(U1, np.linalg.solve(disc.c * Mass + A, rhs), rtol=1e-12)


def test_advance_preconditions():
    disc = Discretization(unit_problem(4, 7))
    with pytest.raises(IndexError):
        disc.advance(np.zeros((5, 7)), 5)
    with pytest.raises(ValueError):
        disc.advance(np.zeros((1, 7)), 3)


def test_eigenmode_final_midnode():
    h = eigenmode_history(256, 255)
    mid = 127  # x = 0.5
    assert h.mesh.nodes[mid, 0] == 0.5
    ref = mittag_leffler(0.5, -math.pi**2)
    assert abs(h.fields[-1, mid] - ref) / ref <= 0.05


def test_eigenmode_refinement_max_over_time_error():
    errs = []
    for M, N in ((16, 15), (32, 31), (64, 63), (128, 127)):
        h = eigenmode_history(M, N)
        x = h.mesh.nodes[:, 0]
        e = max(
            np.max(np.abs(h.fields[m] - mittag_leffler(0.5, -math.pi**2 * t**0.5) * np.sin(np.pi * x)))
            for m, t in enumerate(h.grid.times)
        )
        errs.append(e)
    for a, b in zip(errs, errs[1:]):
        assert b <= 1.1 * a


def test_run_is_deterministic_and_immutable():
    a = run(eigenmode_problem(32, 31))
    b = run(eigenmode_problem(32, 31))
    assert np.array_equal(a.fields, b.fields)
    with pytest.raises(ValueError):
        a.fields[0, 0] = 1.0


def test_progress_events():
    events = []
    run(eigenmode_problem(10, 7), progress=events.append)
    assert [e.step for e in events] == list(range(1, 11))
    assert all(isinstance(e, StepEvent) and e.residual <= 1e-10 and e.wall_time >= 0 for e in events)


def test_equation_residual_post_hoc():
    h = manufactured_history(64, 63)
    disc = h.disc
    for m in range(1, h.M + 1):
        rhs = disc.step_rhs(h.fields, m)
        res = np.linalg.norm(disc.solver.matrix @ h.fields[m] - rhs)
        assert res <= 1e-9 * (1 + np.linalg.norm(rhs))


def test_discrete_caputo_identity_per_step():
    h = manufactured_history(64, 63)
    disc = h.disc
    for m in range(1, h.M + 1):
        dcap = discrete_caputo(h.table, h.grid, h.fields[: m + 1], m)
        lhs = disc.mass @ dcap + disc.stiffness @ h.fields[m]
        rhs = disc.mass @ h.sources[m]
        assert np.linalg.norm(lhs - rhs) <= 1e-8 * (1 + np.linalg.norm(rhs))


def _stationary(M, N, alpha=0.5):
    mesh = SpatialMesh.interval(0.0, 1.0, N)
    a = DiffusionField.isotropic(lambda p: 1 + p[:, 0], 0.99)
    U0 = approximate_initial(lambda p: p[:, 0] ** 2 * (1 - p[:, 0]), mesh)
    f = (assemble_stiffness(mesh, a) @ U0) / assemble_mass(mesh).matrix.diagonal()
    return ProblemSpec(alpha, TimeGrid(1.0, M), mesh, a, NodalSource(f, mesh.nodes), lambda p: p[:, 0] ** 2 * (1 - p[:, 0]))


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.9])
def test_stationary_solution_is_reproduced(alpha):
    h = run(_stationary(40, 31, alpha))
    assert np.max(np.abs(h.fields - h.fields[0])) <= 10 * 1e-10 * max(1.0, np.max(np.abs(h.fields[0])))
    assert step_increment_sup(h) <= 10 * 1e-10


def test_nodal_source_only_at_nodes():
    mesh = SpatialMesh.interval(0, 1, 5)
    src = NodalSource(np.ones(5), mesh.nodes)
    with pytest.raises(ValueError):
        src(mesh.nodes[:3], 0.0)


def test_nonnegative_data_gives_nonnegative_solution(rng):
    for _ in range(20):
        N, M = int(rng.integers(5, 40)), int(rng.integers(4, 40))
        alpha = float(rng.uniform(0.1, 0.9))
        c = rng.uniform(0, 2, size=3)
        src = lambda p, t, c=c: c[0] * np.sin(np.pi * p[:, 0]) ** 2 * (1 + c[1] * t)  # noqa: E731
        ini = lambda p, c=c: c[2] * p[:, 0] * (1 - p[:, 0])  # noqa: E731
        coef = DiffusionField.isotropic(lambda p, c=c: 1 + c[0] * p[:, 0] ** 2, 0.99)
        h = run(unit_problem(M, N, source=src, initial=ini, alpha=alpha, a=coef))
        assert np.min(h.fields) >= -10 * 1e-10


# -- reconstructions -----------------------------------------------------------------


def test_reconstruction_grid_points_and_midpoints():
    h = eigenmode_history(32, 31)
    pc, pl = Reconstruction(h, "constant"), Reconstruction(h, "linear")
    for m in range(h.M + 1):
        t = h.grid.times[m]
        np.testing.assert_array_equal(pc.field(t), h.fields[m])
        np.testing.assert_array_equal(pl.field(t), h.fields[m])
    m, node = 7, 12
    t = (m + 0.5) * h.h
    assert evaluate(pl, node, t) == pytest.approx(0.5 * (h.fields[m, node] + h.fields[m + 1, node]), rel=1e-14)
    assert evaluate(pc, node, t) == h.fields[m, node]
    assert evaluate(pc, node, h.grid.T) == h.fields[-1, node]


def test_reconstruction_range_and_mode():
    h = eigenmode_history(32, 31)
    with pytest.raises(ValueError):
        Reconstruction(h, "linear").field(1.5)
    with pytest.raises(ValueError):
        Reconstruction(h, "cubic")


def test_constant_vs_linear_gap_equals_increment_sup():
    sups = []
    for M in (32, 64):
        h = eigenmode_history(M, 31)
        pc, pl = Reconstruction(h, "constant"), Reconstruction(h, "linear")
        ts = np.linspace(0, 1, 8 * M + 1)
        ts = np.concatenate([ts, h.grid.times[1:] - 1e-6 * h.h])
        gap = max(np.max(np.abs(pc.field(t) - pl.field(t))) for t in ts)
        assert gap <= step_increment_sup(h) * (1 + 1e-6)
        assert gap >= step_increment_sup(h) * (1 - 1e-5)
        sups.append(step_increment_sup(h))
    assert sups[1] < sups[0]


def test_increment_sup_zero_history():
    h = run(unit_problem(8, 7, initial=lambda p: np.zeros(len(p))))
    assert step_increment_sup(h) == 0.0
