"""Spatial discretisation of ``L u = -div(a grad u)`` with homogeneous Dirichlet data.

Intervals use P1 finite elements with the coefficient sampled at element
midpoints and a lumped mass matrix.  Rectangles use a face-flux stencil: the
diagonal coefficients live on cell faces, the off-diagonal one on cell
centres, which keeps the operator exactly symmetric and reduces to the
5-point Laplacian (times the cell area) when ``a`` is the identity.

All operators act on interior nodes only; boundary nodes carry no unknowns.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)


class InvalidCoefficientsError(ValueError):
    """The diffusion field is not symmetric or not uniformly elliptic."""


class SolverError(RuntimeError):
    """A linear solve missed its residual tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SpatialMesh:
    """Uniform tensor grid on an interval or rectangle.

    ``bounds`` holds one ``(lo, hi)`` pair per axis and ``shape`` the number of
    interior nodes per axis.  In 2D the unknowns are ordered with x fastest.
    """

    bounds: tuple[tuple[float, float], ...]
    shape: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.bounds) != len(self.shape) or len(self.shape) not in (1, 2):
            raise ValueError("mesh must be 1D or 2D with one bound pair per axis")
        for (lo, hi), n in zip(self.bounds, self.shape):
            if not hi > lo:
                raise ValueError(f"empty axis ({lo}, {hi})")
            if int(n) != n or n < 2:
                raise ValueError(f"need at least two interior nodes per axis, got {n}")
        object.__setattr__(self, "bounds", tuple((float(lo), float(hi)) for lo, hi in self.bounds))
        object.__setattr__(self, "shape", tuple(int(n) for n in self.shape))

    @classmethod
    def interval(cls, lo: float, hi: float, n: int) -> "SpatialMesh":
        return cls(((lo, hi),), (n,))

    @classmethod
    def rectangle(
        cls, x: tuple[float, float], y: tuple[float, float], nx: int, ny: int
    ) -> "SpatialMesh":
        return cls((tuple(x), tuple(y)), (nx, ny))

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / (n + 1) for (lo, hi), n in zip(self.bounds, self.shape))

    @property
    def n_dof(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def measure(self) -> float:
        return float(np.prod([hi - lo for lo, hi in self.bounds]))

    def axis(self, i: int, with_boundary: bool = False) -> np.ndarray:
        (lo, hi), n = self.bounds[i], self.shape[i]
        full = np.linspace(lo, hi, n + 2)
        return full if with_boundary else full[1:-1]

    @property
    def nodes(self) -> np.ndarray:
        """Interior node coordinates, shape ``(n_dof, dim)``."""
        if self.dim == 1:
            return self.axis(0)[:, None]
        xx, yy = np.meshgrid(self.axis(0), self.axis(1), indexing="xy")
        return np.column_stack([xx.ravel(), yy.ravel()])

    @property
    def boundary_nodes(self) -> np.ndarray:
        if self.dim == 1:
            return np.array([[self.bounds[0][0]], [self.bounds[0][1]]])
        x, y = self.axis(0, True), self.axis(1, True)
        pts = [np.column_stack([x, np.full_like(x, y[0])]), np.column_stack([x, np.full_like(x, y[-1])])]
        pts += [np.column_stack([np.full_like(y, x[0]), y]), np.column_stack([np.full_like(y, x[-1]), y])]
        return np.vstack(pts)

    def full_grid(self, values: np.ndarray) -> np.ndarray:
        """Embed interior values in an array that includes the zero boundary."""
        if self.dim == 1:
            out = np.zeros(self.shape[0] + 2)
            out[1:-1] = values
            return out
        nx, ny = self.shape
        out = np.zeros((ny + 2, nx + 2))
        out[1:-1, 1:-1] = np.reshape(values, (ny, nx))
        return out


@dataclass(frozen=True)
class DiffusionField:
    """Coefficient matrix field ``a(x)`` with its ellipticity constant ``lambda``.

    ``evaluator`` maps points of shape ``(n, d)`` to matrices of shape ``(n, d, d)``.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    ellipticity_lambda: float
    dim: int

    def __post_init__(self) -> None:
        if not 0.0 < self.ellipticity_lambda < 1.0:
            raise InvalidCoefficientsError(
                f"ellipticity constant must lie in (0,1), got {self.ellipticity_lambda!r}"
            )

    @classmethod
    def constant(cls, matrix, ellipticity_lambda: float) -> "DiffusionField":
        mat = np.atleast_2d(np.asarray(matrix, dtype=float))

        def evaluator(points: np.ndarray) -> np.ndarray:
            return np.broadcast_to(mat, (len(points),) + mat.shape).copy()

        return cls(evaluator, ellipticity_lambda, mat.shape[0])

    @classmethod
    def isotropic(cls, func: Callable[[np.ndarray], np.ndarray], ellipticity_lambda: float, dim: int = 1):
        """Scalar coefficient ``a(x) I``; ``func`` maps ``(n, d)`` points to ``(n,)``."""
        eye = np.eye(dim)

        def evaluator(points: np.ndarray) -> np.ndarray:
            vals = np.broadcast_to(np.asarray(func(points), dtype=float), (len(points),))
            return vals[:, None, None] * eye

        return cls(evaluator, ellipticity_lambda, dim)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Evaluate and validate symmetry and ellipticity at ``points``."""
        points = np.asarray(points, dtype=float)
        a = np.asarray(self.evaluator(points), dtype=float)
        if a.shape != (len(points), self.dim, self.dim):
            raise InvalidCoefficientsError(f"coefficient evaluator returned shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise InvalidCoefficientsError("coefficient field is not finite")
        if not np.array_equal(a, np.swapaxes(a, 1, 2)):
            raise InvalidCoefficientsError("coefficient matrix is not symmetric")
        smallest = np.linalg.eigvalsh(a)[:, 0].min()
        if smallest < self.ellipticity_lambda * (1.0 - 1e-12):
            raise InvalidCoefficientsError(
                f"ellipticity violated: min eigenvalue {smallest:.6g} < lambda={self.ellipticity_lambda}"
            )
        return a


@dataclass(frozen=True)
class SparseOperator:
    matrix: sp.csr_matrix
    symmetric: bool
    positive_definite: bool

    def __matmul__(self, other):
        return self.matrix @ other

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape

    def quadratic(self, u: np.ndarray) -> np.ndarray:
        """``u^T A u`` for a single field or row-wise for a stack of fields."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return float(u @ (self.matrix @ u))
        return np.einsum("ij,ij->i", u, (self.matrix @ u.T).T)


def _pd_probe(A: sp.csr_matrix) -> bool:
    """True iff every pivot of an unpivoted factorisation of ``A`` is positive."""
    if A.shape[0] == 0:
        return True
    diag = A.diagonal()
    if np.any(diag <= 0):
        return False
    coo = A.tocoo()
    bandwidth = int(np.max(np.abs(coo.col - coo.row)))
    if bandwidth <= 1:
        ab = np.zeros((2, A.shape[0]))
        ab[1] = diag
        ab[0, 1:] = A.diagonal(1)
        try:
            sla.cholesky_banded(ab)
        except sla.LinAlgError:
            return False
        return True
    lu = spla.splu(
        A.tocsc(),
        permc_spec="MMD_AT_PLUS_A",
        diag_pivot_thresh=0.0,
        options={"SymmetricMode": True},
    )
    return bool(np.all(lu.U.diagonal() > 0))


def _stiffness_1d(mesh: SpatialMesh, a: DiffusionField) -> sp.csr_matrix:
    (dx,) = mesh.spacing
    mid = mesh.axis(0, with_boundary=True)
    mid = 0.5 * (mid[:-1] + mid[1:])
    k = a.sample(mid[:, None])[:, 0, 0] / dx
    main = k[:-1] + k[1:]
    off = -k[1:-1]
    return sp.diags([off, main, off], [-1, 0, 1], format="csr")


def _stiffness_2d(mesh: SpatialMesh, a: DiffusionField) -> sp.csr_matrix:
    nx, ny = mesh.shape
    dx, dy = mesh.spacing
    xs, ys = mesh.axis(0, True), mesh.axis(1, True)

    def dof(i, j):
        # full-grid indices -> unknown index, -1 on the boundary
        inside = (i >= 1) & (i <= nx) & (j >= 1) & (j <= ny)
        return np.where(inside, (i - 1) + nx * (j - 1), -1)

    rows, cols, vals = [], [], []

    def add_pair_form(p, q, w):
        # w (u_q - u_p)(v_q - v_p)
        for r, c, s in ((p, p, 1.0), (q, q, 1.0), (p, q, -1.0), (q, p, -1.0)):
            keep = (r >= 0) & (c >= 0)
            rows.append(r[keep]); cols.append(c[keep]); vals.append(s * w[keep])

    # x-faces: between (i, j) and (i+1, j), interior rows j
    I, J = np.meshgrid(np.arange(nx + 1), np.arange(1, ny + 1), indexing="xy")
    I, J = I.ravel(), J.ravel()
    pts = np.column_stack([0.5 * (xs[I] + xs[I + 1]), ys[J]])
    a11 = a.sample(pts)[:, 0, 0]
    add_pair_form(dof(I, J), dof(I + 1, J), a11 * dy / dx)

    # y-faces: between (i, j) and (i, j+1), interior columns i
    I, J = np.meshgrid(np.arange(1, nx + 1), np.arange(ny + 1), indexing="xy")
    I, J = I.ravel(), J.ravel()
    pts = np.column_stack([xs[I], 0.5 * (ys[J] + ys[J + 1])])
    a22 = a.sample(pts)[:, 1, 1]
    add_pair_form(dof(I, J), dof(I, J + 1), a22 * dx / dy)

    # cross term on cells: a12 * area * (Dx u Dy v + Dy u Dx v)
    I, J = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="xy")
    I, J = I.ravel(), J.ravel()
    pts = np.column_stack([0.5 * (xs[I] + xs[I + 1]), 0.5 * (ys[J] + ys[J + 1])])
    a12 = a.sample(pts)[:, 0, 1]
    if np.any(a12 != 0):
        corners = [dof(I, J), dof(I + 1, J), dof(I, J + 1), dof(I + 1, J + 1)]
        gx = np.array([-1.0, 1.0, -1.0, 1.0]) / (2 * dx)
        gy = np.array([-1.0, -1.0, 1.0, 1.0]) / (2 * dy)
        local = np.outer(gx, gy) + np.outer(gy, gx)
        w = a12 * dx * dy
        for p in range(4):
            for q in range(4):
                keep = (corners[p] >= 0) & (corners[q] >= 0)
                rows.append(corners[p][keep]); cols.append(corners[q][keep])
                vals.append(local[p, q] * w[keep])

    n = mesh.n_dof
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()
    A.eliminate_zeros()
    # exact bitwise symmetry
    return ((A + A.T) * 0.5).tocsr()


def assemble_stiffness(mesh: SpatialMesh, a: DiffusionField) -> SparseOperator:
    """Symmetric positive definite matrix of ``sum_ij int a_ij d_j u d_i v``."""
    if a.dim != mesh.dim:
        raise ValueError(f"coefficient dimension {a.dim} does not match mesh dimension {mesh.dim}")
    A = _stiffness_1d(mesh, a) if mesh.dim == 1 else _stiffness_2d(mesh, a)
    if not _pd_probe(A):
        raise InvalidCoefficientsError("stiffness matrix failed the positive-pivot probe")
    return SparseOperator(A, symmetric=True, positive_definite=True)


def laplacian(mesh: SpatialMesh) -> SparseOperator:
    """Stiffness matrix for ``a = I``; its quadratic form is the discrete ``|grad u|^2``."""
    eye = DiffusionField.constant(np.eye(mesh.dim), 0.5)
    return assemble_stiffness(mesh, eye)


def assemble_mass(mesh: SpatialMesh) -> SparseOperator:
    """Lumped mass matrix: cell volume on the diagonal."""
    M = sp.identity(mesh.n_dof, format="csr") * mesh.cell_volume
    return SparseOperator(M.tocsr(), symmetric=True, positive_definite=True)


def load_vector(mass: SparseOperator, values: np.ndarray) -> np.ndarray:
    return mass @ np.asarray(values, dtype=float)


def discrete_norms(u: np.ndarray, grad_op: SparseOperator, mass: SparseOperator) -> tuple[float, float]:
    """Discrete ``L2`` norm and ``H1`` seminorm of a nodal field.

    ``grad_op`` must be the identity-coefficient stiffness (:func:`laplacian`)
    so the seminorm does not depend on the problem's coefficient.
    """
    u = np.asarray(u, dtype=float)
    return float(np.sqrt(max(mass.quadratic(u), 0.0))), float(np.sqrt(max(grad_op.quadratic(u), 0.0)))


# -- linear solves ---------------------------------------------------------------

RESIDUAL_RTOL = 1e-10


def pcg(
    A: sp.csr_matrix,
    b: np.ndarray,
    x0: np.ndarray | None = None,
    rtol: float = RESIDUAL_RTOL,
    maxiter: int | None = None,
) -> tuple[np.ndarray, int]:
    """Jacobi-preconditioned conjugate gradients. Returns (x, iterations)."""
    n = len(b)
    maxiter = 20 * n if maxiter is None else maxiter
    inv_diag = 1.0 / A.diagonal()
    normb = np.linalg.norm(b)
    if normb == 0.0:
        return np.zeros(n), 0
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - A @ x
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    target = rtol * normb
    for it in range(1, maxiter + 1):
        if np.linalg.norm(r) <= target:
            return x, it - 1
        Ap = A @ p
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        z = inv_diag * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter


class StepSolver:
    """Solver for ``(c M + A) U = rhs`` with ``c`` fixed across time steps.

    1D systems are factored once (banded Cholesky) and polished by iterative
    refinement; 2D systems use Jacobi-preconditioned CG with the previous step
    as initial guess.
    """

    def __init__(self, A: SparseOperator, mass: SparseOperator, c: float, rtol: float = RESIDUAL_RTOL):
        if not c > 0:
            raise ValueError(f"mass coefficient c must be positive, got {c!r}")
        if A.shape != mass.shape:
            raise ValueError("operators do not share a mesh")
        self.matrix = (c * mass.matrix + A.matrix).tocsr()
        self.rtol = rtol
        self._chol = None
        if self._is_tridiagonal():
            ab = np.zeros((2, self.matrix.shape[0]))
            ab[1] = self.matrix.diagonal()
            ab[0, 1:] = self.matrix.diagonal(1)
            self._chol = sla.cholesky_banded(ab)

    def _is_tridiagonal(self) -> bool:
        coo = self.matrix.tocoo()
        return coo.nnz == 0 or int(np.max(np.abs(coo.col - coo.row))) <= 1

    def residual(self, U: np.ndarray, rhs: np.ndarray) -> float:
        """Relative residual ``|(cM + A) U - rhs| / |rhs|`` (absolute if rhs = 0)."""
        res = np.linalg.norm(self.matrix @ U - rhs)
        nb = np.linalg.norm(rhs)
        return float(res / nb) if nb > 0 else float(res)

    def solve(self, rhs: np.ndarray, x0: np.ndarray | None = None) -> tuple[np.ndarray, float]:
        rhs = np.asarray(rhs, dtype=float)
        if not np.any(rhs):
            return np.zeros_like(rhs), 0.0
        if self._chol is not None:
            U = sla.cho_solve_banded((self._chol, False), rhs)
            for _ in range(3):
                res = self.residual(U, rhs)
                if res <= self.rtol:
                    break
                U = U + sla.cho_solve_banded((self._chol, False), rhs - self.matrix @ U)
        else:
            U = x0
            for _ in range(3):
                U, its = pcg(self.matrix, rhs, U, rtol=self.rtol)
                logger.debug("pcg finished in %d iterations", its)
                if self.residual(U, rhs) <= self.rtol:
                    break
        res = self.residual(U, rhs)
        if res > self.rtol:
            raise SolverError("step system did not reach tolerance", res)
        return U, res


def solve_step_system(A: SparseOperator, mass: SparseOperator, c: float, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(c M + A) U = rhs`` to relative residual 1e-10."""
    U, _ = StepSolver(A, mass, c).solve(rhs)
    return U
