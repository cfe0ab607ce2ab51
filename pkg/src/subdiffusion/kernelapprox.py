"""Piecewise-linear approximation of ``g_{3-alpha}`` and the functionals built on it.

``G[u^h](t) = (g_{2-alpha} * du^h/ds)(t)`` has a closed form because ``u^h`` is
piecewise linear in time: it is a weighted sum of the step increments
``D_k = (U_{k+1} - U_k) / h`` with weights

    w_k(t) = K(t - k h) - K(t - (k+1) h),   K = g_{3-alpha} extended by 0 for t <= 0.

Replacing ``K`` by the kernel approximation gives ``G^h[u^h]``.  Both are
evaluated through the same weight-matrix machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fracderiv import TimeGrid, causal_kernel, validate_order
from .timestepper import SchemeHistory


class MarginError(ValueError):
    """A temporal test function does not vanish near 0 and T at the current step."""


@dataclass(frozen=True)
class KernelApprox:
    """``g^h_{3-alpha}``: zero on ``[0, h]``, linear with slope ``g_{2-alpha}(m h)`` on ``(m h, (m+1) h)``.

    Defined on ``[0, T + h]``; ``breakpoints[m]`` is the value at ``t = m h`` for
    ``m = 0..M+1`` and ``slopes[m]`` the slope on the ``m``-th interval.
    """

    alpha: float
    grid: TimeGrid
    breakpoints: np.ndarray = field(repr=False)
    slopes: np.ndarray = field(repr=False)

    def __call__(self, t: np.ndarray | float) -> np.ndarray:
        """Evaluate, extended by zero for ``t <= 0``."""
        t_arr = np.asarray(t, dtype=float)
        h = self.grid.h
        m = np.clip(np.floor(t_arr / h).astype(int), 0, self.grid.M)
        out = self.breakpoints[m] + self.slopes[m] * (t_arr - m * h)
        out = np.where(t_arr <= h, 0.0, out)
        return float(out) if np.ndim(t) == 0 else out

    def exact(self, t: np.ndarray | float) -> np.ndarray:
        return causal_kernel(3.0 - self.alpha, t)

    def gap(self, t: np.ndarray | float) -> np.ndarray:
        """``l^h(t) = g_{3-alpha}(t) - g^h_{3-alpha}(t)``."""
        return self.exact(t) - self(t)


def build_kernel_approx(alpha: float, grid: TimeGrid) -> KernelApprox:
    alpha = validate_order(alpha)
    h, M = grid.h, grid.M
    slopes = causal_kernel(2.0 - alpha, np.arange(M + 1) * h)  # g_{2-alpha}(0) = 0
    breakpoints = np.concatenate([[0.0], np.cumsum(slopes * h)])
    for arr in (slopes, breakpoints):
        arr.setflags(write=False)
    return KernelApprox(alpha, grid, breakpoints, slopes)


@dataclass(frozen=True)
class KernelGapReport:
    sup_gap: float
    attained_at: float
    closed_form: float
    sampled_sup: float
    proof_bound: float
    gap_over_h: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in self.__dict__.items()}


def closed_form_gap(alpha: float, grid: TimeGrid) -> float:
    """``h^{2-a}/Gamma(3-a) (M^{2-a} - (2-a) sum_{k<M} k^{1-a})``, summed with :func:`math.fsum`."""
    M, h = grid.M, grid.h
    s = math.fsum((np.arange(M, dtype=float) ** (1.0 - alpha)).tolist())
    return h ** (2.0 - alpha) / math.gamma(3.0 - alpha) * (M ** (2.0 - alpha) - (2.0 - alpha) * s)


def kernel_gap_sup(approx: KernelApprox, samples: int = 4096) -> KernelGapReport:
    """Supremum of the gap on ``(0, T]``; it is nondecreasing, so attained at ``T``."""
    T, h, M, a = approx.grid.T, approx.grid.h, approx.grid.M, approx.alpha
    sup_gap = float(approx.gap(T))
    t = np.union1d(np.linspace(0.0, T, samples + 1)[1:], approx.grid.times[1:])
    sampled = float(np.max(approx.gap(t)))
    bound = T ** (2.0 - a) / math.gamma(3.0 - a) * (1.0 - (1.0 - 1.0 / M) ** (2.0 - a))
    return KernelGapReport(
        sup_gap=sup_gap,
        attained_at=T,
        closed_form=closed_form_gap(a, approx.grid),
        sampled_sup=sampled,
        proof_bound=bound,
        gap_over_h=sup_gap / h,
    )


# -- G and G^h ---------------------------------------------------------------------


def increments(history: SchemeHistory) -> np.ndarray:
    """``D_k = (U_{k+1} - U_k) / h`` for ``k = 0..M-1``."""
    return np.diff(history.fields, axis=0) / history.h


def convolution_weights(kernel: Callable[[np.ndarray], np.ndarray], t: np.ndarray, h: float, M: int) -> np.ndarray:
    """Matrix ``w[i, k] = K(t_i - k h) - K(t_i - (k+1) h)`` with ``K`` zero for non-positive arguments."""
    t = np.asarray(t, dtype=float)[:, None]
    k = np.arange(M)[None, :]
    return kernel(t - k * h) - kernel(t - (k + 1) * h)


def _check_times(t, T: float) -> np.ndarray:
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr < 0) or np.any(t_arr > T * (1 + 1e-14)):
        raise ValueError(f"evaluation times must lie in [0, {T}]")
    return t_arr


def _functional(history: SchemeHistory, kernel, t) -> np.ndarray:
    t_arr = _check_times(t, history.grid.T)
    W = convolution_weights(kernel, t_arr, history.h, history.M)
    out = W @ increments(history)
    return out[0] if np.ndim(t) == 0 else out


def G_exact(history: SchemeHistory, t) -> np.ndarray:
    """``(g_{2-alpha} * du^h/ds)(t)``; one field per requested time."""
    alpha = history.problem.alpha
    return _functional(history, lambda s: causal_kernel(3.0 - alpha, s), t)


def G_approx(history: SchemeHistory, approx: KernelApprox, t) -> np.ndarray:
    """Same expansion with ``g^h_{3-alpha}`` in place of ``g_{3-alpha}``."""
    return _functional(history, approx, t)


def caputo_of_interpolant(history: SchemeHistory, t) -> np.ndarray:
    """``d_t^alpha u^h(t)`` in closed form (sum of ``g_{2-alpha}`` differences), any ``t`` in ``(0, T]``."""
    alpha = history.problem.alpha
    return _functional(history, lambda s: causal_kernel(2.0 - alpha, s), t)


# -- test functions ------------------------------------------------------------------


def bump(a: float, b: float) -> tuple[Callable, Callable]:
    """Smooth bump supported on ``[a, b]`` with peak value 1, and its derivative."""
    if not b > a:
        raise ValueError("bump support must be a non-empty interval")
    mid, half = 0.5 * (a + b), 0.5 * (b - a)

    def eta(t):
        s = (np.asarray(t, dtype=float) - mid) / half
        inside = np.abs(s) < 1
        out = np.zeros_like(s)
        si = s[inside]
        out[inside] = np.exp(1.0 - 1.0 / (1.0 - si * si))
        return out

    def eta_prime(t):
        s = (np.asarray(t, dtype=float) - mid) / half
        inside = np.abs(s) < 1
        out = np.zeros_like(s)
        si = s[inside]
        q = 1.0 - si * si
        out[inside] = np.exp(1.0 - 1.0 / q) * (-2.0 * si / (q * q)) / half
        return out

    return eta, eta_prime


def spatial_bump(nodes: np.ndarray, bounds, shrink: float = 0.1) -> np.ndarray:
    """Product of 1D bumps, compactly supported inside the domain, sampled at ``nodes``."""
    out = np.ones(len(nodes))
    for axis, (lo, hi) in enumerate(bounds):
        pad = shrink * (hi - lo)
        eta, _ = bump(lo + pad, hi - pad)
        out *= eta(nodes[:, axis])
    return out


@dataclass(frozen=True)
class TestPair:
    """Spatial test field ``phi`` (nodal values) and temporal test function ``eta``.

    ``eta`` vanishes on ``[0, margin] U [T - margin, T]``.
    """

    __test__ = False  # not a pytest class

    phi: np.ndarray = field(repr=False)
    eta: Callable = field(repr=False)
    eta_prime: Callable = field(repr=False)
    margin: float
    label: str = ""

    @classmethod
    def with_bump(
        cls, phi: np.ndarray, start: float, stop: float, label: str = "", T: float | None = None
    ) -> "TestPair":
        """Pair ``phi`` with :func:`bump` on ``[start, stop]``; pass ``T`` when ``T - stop < start``."""
        eta, eta_prime = bump(start, stop)
        margin = start if T is None else min(start, T - stop)
        return cls(np.asarray(phi, dtype=float), eta, eta_prime, margin=margin, label=label)

    def check_margin(self, grid: TimeGrid) -> None:
        if not self.margin > grid.h:
            raise MarginError(f"test margin {self.margin} must exceed the step h={grid.h}")
        probe = np.concatenate(
            [np.linspace(0.0, self.margin, 64), np.linspace(grid.T - self.margin, grid.T, 64)]
        )
        if np.any(self.eta(probe) != 0.0):
            raise MarginError(f"eta does not vanish within the declared margin {self.margin}")


def default_bumps(T: float) -> list[tuple[float, float]]:
    """Supports of the five temporal bumps used by the default test basis."""
    fracs = [(0.1, 0.9), (0.1, 0.5), (0.3, 0.7), (0.5, 0.9), (0.2, 0.8)]
    return [(a * T, b * T) for a, b in fracs]


def gauss_nodes(grid: TimeGrid, points: int = 4) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre rule on every step interval.

    Returns times, weights and the interval index of each node.
    """
    x, w = np.polynomial.legendre.leggauss(points)
    h = grid.h
    m = np.repeat(np.arange(grid.M), points)
    t = (m + 0.5 * (np.tile(x, grid.M) + 1.0)) * h
    return t, np.tile(w, grid.M) * 0.5 * h, m


def test_norms(test: TestPair, mass_diag: np.ndarray, T: float) -> dict:
    """Discrete ``|phi|_{L1}``, ``|eta|_inf``, ``|eta'|_inf`` for bound bookkeeping."""
    t = np.linspace(0.0, T, 1024)
    return {
        "phi_l1": float(np.sum(mass_diag * np.abs(test.phi))),
        "eta_sup": float(np.max(np.abs(test.eta(t)))),
        "eta_prime_sup": float(np.max(np.abs(test.eta_prime(t)))),
    }


def _gap_functional_at_quadrature(history: SchemeHistory, approx: KernelApprox, projected: np.ndarray, t: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """``(G - G^h)(t_i) . projected`` for scalar projections ``projected[k] = D_k . (M phi)``."""
    alpha = history.problem.alpha
    out = np.empty(len(t))
    for start in range(0, len(t), chunk):
        sl = slice(start, start + chunk)
        W = convolution_weights(lambda s: causal_kernel(3.0 - alpha, s), t[sl], history.h, history.M)
        W -= convolution_weights(approx, t[sl], history.h, history.M)
        out[sl] = W @ projected
    return out


def gap_pairing(history: SchemeHistory, approx: KernelApprox, phi: np.ndarray, weight: Callable) -> float:
    """``int_0^T ((G - G^h)(t), phi)_M weight(t) dt`` with 4-point Gauss per step."""
    t, w, _ = gauss_nodes(history.grid)
    projected = increments(history) @ (history.disc.mass @ phi)
    vals = _gap_functional_at_quadrature(history, approx, projected, t)
    return float(np.sum(w * weight(t) * vals))


def weak_error_pairing(history: SchemeHistory, approx: KernelApprox, test: TestPair) -> float:
    """Space-time pairing of ``G[u^h] - G^h[u^h]`` with ``eta(t) phi(x)``."""
    test.check_margin(history.grid)
    return gap_pairing(history, approx, test.phi, test.eta)
