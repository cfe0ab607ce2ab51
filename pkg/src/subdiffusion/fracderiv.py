"""Fractional-calculus primitives.

Riemann-Liouville kernels, the L1-type weights of the implicit scheme, the
discrete Caputo operator built from them, and a Mittag-Leffler evaluator used
as the exact-solution oracle for eigenmode problems.

Gamma values come from :func:`math.gamma` / :func:`math.lgamma` (C library,
full double precision) and :func:`scipy.special.gamma` / ``rgamma`` for arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import integrate, special


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class MittagLefflerAccuracyError(ArithmeticError):
    """The Mittag-Leffler evaluator could not certify the requested accuracy."""


def validate_order(alpha: float) -> float:
    """Return ``alpha`` as a float, rejecting values outside the open interval (0, 1)."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie strictly in (0,1), got {alpha!r}")
    return alpha


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_m = m h`` on ``[0, T]`` with ``h = T / M``."""

    T: float
    M: int

    def __post_init__(self) -> None:
        if not (self.T > 0 and math.isfinite(self.T)):
            raise DomainError(f"final time T must be positive, got {self.T!r}")
        if int(self.M) != self.M or self.M < 1:
            raise DomainError(f"number of time steps M must be a positive integer, got {self.M!r}")
        object.__setattr__(self, "M", int(self.M))
        object.__setattr__(self, "T", float(self.T))

    @property
    def h(self) -> float:
        return self.T / self.M

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.M + 1) * self.h


# -- kernels -----------------------------------------------------------------


def rl_kernel(beta: float, t: float) -> float:
    """Riemann-Liouville kernel ``g_beta(t) = t**(beta - 1) / Gamma(beta)``."""
    if beta <= 0:
        raise DomainError(f"beta must be positive, got {beta!r}")
    if t <= 0:
        raise DomainError(f"t must be positive, got {t!r}")
    return t ** (beta - 1.0) / math.gamma(beta)


def causal_kernel(beta: float, t: np.ndarray | float) -> np.ndarray:
    """Vectorised ``g_beta`` extended by zero for ``t <= 0``.

    Only meaningful for ``beta >= 1`` where the extension is continuous.
    """
    if beta < 1:
        raise DomainError("zero extension is only continuous for beta >= 1")
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    pos = t > 0
    out[pos] = t[pos] ** (beta - 1.0) / math.gamma(beta)
    return out


def _power_increment(beta: float, r: np.ndarray) -> np.ndarray:
    # r**beta - (r-1)**beta without cancellation for large r
    with np.errstate(divide="ignore"):
        return -(r**beta) * np.expm1(beta * np.log1p(-1.0 / r))


def psi(alpha: float, r: float | np.ndarray) -> float | np.ndarray:
    """``psi(r) = g_{2-alpha}(r) - g_{2-alpha}(r - 1)`` for ``r >= 1``."""
    alpha = validate_order(alpha)
    r_arr = np.asarray(r, dtype=float)
    if np.any(r_arr < 1):
        raise DomainError("psi is defined for r >= 1")
    out = _power_increment(1.0 - alpha, r_arr) / math.gamma(2.0 - alpha)
    return float(out) if np.ndim(r) == 0 else out


@dataclass(frozen=True)
class CoefficientTable:
    """Scheme weights ``C_{m,k}`` for ``1 <= m <= M``, ``0 <= k < m``.

    Row ``m`` only depends on the differences ``m - k``, so the table stores the
    ``M`` values ``Gamma(2 - alpha) psi(r)`` and materialises rows on demand.
    """

    alpha: float
    M: int
    psi: np.ndarray = field(repr=False)
    _scaled: np.ndarray = field(repr=False)

    def row(self, m: int) -> np.ndarray:
        """Weights ``[C_{m,0}, ..., C_{m,m-1}]``."""
        if not 1 <= m <= self.M:
            raise IndexError(f"row index m={m} outside 1..{self.M}")
        out = np.empty(m)
        out[0] = self._scaled[m - 1]
        if m > 1:
            # C_{m,k} = b_{m-k} - b_{m-k+1}, k = 1..m-1
            out[1:] = self._diffs[m - 2 :: -1]
        return out

    def weight(self, m: int, k: int) -> float:
        if not 0 <= k < m:
            raise IndexError(f"column index k={k} outside 0..{m - 1}")
        return float(self.row(m)[k])

    @cached_property
    def _diffs(self) -> np.ndarray:
        return self._scaled[:-1] - self._scaled[1:]

    @property
    def weights(self) -> list[np.ndarray]:
        """Triangular table; ``weights[m]`` is row ``m`` and ``weights[0]`` is empty."""
        return [np.empty(0)] + [self.row(m) for m in range(1, self.M + 1)]

    @property
    def scaled_psi(self) -> np.ndarray:
        """``Gamma(2 - alpha) psi(r) = r**(1-alpha) - (r-1)**(1-alpha)`` for r = 1..M."""
        return self._scaled

    def caputo_factor(self, h: float) -> float:
        """``1 / (Gamma(2 - alpha) h**alpha)``."""
        return 1.0 / (math.gamma(2.0 - self.alpha) * h**self.alpha)


def build_coefficients(alpha: float, M: int) -> CoefficientTable:
    alpha = validate_order(alpha)
    if int(M) != M or M < 1:
        raise DomainError(f"M must be a positive integer, got {M!r}")
    r = np.arange(1, int(M) + 1, dtype=float)
    scaled = _power_increment(1.0 - alpha, r)
    scaled[0] = 1.0
    psi_vals = scaled / math.gamma(2.0 - alpha)
    for arr in (scaled, psi_vals):
        arr.setflags(write=False)
    return CoefficientTable(alpha=alpha, M=int(M), psi=psi_vals, _scaled=scaled)


def discrete_caputo(
    table: CoefficientTable, grid: TimeGrid, samples: np.ndarray, m: int
) -> float | np.ndarray:
    """Discrete Caputo derivative at ``t = m h`` from samples ``u(0), ..., u(mh)``.

    ``samples`` may carry trailing axes (e.g. one column per spatial node), in
    which case the operator is applied column-wise.
    """
    samples = np.asarray(samples, dtype=float)
    if not 1 <= m <= min(table.M, grid.M):
        raise DomainError(f"m={m} outside 1..{min(table.M, grid.M)}")
    if samples.shape[0] != m + 1:
        raise ValueError(f"expected {m + 1} samples for m={m}, got {samples.shape[0]}")
    history = np.tensordot(table.row(m), samples[:m], axes=(0, 0))
    out = table.caputo_factor(grid.h) * (samples[m] - history)
    return float(out) if out.ndim == 0 else out


def caputo_reference(alpha: float, t: float | np.ndarray, p: float) -> float | np.ndarray:
    """Exact Caputo derivative of ``t**p``: ``Gamma(p+1)/Gamma(p+1-alpha) t**(p-alpha)``."""
    alpha = validate_order(alpha)
    if p < 1:
        raise DomainError(f"power p must be >= 1, got {p!r}")
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0):
        raise DomainError("t must be positive")
    coeff = math.exp(math.lgamma(p + 1.0) - math.lgamma(p + 1.0 - alpha))
    out = coeff * t_arr ** (p - alpha)
    return float(out) if np.ndim(t) == 0 else out


# -- Mittag-Leffler ------------------------------------------------------------

_ML_RTOL = 1e-10
_ML_ATOL = 1e-10
_EPS = np.finfo(float).eps


def _ml_series(alpha: float, z: float) -> tuple[float, float]:
    """Power series with exactly rounded summation; returns (value, error estimate)."""
    if z == 0.0:
        return 1.0, 0.0
    logx = math.log(abs(z))
    neg = z < 0
    terms = [1.0]
    abs_sum = 1.0
    err = _EPS
    # log-term derivative is log|z| - alpha*digamma(alpha n + 1); past the peak terms shrink
    n_peak = max(abs(z) ** (1.0 / alpha) / alpha, 1.0)
    n = 1
    while True:
        log_t = n * logx - math.lgamma(alpha * n + 1.0)
        if log_t > 709.0:
            raise MittagLefflerAccuracyError(f"E_alpha({z}) overflows double precision")
        t = math.exp(log_t)
        terms.append(-t if (neg and n % 2) else t)
        abs_sum += t
        err += t * _EPS * (2.0 + abs(log_t))
        if n > n_peak and t < 1e-18 * abs_sum:
            break
        n += 1
        if n > 200_000:
            raise MittagLefflerAccuracyError(f"series for E_alpha({z}) did not converge")
    return math.fsum(terms), err


def _ml_negative_integral(alpha: float, x: float) -> tuple[float, float]:
    """``E_alpha(-x)`` for ``x > 0`` from its Laplace-type integral representation.

    E_alpha(-x) = sin(alpha pi)/(alpha pi) * int_0^inf exp(-u**(1/alpha)) x / (u^2 + 2 x u cos(alpha pi) + x^2) du
    """
    c = math.cos(alpha * math.pi)
    scale = math.sin(alpha * math.pi) / (alpha * math.pi)
    inv = 1.0 / alpha

    def integrand(u: float) -> float:
        return math.exp(-(u**inv)) * x / (u * u + 2.0 * x * u * c + x * x)

    upper = 745.0**alpha  # exp(-u**(1/alpha)) underflows beyond this
    points = [x] if x < upper else None
    val, err = integrate.quad(
        integrand, 0.0, upper, points=points, epsabs=0.0, epsrel=1e-13, limit=500
    )
    return scale * val, scale * err + _EPS * abs(scale * val)


def mittag_leffler_asymptotic(alpha: float, z: float, terms: int = 20) -> float:
    """Truncated algebraic expansion of ``E_alpha(z)`` for large negative ``z``.

    Not used by :func:`mittag_leffler`; it serves as an independent cross-check
    for ``z << 0`` and ``alpha`` away from 1.
    """
    if z >= 0:
        raise DomainError("asymptotic expansion is for negative arguments")
    x = -z
    k = np.arange(1, terms + 1)
    vals = (-1.0) ** (k + 1) * x ** (-k.astype(float)) * special.rgamma(1.0 - alpha * k)
    return float(math.fsum(vals))


def _ml_scalar(alpha: float, z: float) -> float:
    if alpha == 1.0:
        return math.exp(z)
    if z >= 0.0:
        val, err = _ml_series(alpha, z)
        if err > _ML_RTOL * abs(val):
            raise MittagLefflerAccuracyError(f"series error {err:.2e} too large at z={z}")
        return val
    # negative axis: the series cancels badly once |z| grows, fall back to the integral
    if z > -1.0:
        val, err = _ml_series(alpha, z)
        if err <= 0.1 * _ML_RTOL * abs(val):
            return val
    val, err = _ml_negative_integral(alpha, -z)
    if err > _ML_RTOL * abs(val) and err > _ML_ATOL:
        raise MittagLefflerAccuracyError(f"quadrature error {err:.2e} too large at z={z}")
    return val


def mittag_leffler(alpha: float, z: float | np.ndarray) -> float | np.ndarray:
    """One-parameter Mittag-Leffler function ``E_alpha(z)`` for real ``z``, ``0 < alpha <= 1``.

    Relative accuracy 1e-10 for moderate arguments, absolute 1e-10 far out on
    the negative axis. Raises :class:`MittagLefflerAccuracyError` when the
    result cannot be certified (for instance overflow at large positive z).
    """
    alpha = float(alpha)
    if not 0.0 < alpha <= 1.0:
        raise DomainError(f"alpha must lie in (0,1], got {alpha!r}")
    if np.ndim(z) == 0:
        return _ml_scalar(alpha, float(z))
    z_arr = np.asarray(z, dtype=float)
    return np.array([_ml_scalar(alpha, float(v)) for v in z_arr.ravel()]).reshape(z_arr.shape)
