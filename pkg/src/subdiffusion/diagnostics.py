"""A posteriori certificates for a computed scheme history.

Energy inequalities (discrete coercivity of the Caputo combination, its summed
form, the discrete energy estimate and the L2(H1) bound), the weak-form
residual of the piecewise-linear reconstruction, and the three-part pairing of
the consistency error.  Every check is read-only over the history.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .elliptic import SparseOperator
from .fracderiv import CoefficientTable, causal_kernel, discrete_caputo
from .kernelapprox import (
    KernelApprox,
    TestPair,
    bump,
    convolution_weights,
    default_bumps,
    gap_pairing,
    gauss_nodes,
    increments,
)
from .timestepper import SchemeHistory

IDENTITY_RTOL = 1e-12
CERTIFICATE_RTOL = 1e-9
SOLVER_RTOL = 1e-8
EQUATION_RTOL = 1e-9
L2H1_CHAIN_CONSTANT = 14.0 / 3.0


@dataclass(frozen=True)
class InequalityLedger:
    """Per-index record of an inequality ``lhs >= rhs`` checked with tolerance ``tol``."""

    name: str
    lhs: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    tol: np.ndarray = field(repr=False)

    @property
    def slack(self) -> np.ndarray:
        return self.lhs - self.rhs

    @property
    def passed(self) -> bool:
        return bool(np.all(self.slack >= -self.tol))

    @property
    def worst(self) -> int:
        """Index (step m, starting at 1) with the smallest tolerance-relative slack."""
        if len(self.lhs) == 0:
            return 0
        scaled = self.slack / np.maximum(self.tol, np.finfo(float).tiny)
        return int(np.argmin(scaled)) + 1

    def to_dict(self) -> dict:
        if len(self.lhs) == 0:
            return {"name": self.name, "passed": True, "steps": 0}
        i = self.worst - 1
        return {
            "name": self.name,
            "passed": self.passed,
            "steps": len(self.lhs),
            "min_slack": float(np.min(self.slack)),
            "worst_step": self.worst,
            "worst_lhs": float(self.lhs[i]),
            "worst_rhs": float(self.rhs[i]),
        }


def _caputo_combinations(fields: np.ndarray, table: CoefficientTable) -> np.ndarray:
    """Rows ``U_m - sum_k C_{m,k} U_k`` for ``m = 1..M``."""
    M = len(fields) - 1
    out = np.empty((M,) + fields.shape[1:])
    for m in range(1, M + 1):
        out[m - 1] = fields[m] - table.row(m) @ fields[:m]
    return out


def _weighted_history(norms_sq: np.ndarray, table: CoefficientTable) -> np.ndarray:
    """``|U_m|^2 - sum_k C_{m,k} |U_k|^2`` for ``m = 1..M``."""
    M = len(norms_sq) - 1
    return np.array([norms_sq[m] - table.row(m) @ norms_sq[:m] for m in range(1, M + 1)])


def coercivity_ledger(fields: np.ndarray, table: CoefficientTable, h: float, mass: SparseOperator) -> InequalityLedger:
    """``(c {U_m - sum C U_k}, U_m) >= (c/2) {|U_m|^2 - sum C |U_k|^2}`` in the mass inner product."""
    fields = np.asarray(fields, dtype=float)
    c = table.caputo_factor(h)
    combos = _caputo_combinations(fields, table)
    lhs = c * np.einsum("ij,ij->i", (mass.matrix @ combos.T).T, fields[1:])
    norms_sq = mass.quadratic(fields)
    rhs = 0.5 * c * _weighted_history(norms_sq, table)
    scale = c * np.maximum.accumulate(norms_sq)[1:]
    return InequalityLedger("discrete coercivity", lhs, rhs, CERTIFICATE_RTOL * scale)


def summation_ledger(fields: np.ndarray, table: CoefficientTable, h: float, mass: SparseOperator) -> InequalityLedger:
    """Summed coercivity terms against the two-term lower bound, for every ``m``."""
    a = table.alpha
    c = table.caputo_factor(h)
    norms_sq = mass.quadratic(np.asarray(fields, dtype=float))
    lhs = c * np.cumsum(_weighted_history(norms_sq, table))
    m = np.arange(1, len(norms_sq))
    t = m * h
    rhs = t ** (-a) / math.gamma(1 - a) * np.cumsum(norms_sq[1:]) - t ** (1 - a) / (
        math.gamma(2 - a) * h
    ) * norms_sq[0]
    scale = c * np.cumsum(norms_sq)[1:]
    return InequalityLedger("summation bound", lhs, rhs, CERTIFICATE_RTOL * scale)


def check_discrete_coercivity(history: SchemeHistory) -> InequalityLedger:
    return coercivity_ledger(history.fields, history.table, history.h, history.disc.mass)


def check_summation_bound(history: SchemeHistory) -> InequalityLedger:
    return summation_ledger(history.fields, history.table, history.h, history.disc.mass)


def energy_constant(alpha: float, T: float, lam: float) -> float:
    """Explicit constant of the discrete energy estimate, from the Young-inequality choice
    ``eps = (1 - lam) T^-alpha / Gamma(1 - alpha)``."""
    left = min(T ** (-alpha) / math.gamma(1 - alpha), 2.0)
    right = max(T ** (1 - alpha) / math.gamma(2 - alpha), math.gamma(1 - alpha) * T**alpha / (1 - lam))
    return right / (lam * left)


@dataclass(frozen=True)
class EnergyBound:
    lhs: float
    data: float
    ratio: float
    constant: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class L2H1Bound:
    """Time-integrated H1 norms of both reconstructions over ``[h, T]`` and the bound they obey."""

    norm_pc: float
    norm_pl: float
    bound: float
    cubic_bound: float
    chain_rhs: float
    passed: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class EnergyCertificate:
    coercivity: InequalityLedger
    summation: InequalityLedger
    energy: EnergyBound
    l2h1: L2H1Bound
    equation_residual: float

    @property
    def passed(self) -> bool:
        return (
            self.coercivity.passed
            and self.summation.passed
            and self.energy.passed
            and self.l2h1.passed
            and self.equation_residual <= EQUATION_RTOL
        )

    def failures(self) -> list[str]:
        out = []
        for ledger in (self.coercivity, self.summation):
            if not ledger.passed:
                d = ledger.to_dict()
                out.append(f"{ledger.name} at m={d['worst_step']}: lhs={d['worst_lhs']!r} < rhs={d['worst_rhs']!r}")
        if not self.energy.passed:
            out.append(f"energy estimate: lhs/data={self.energy.ratio!r} > constant={self.energy.constant!r}")
        if not self.l2h1.passed:
            out.append(
                f"L2(H1) bound: norm_pc+norm_pl={self.l2h1.norm_pc + self.l2h1.norm_pl!r} > bound={self.l2h1.bound!r}"
            )
        if self.equation_residual > EQUATION_RTOL:
            out.append(f"discrete equation residual {self.equation_residual!r} > {EQUATION_RTOL!r}")
        return out

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "coercivity": self.coercivity.to_dict(),
            "summation": self.summation.to_dict(),
            "energy": self.energy.to_dict(),
            "l2h1": self.l2h1.to_dict(),
            "equation_residual": self.equation_residual,
            "failures": self.failures(),
        }


def _energy_terms(history: SchemeHistory) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    disc = history.disc
    l2 = disc.mass.quadratic(history.fields)
    grad = disc.gradient.quadratic(history.fields)
    f2 = disc.mass.quadratic(history.sources)
    return l2, grad, f2


def energy_bound(history: SchemeHistory) -> EnergyBound:
    l2, grad, f2 = _energy_terms(history)
    h = history.h
    lhs = h * (np.sum(l2[1:]) + np.sum(grad[1:]))
    data = l2[0] + h * np.sum(f2[1:])
    K = energy_constant(history.problem.alpha, history.grid.T, history.problem.diffusion.ellipticity_lambda)
    ratio = lhs / data if data > 0 else (0.0 if lhs == 0 else math.inf)
    passed = lhs <= K * data * (1 + SOLVER_RTOL) + SOLVER_RTOL * max(lhs, np.finfo(float).tiny)
    return EnergyBound(float(lhs), float(data), float(ratio), K, bool(passed))


def check_l2h1_bound(history: SchemeHistory) -> L2H1Bound:
    """Norms of ``u_c^h`` and ``u^h`` in ``L2(h, T; H1)`` and the data bound they satisfy.

    ``norm_pl`` integrates the squared norm of the linear interpolant exactly;
    ``cubic_bound`` is the expansion through ``|U_m|`` and ``|U_{m+1} - U_m|``
    and ``chain_rhs`` its final majorant ``(14/3) h sum_{m=1}^{M} |U_m|^2``.
    """
    disc = history.disc
    h, U = history.h, history.fields
    l2, grad, f2 = _energy_terms(history)
    h1_sq = l2 + grad
    M = history.M
    norm_pc_sq = h * np.sum(h1_sq[1:M])

    def h1_inner(a, b):
        return np.einsum("ij,ij->i", a, (disc.mass.matrix @ b.T).T) + np.einsum(
            "ij,ij->i", a, (disc.gradient.matrix @ b.T).T
        )

    lo, hi = U[1:M], U[2 : M + 1]
    cross = h1_inner(lo, hi) if M > 1 else np.zeros(0)
    norm_pl_sq = h / 3.0 * np.sum(h1_sq[1:M] + cross + h1_sq[2 : M + 1])
    p = np.sqrt(h1_sq[1:M])
    q = np.sqrt(np.maximum(h1_inner(hi - lo, hi - lo), 0.0)) if M > 1 else np.zeros(0)
    cubic = h / 3.0 * np.sum((p + q) ** 2 + (p + q) * p + p**2)
    chain = L2H1_CHAIN_CONSTANT * h * np.sum(h1_sq[1:])

    K = energy_constant(history.problem.alpha, history.grid.T, history.problem.diffusion.ellipticity_lambda)
    data_norm = math.sqrt(l2[0]) + math.sqrt(h * np.sum(f2[1:]))
    # the +h term plays the role of the vanishing slack in the continuous statement
    bound = (1.0 + math.sqrt(L2H1_CHAIN_CONSTANT)) * math.sqrt(K) * (data_norm + h)
    norm_pc, norm_pl = math.sqrt(norm_pc_sq), math.sqrt(max(norm_pl_sq, 0.0))
    tol = SOLVER_RTOL * max(cubic, chain, np.finfo(float).tiny)
    passed = norm_pl_sq <= cubic + tol and cubic <= chain + tol and norm_pc + norm_pl <= bound
    return L2H1Bound(norm_pc, norm_pl, bound, float(cubic), float(chain), bool(passed))


def equation_residuals(history: SchemeHistory) -> np.ndarray:
    """``|(cM + A) U_m - rhs_m| / (1 + |rhs_m|)`` for ``m = 1..M``, recomputed from the stored fields."""
    disc = history.disc
    out = np.empty(history.M)
    for m in range(1, history.M + 1):
        rhs = disc.step_rhs(history.fields, m)
        res = disc.solver.matrix @ history.fields[m] - rhs
        out[m - 1] = np.linalg.norm(res) / (1.0 + np.linalg.norm(rhs))
    return out


def caputo_identity_residuals(history: SchemeHistory) -> np.ndarray:
    """Per-step mismatch of ``M d^alpha u^h(mh) + A U_m = M f_m`` using :func:`discrete_caputo` on nodal traces.

    Normalised by ``1 + |M f_m| + |A U_m|``.
    """
    disc = history.disc
    out = np.empty(history.M)
    for m in range(1, history.M + 1):
        dcap = discrete_caputo(history.table, history.grid, history.fields[: m + 1], m)
        AU = disc.stiffness @ history.fields[m]
        Mf = disc.mass @ history.sources[m]
        out[m - 1] = np.linalg.norm(disc.mass @ dcap + AU - Mf) / (1.0 + np.linalg.norm(Mf) + np.linalg.norm(AU))
    return out


def check_energy_estimate(history: SchemeHistory) -> EnergyCertificate:
    eq = equation_residuals(history)
    return EnergyCertificate(
        coercivity=check_discrete_coercivity(history),
        summation=check_summation_bound(history),
        energy=energy_bound(history),
        l2h1=check_l2h1_bound(history),
        equation_residual=float(eq.max()) if len(eq) else 0.0,
    )


# -- weak form ----------------------------------------------------------------------


@dataclass(frozen=True)
class WeakFormResidualReport:
    """Residuals of the integrated weak form, one per test pair.

    ``scales`` holds the integral of the absolute integrand for each pair, so
    ``residuals / scales`` measures cancellation relative to the size of the terms.
    """

    residuals: np.ndarray
    scales: np.ndarray
    labels: list[str]
    basis: str

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residuals))) if self.residuals.size else 0.0

    def to_dict(self) -> dict:
        rel = np.abs(self.residuals) / np.maximum(self.scales, np.finfo(float).tiny)
        return {
            "basis": self.basis,
            "tests": len(self.labels),
            "max_abs_residual": self.max_abs,
            "max_relative_residual": float(rel.max()) if rel.size else 0.0,
            "per_test": {lab: float(r) for lab, r in zip(self.labels, self.residuals.ravel())}
            if len(self.labels) <= 32
            else {},
        }


class _Quadrature:
    """Gauss nodes on every step with the pieces of ``u^h`` needed at each node."""

    def __init__(self, history: SchemeHistory):
        self.history = history
        self.t, self.w, self.m = gauss_nodes(history.grid)
        self.theta = (self.t - self.m * history.h) / history.h
        self._sources = None

    @property
    def sources(self) -> np.ndarray:
        if self._sources is None:
            self._sources = np.array([self.history.problem.source_at(t) for t in self.t])
        return self._sources

    def interpolant_coefficients(self, b: np.ndarray) -> np.ndarray:
        """Coefficients ``c`` with ``sum_q b_q u^h(t_q) = sum_m c_m U_m``."""
        c = np.zeros(self.history.M + 1)
        np.add.at(c, self.m, b * (1.0 - self.theta))
        np.add.at(c, self.m + 1, b * self.theta)
        return c

    def kernel_projection(self, a: np.ndarray, kernel, chunk: int = 2048) -> np.ndarray:
        """``sum_q a_q W(t_q)`` as a length-M vector over increments."""
        h, M = self.history.h, self.history.M
        out = np.zeros(M)
        for s in range(0, len(self.t), chunk):
            sl = slice(s, s + chunk)
            out += a[sl] @ convolution_weights(kernel, self.t[sl], h, M)
        return out


def _density_terms(quad: _Quadrature, eta, eta_prime) -> tuple[np.ndarray, ...]:
    """Nodal vectors whose pairing with ``phi`` gives the three weak-form integrals."""
    hist = quad.history
    disc = hist.disc
    alpha = hist.problem.alpha
    D = increments(hist)
    a_time = -quad.w * eta_prime(quad.t)
    b_time = quad.w * eta(quad.t)
    g3 = lambda s: causal_kernel(3.0 - alpha, s)  # noqa: E731
    memory = disc.mass @ (quad.kernel_projection(a_time, g3) @ D)
    elliptic = disc.stiffness @ (quad.interpolant_coefficients(b_time) @ hist.fields)
    source = disc.mass @ (b_time @ quad.sources)
    return memory, elliptic, source


def _absolute_scale(quad: _Quadrature, eta, eta_prime, phi: np.ndarray) -> float:
    """Integral of the absolute weak-form integrand, used to normalise residuals."""
    hist = quad.history
    disc = hist.disc
    alpha = hist.problem.alpha
    g3 = lambda s: causal_kernel(3.0 - alpha, s)  # noqa: E731
    projected = increments(hist) @ (disc.mass @ phi)
    memory = np.concatenate(
        [
            np.abs(convolution_weights(g3, quad.t[s : s + 2048], hist.h, hist.M) @ projected)
            for s in range(0, len(quad.t), 2048)
        ]
    )
    Aphi = disc.stiffness @ phi
    nodal = hist.fields @ Aphi
    elliptic = np.abs((1.0 - quad.theta) * nodal[quad.m] + quad.theta * nodal[quad.m + 1])
    source = quad.sources @ (disc.mass @ phi)
    return float(
        np.sum(quad.w * (np.abs(eta_prime(quad.t)) * memory + np.abs(eta(quad.t)) * (elliptic + np.abs(source))))
    )


def default_test_basis(history: SchemeHistory) -> list[TestPair]:
    """Every nodal hat function paired with each of five temporal bumps."""
    T = history.grid.T
    pairs = []
    eye = np.eye(history.mesh.n_dof)
    for j, (a, b) in enumerate(default_bumps(T)):
        for i in range(history.mesh.n_dof):
            pairs.append(TestPair.with_bump(eye[i], a, b, label=f"hat{i}/bump{j}", T=T))
    return pairs


def weak_form_residual(history: SchemeHistory, tests: Sequence[TestPair] | None = None) -> WeakFormResidualReport:
    """Residual ``-int (g_{1-a} * (u^h - U_0), phi) eta' + int (a grad u^h, grad phi) eta - int (f, phi) eta``.

    The memory term uses ``g_{1-a} * (u^h - U_0) = G[u^h]`` in closed form.
    Without ``tests`` the default basis (all hats times five bumps) is used and
    evaluated in one pass per bump.
    """
    quad = _Quadrature(history)
    if tests is None:
        return _hat_basis_residual(history, quad)
    residuals, scales, labels = [], [], []
    cache: dict[int, tuple] = {}
    for test in tests:
        test.check_margin(history.grid)
        key = id(test.eta)
        if key not in cache:
            cache[key] = _density_terms(quad, test.eta, test.eta_prime)
        memory, elliptic, source = cache[key]
        residuals.append(test.phi @ (memory + elliptic - source))
        scales.append(_absolute_scale(quad, test.eta, test.eta_prime, test.phi))
        labels.append(test.label)
    return WeakFormResidualReport(np.array(residuals), np.array(scales), labels, "explicit test pairs")


def _hat_basis_residual(history: SchemeHistory, quad: _Quadrature) -> WeakFormResidualReport:
    T = history.grid.T
    n = history.mesh.n_dof
    rows, scale_rows, labels = [], [], []
    alpha = history.problem.alpha
    disc = history.disc
    D = increments(history)
    W = None
    for j, (a, b) in enumerate(default_bumps(T)):
        eta, eta_prime = bump(a, b)
        TestPair(np.zeros(n), eta, eta_prime, margin=min(a, T - b)).check_margin(history.grid)
        memory, elliptic, source = _density_terms(quad, eta, eta_prime)
        rows.append(memory + elliptic - source)
        # absolute scale per hat: integrand magnitudes node by node
        a_abs = quad.w * np.abs(eta_prime(quad.t))
        b_abs = quad.w * np.abs(eta(quad.t))
        if W is None:
            W = np.abs(
                convolution_weights(lambda s: causal_kernel(3.0 - alpha, s), quad.t, history.h, history.M) @ D
            )
        mem_abs = disc.mass.matrix.diagonal() * (a_abs @ W)
        U_q_coeff = quad.interpolant_coefficients(b_abs)
        ell_abs = np.abs(disc.stiffness.matrix) @ (np.abs(history.fields).T @ U_q_coeff)
        src_abs = disc.mass.matrix.diagonal() * (b_abs @ np.abs(quad.sources))
        scale_rows.append(mem_abs + ell_abs + src_abs)
        labels += [f"hat{i}/bump{j}" for i in range(n)]
    return WeakFormResidualReport(
        np.array(rows).ravel(), np.array(scale_rows).ravel(), labels, "P1 hats x 5 temporal bumps"
    )


# -- error term ------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorTermPairing:
    """Signed pieces of the consistency-error pairing; ``total = memory + elliptic - source``."""

    label: str
    memory: float
    elliptic: float
    source: float

    @property
    def total(self) -> float:
        return self.memory + self.elliptic - self.source

    def to_dict(self) -> dict:
        return {"label": self.label, "memory": self.memory, "elliptic": self.elliptic, "source": self.source, "total": self.total}


def error_term_pairing(history: SchemeHistory, approx: KernelApprox, tests: Sequence[TestPair]) -> list[ErrorTermPairing]:
    """Pair ``e^h`` with each test.

    memory   = -int ((G - G^h)(t), phi) eta'(t) dt   (after integrating by parts)
    elliptic =  int (A (u^h(t) - U_m), phi) eta(t) dt
    source   =  int (f(t) - f(mh), phi) eta(t) dt
    """
    quad = _Quadrature(history)
    disc = history.disc
    out = []
    for test in tests:
        test.check_margin(history.grid)
        memory = 0.0 - gap_pairing(history, approx, test.phi, test.eta_prime)
        b = quad.w * test.eta(quad.t)
        # u^h(t) - U_m = theta (U_{m+1} - U_m)
        coeff = np.zeros(history.M + 1)
        np.add.at(coeff, quad.m + 1, b * quad.theta)
        np.add.at(coeff, quad.m, -b * quad.theta)
        elliptic = float((coeff @ history.fields) @ (disc.stiffness @ test.phi))
        df = quad.sources - history.sources[quad.m]
        source = float((b @ df) @ (disc.mass @ test.phi))
        out.append(ErrorTermPairing(test.label, float(memory), elliptic, source))
    return out
