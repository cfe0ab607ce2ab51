"""TOML run and study configuration with strict validation.

Layout::

    seed = 0

    [problem]
    preset = "eigenmode"      # optional; supplies defaults for everything below
    alpha = 0.5
    T = 1.0
    M = 256
    N = 255                   # interior nodes, one int or one per axis
    bounds = [[0.0, 1.0]]     # one [lo, hi] per axis (1 or 2 axes)

    [coefficients]            # expressions in x, y (and t for f, exact)
    a = "1"                   # scalar or matrix [["a11", "a12"], ["a21", "a22"]]
    ellipticity = 0.99        # lower bound on the eigenvalues of a, in (0, 1)
    f = "0"
    u0 = "sin(pi*x)"
    exact = "..."             # optional reference solution

    [output]
    dir = "out"
    snapshots = 5             # equally spaced output times including 0 and T

    [diagnostics]
    energy = true
    kernel_gap = true
    weak_form = true
    error_terms = true
    test_basis = "hats"       # or "smooth"
    random_histories = 50

    [study]                   # turns the file into a study config
    ladder = [[64, 63], [128, 63]]
    oracle = "eigenmode"      # eigenmode | manufactured | none
    norms = ["max_final", "rel_max_final"]
"""

from __future__ import annotations

import math
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .expr import Expression, ExpressionError
from .presets import PRESETS

SCHEMA: dict[str, set[str]] = {
    "problem": {"preset", "alpha", "T", "M", "N", "bounds"},
    "coefficients": {"a", "ellipticity", "f", "u0", "exact"},
    "output": {"dir", "snapshots"},
    "diagnostics": {"energy", "kernel_gap", "weak_form", "error_terms", "test_basis", "random_histories"},
    "study": {"ladder", "oracle", "norms"},
}
TOP_LEVEL = {"seed"} | set(SCHEMA)
ORACLES = ("eigenmode", "manufactured", "none")
NORMS = ("max_final", "rel_max_final", "l2_final", "max_all")
MAX_STEPS = 1_000_000


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class DiagnosticsToggles:
    energy: bool = True
    kernel_gap: bool = True
    weak_form: bool = True
    error_terms: bool = True
    test_basis: str = "hats"
    random_histories: int = 50


@dataclass(frozen=True)
class RunConfig:
    alpha: float
    T: float
    M: int
    N: tuple[int, ...]
    bounds: tuple[tuple[float, float], ...]
    preset: str | None = None
    a: str | tuple[tuple[str, ...], ...] | None = None
    ellipticity: float | None = None
    f: str | None = None
    u0: str | None = None
    exact: str | None = None
    snapshots: int = 5
    out_dir: str | None = None
    seed: int = 0
    diagnostics: DiagnosticsToggles = field(default_factory=DiagnosticsToggles)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    @property
    def overrides_data(self) -> bool:
        """True when expressions replace some of the preset's data."""
        return any(v is not None for v in (self.a, self.f, self.u0))

    def with_resolution(self, M: int, N: int | tuple[int, ...]) -> "RunConfig":
        n = (N,) * self.dim if isinstance(N, int) else tuple(N)
        return replace(self, M=int(M), N=n)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["N"] = list(self.N)
        out["bounds"] = [list(b) for b in self.bounds]
        if isinstance(self.a, tuple):
            out["a"] = [list(r) for r in self.a]
        return out


@dataclass(frozen=True)
class StudyConfig:
    base: RunConfig
    ladder: tuple[tuple[int, int], ...]
    oracle: str
    norms: tuple[str, ...] = ("max_final", "rel_max_final")

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "ladder": [list(r) for r in self.ladder],
            "oracle": self.oracle,
            "norms": list(self.norms),
        }


# -- validation helpers ------------------------------------------------------------


def _number(value: Any, key: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", key)
    if not math.isfinite(value):
        raise ConfigError("must be finite", key)
    return float(value)


def _integer(value: Any, key: str, lo: int, hi: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"expected an integer, got {value!r}", key)
    if value < lo or (hi is not None and value > hi):
        bound = f">= {lo}" if hi is None else f"in [{lo}, {hi}]"
        raise ConfigError(f"must be {bound}, got {value}", key)
    return value


def _boolean(value: Any, key: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"expected true or false, got {value!r}", key)
    return value


def _check_keys(section: dict, allowed: set[str], prefix: str) -> None:
    for k in section:
        if k not in allowed:
            path = f"{prefix}.{k}" if prefix else k
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(allowed))})", path)


def _expression(value: Any, key: str, allow_t: bool) -> str:
    try:
        expr = Expression.parse(value)
    except ExpressionError as exc:
        raise ConfigError(str(exc), key) from None
    if not allow_t and "t" in expr.names:
        raise ConfigError("must not depend on t", key)
    return expr.source


def _alpha(value: Any, key: str) -> float:
    alpha = _number(value, key)
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly in (0,1), got {alpha!r}", key)
    return alpha


def _bounds(value: Any, key: str) -> tuple[tuple[float, float], ...]:
    if not isinstance(value, list) or len(value) not in (1, 2):
        raise ConfigError("expected a list of one or two [lo, hi] pairs", key)
    out = []
    for i, pair in enumerate(value):
        k = f"{key}[{i}]"
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError("expected [lo, hi]", k)
        lo, hi = _number(pair[0], k), _number(pair[1], k)
        if not hi > lo:
            raise ConfigError(f"need lo < hi, got [{lo}, {hi}]", k)
        out.append((lo, hi))
    return tuple(out)


def _nodes(value: Any, key: str, dim: int) -> tuple[int, ...]:
    if isinstance(value, list):
        if len(value) != dim:
            raise ConfigError(f"expected {dim} entries (one per axis), got {len(value)}", key)
        return tuple(_integer(v, f"{key}[{i}]", 2) for i, v in enumerate(value))
    return (_integer(value, key, 2),) * dim


def _diffusion(value: Any, key: str, dim: int):
    if isinstance(value, list):
        if len(value) != dim or any(not isinstance(r, list) or len(r) != dim for r in value):
            raise ConfigError(f"matrix coefficient must be {dim}x{dim}", key)
        rows = tuple(
            tuple(_expression(v, f"{key}[{i}][{j}]", allow_t=False) for j, v in enumerate(r))
            for i, r in enumerate(value)
        )
        if dim == 2 and rows[0][1].replace(" ", "") != rows[1][0].replace(" ", ""):
            raise ConfigError("matrix coefficient must be symmetric (a12 and a21 differ)", key)
        return rows
    return _expression(value, key, allow_t=False)


# -- parsing -----------------------------------------------------------------------


def _load(source: str | os.PathLike) -> dict:
    if isinstance(source, os.PathLike):
        try:
            with open(source, "rb") as fh:
                return tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(source)) from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"parse error: {exc}", str(source)) from None
    try:
        return tomllib.loads(source)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"parse error: {exc}") from None


def parse_config(
    source: str | os.PathLike | None = None, *, preset: str | None = None
) -> RunConfig | StudyConfig:
    """Parse a path (``os.PathLike``) or inline TOML text.

    ``preset`` overrides ``problem.preset``.  Returns a :class:`StudyConfig`
    when the document has a ``[study]`` section.
    """
    raw = _load(source) if source is not None else {}
    _check_keys(raw, TOP_LEVEL, "")
    for name in SCHEMA:
        if name in raw and not isinstance(raw[name], dict):
            raise ConfigError("expected a table", name)
        _check_keys(raw.get(name, {}), SCHEMA[name], name)

    problem = dict(raw.get("problem", {}))
    coeffs = raw.get("coefficients", {})
    name = preset if preset is not None else problem.get("preset")
    if name is not None:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r} (choose from {', '.join(sorted(PRESETS))})", "problem.preset")
        defaults = PRESETS[name].defaults
    else:
        if "u0" not in coeffs:
            raise ConfigError("required when no preset is given", "coefficients.u0")
        defaults = {"alpha": 0.5, "T": 1.0, "M": 64, "N": 63, "bounds": [[0.0, 1.0]]}
    merged = {**defaults, **{k: v for k, v in problem.items() if k != "preset"}}

    bounds = _bounds(merged["bounds"], "problem.bounds")
    if name is not None and len(bounds) != len(_bounds(defaults["bounds"], "problem.bounds")):
        raise ConfigError(f"preset {name!r} is defined in {len(defaults['bounds'])}D", "problem.bounds")
    T = _number(merged["T"], "problem.T")
    if not T > 0:
        raise ConfigError(f"must be positive, got {T}", "problem.T")

    a = _diffusion(coeffs["a"], "coefficients.a", len(bounds)) if "a" in coeffs else None
    ell = None
    if "ellipticity" in coeffs:
        ell = _number(coeffs["ellipticity"], "coefficients.ellipticity")
        if not 0.0 < ell < 1.0:
            raise ConfigError(f"must lie strictly in (0,1), got {ell}", "coefficients.ellipticity")

    out = raw.get("output", {})
    diag = raw.get("diagnostics", {})
    toggles = DiagnosticsToggles(
        **{k: _boolean(diag[k], f"diagnostics.{k}") for k in ("energy", "kernel_gap", "weak_form", "error_terms") if k in diag}
    )
    if "test_basis" in diag:
        if diag["test_basis"] not in ("hats", "smooth"):
            raise ConfigError("must be 'hats' or 'smooth'", "diagnostics.test_basis")
        toggles = replace(toggles, test_basis=diag["test_basis"])
    if "random_histories" in diag:
        toggles = replace(toggles, random_histories=_integer(diag["random_histories"], "diagnostics.random_histories", 0, 10_000))
    out_dir = out.get("dir")
    if out_dir is not None and not isinstance(out_dir, str):
        raise ConfigError("expected a string", "output.dir")

    cfg = RunConfig(
        alpha=_alpha(merged["alpha"], "problem.alpha"),
        T=T,
        M=_integer(merged["M"], "problem.M", 1, MAX_STEPS),
        N=_nodes(merged["N"], "problem.N", len(bounds)),
        bounds=bounds,
        preset=name,
        a=a,
        ellipticity=ell,
        f=_expression(coeffs["f"], "coefficients.f", allow_t=True) if "f" in coeffs else None,
        u0=_expression(coeffs["u0"], "coefficients.u0", allow_t=False) if "u0" in coeffs else None,
        exact=_expression(coeffs["exact"], "coefficients.exact", allow_t=True) if "exact" in coeffs else None,
        snapshots=_integer(out.get("snapshots", 5), "output.snapshots", 2),
        out_dir=out_dir,
        seed=_integer(raw.get("seed", 0), "seed", 0),
        diagnostics=toggles,
    )
    if "study" not in raw:
        return cfg
    return _study(cfg, raw["study"])


def _study(cfg: RunConfig, section: dict) -> StudyConfig:
    preset = PRESETS.get(cfg.preset) if cfg.preset else None
    ladder_raw = section.get("ladder", preset.ladder if preset else None)
    if ladder_raw is None:
        raise ConfigError("required when no preset is given", "study.ladder")
    if not isinstance(ladder_raw, (list, tuple)) or len(ladder_raw) < 2:
        raise ConfigError("expected at least two [M, N] rungs", "study.ladder")
    ladder = []
    for i, rung in enumerate(ladder_raw):
        k = f"study.ladder[{i}]"
        if not isinstance(rung, (list, tuple)) or len(rung) != 2:
            raise ConfigError("expected [M, N]", k)
        ladder.append((_integer(rung[0], k, 1, MAX_STEPS), _integer(rung[1], k, 2)))
    for i in range(1, len(ladder)):
        if ladder[i][0] <= ladder[i - 1][0]:
            raise ConfigError(
                f"ladder must be strictly increasing in M, but rung {i} has M={ladder[i][0]} after M={ladder[i - 1][0]}",
                "study.ladder",
            )
    oracle = section.get("oracle", preset.oracle if preset else ("manufactured" if cfg.exact else "none"))
    if oracle not in ORACLES:
        raise ConfigError(f"must be one of {', '.join(ORACLES)}, got {oracle!r}", "study.oracle")
    if oracle != "none":
        available = exact_kind(cfg)
        if available != oracle:
            raise ConfigError(
                f"no {oracle} reference solution for this problem (available: {available or 'none'})", "study.oracle"
            )
    norms = section.get("norms", ["max_final", "rel_max_final"])
    if not isinstance(norms, list) or not norms or any(n not in NORMS for n in norms):
        raise ConfigError(f"expected a non-empty list drawn from {', '.join(NORMS)}", "study.norms")
    return StudyConfig(cfg, tuple(ladder), oracle, tuple(dict.fromkeys(norms)))


def exact_kind(cfg: RunConfig) -> str | None:
    """Kind of reference solution available for ``cfg`` ("eigenmode", "manufactured" or None)."""
    if cfg.exact is not None:
        return "manufactured"
    if cfg.preset is None or cfg.overrides_data:
        return None
    return PRESETS[cfg.preset].exact_kind


def as_study(cfg: RunConfig | StudyConfig) -> StudyConfig:
    """Promote a run config to a study with the preset's default ladder."""
    if isinstance(cfg, StudyConfig):
        return cfg
    return _study(cfg, {})
