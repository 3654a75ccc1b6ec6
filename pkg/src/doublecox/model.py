"""Hazards and survival functions of the double-Cox model.

Both baseline families carry a Cox-regression term on the scale and a
separate one on the shape of the baseline distribution::

    Weibull   H(t|u) = exp(bs.u) * (t / a) ** k
    Gompertz  H(t|u) = a * exp(bs.u) * (exp(k t) - 1) / k

with ``k = b * exp(bk.u)``. All functions accept either a single covariate
vector ``u`` of shape ``(p,)`` or a matrix of shape ``(n, p)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DomainError",
    "Family",
    "ModelSpec",
    "ParameterVector",
    "SubjectRecord",
    "cumulative_hazard",
    "log_hazard",
    "conditional_survival",
    "marginal_survival",
    "linear_predictors",
]

#: Largest ``k * t`` accepted by the Gompertz hazard before exp() overflows.
GOMPERTZ_MAX_EXPONENT = 700.0


class DomainError(ValueError):
    """Raised when a hazard is evaluated outside its numerical domain."""


class Family(str, enum.Enum):
    WEIBULL = "weibull"
    GOMPERTZ = "gompertz"

    @classmethod
    def parse(cls, value: "Family | str") -> "Family":
        if isinstance(value, Family):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown baseline family {value!r}") from None


@dataclass(frozen=True)
class SubjectRecord:
    """One observation: time, event flag, cluster and covariates.

    ``event`` is True when the failure was observed and False when the
    subject was right-censored at ``time``.
    """

    time: float
    event: bool
    cluster: object
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        t = float(self.time)
        if not (np.isfinite(t) and t > 0):
            raise ValueError(f"subject time must be positive and finite, got {self.time!r}")
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", bool(self.event))
        object.__setattr__(self, "covariates", tuple(float(c) for c in self.covariates))


@dataclass(frozen=True)
class ModelSpec:
    """Baseline family plus the covariates entering the scale and shape terms.

    An empty ``shape_terms`` gives the ordinary (single-Cox) proportional
    hazards model. ``frailty=False`` pins the frailty variance at zero.
    """

    family: Family
    scale_terms: tuple[int, ...] = ()
    shape_terms: tuple[int, ...] = ()
    frailty: bool = True

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        object.__setattr__(self, "scale_terms", tuple(int(i) for i in self.scale_terms))
        object.__setattr__(self, "shape_terms", tuple(int(i) for i in self.shape_terms))
        for name in ("scale_terms", "shape_terms"):
            terms = getattr(self, name)
            if len(set(terms)) != len(terms):
                raise ValueError(f"duplicate covariate index in {name}: {terms}")
            if any(i < 0 for i in terms):
                raise ValueError(f"negative covariate index in {name}: {terms}")

    @property
    def n_params(self) -> int:
        return 3 + len(self.scale_terms) + len(self.shape_terms)

    @property
    def sigma2_index(self) -> int:
        return self.n_params - 1

    def validate(self, n_covariates: int) -> None:
        for i in self.scale_terms + self.shape_terms:
            if i >= n_covariates:
                raise ValueError(
                    f"covariate index {i} out of range for {n_covariates} covariates"
                )

    def param_names(self, covariate_names: Sequence[str] | None = None) -> list[str]:
        def cname(i):
            return covariate_names[i] if covariate_names is not None else f"u{i}"

        return (
            ["a", "b"]
            + [f"scale[{cname(i)}]" for i in self.scale_terms]
            + [f"shape[{cname(i)}]" for i in self.shape_terms]
            + ["sigma2"]
        )


@dataclass(frozen=True)
class ParameterVector:
    """Natural model parameters ``(a, b, beta_scale, beta_shape, sigma2)``."""

    a: float
    b: float
    beta_scale: tuple[float, ...] = ()
    beta_shape: tuple[float, ...] = ()
    sigma2: float = 0.0
    _array: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "beta_scale", tuple(float(x) for x in np.ravel(self.beta_scale)))
        object.__setattr__(self, "beta_shape", tuple(float(x) for x in np.ravel(self.beta_shape)))
        object.__setattr__(self, "sigma2", float(self.sigma2))
        arr = np.array(
            [self.a, self.b, *self.beta_scale, *self.beta_shape, self.sigma2], dtype=float
        )
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite parameter value in {arr}")
        if self.a <= 0 or self.b <= 0:
            raise ValueError(f"a and b must be positive, got a={self.a}, b={self.b}")
        if self.sigma2 < 0:
            raise ValueError(f"sigma2 must be nonnegative, got {self.sigma2}")
        arr.flags.writeable = False
        object.__setattr__(self, "_array", arr)

    def to_array(self) -> np.ndarray:
        return self._array.copy()

    @classmethod
    def from_array(cls, values, spec: ModelSpec) -> "ParameterVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (spec.n_params,):
            raise ValueError(f"expected {spec.n_params} parameters, got shape {values.shape}")
        ps = len(spec.scale_terms)
        return cls(
            a=values[0],
            b=values[1],
            beta_scale=values[2 : 2 + ps],
            beta_shape=values[2 + ps : -1],
            sigma2=values[-1],
        )

    def check(self, spec: ModelSpec) -> None:
        if len(self.beta_scale) != len(spec.scale_terms):
            raise ValueError("beta_scale length does not match spec.scale_terms")
        if len(self.beta_shape) != len(spec.shape_terms):
            raise ValueError("beta_shape length does not match spec.shape_terms")


def linear_predictors(params: ParameterVector, spec: ModelSpec, u) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(beta_scale . u, k)`` where ``k = b * exp(beta_shape . u)``."""
    params.check(spec)
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        u = u.reshape(1)
    bs = np.asarray(params.beta_scale)
    bk = np.asarray(params.beta_shape)
    # u may hold covariates that the model does not use
    eta_scale = u[..., list(spec.scale_terms)] @ bs if bs.size else np.zeros(u.shape[:-1])
    eta_shape = u[..., list(spec.shape_terms)] @ bk if bk.size else np.zeros(u.shape[:-1])
    return eta_scale, params.b * np.exp(eta_shape)


def _scalar_or_array(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


def cumulative_hazard(params: ParameterVector, spec: ModelSpec, u, t):
    """Cumulative conditional hazard ``H(t|u)`` at frailty one."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("cumulative hazard requires t >= 0")
    eta, k = linear_predictors(params, spec, u)
    eta, k, t = np.broadcast_arrays(eta, k, t)
    if spec.family is Family.WEIBULL:
        with np.errstate(divide="ignore"):
            logq = np.log(t) - np.log(params.a)
        out = np.where(t > 0, np.exp(eta + k * logq), 0.0)
    else:
        kt = k * t
        _check_gompertz(kt, t, k)
        out = params.a * np.exp(eta) * np.expm1(kt) / k
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.isfinite(np.ravel(out)))[0]
        raise DomainError(
            f"non-finite cumulative hazard at t={np.ravel(t)[bad]!r}, "
            f"scale predictor={np.ravel(eta)[bad]!r}, shape k={np.ravel(k)[bad]!r}"
        )
    return _scalar_or_array(out)


def _check_gompertz(kt, t, k):
    if np.any(kt > GOMPERTZ_MAX_EXPONENT):
        bad = np.flatnonzero(np.ravel(kt) > GOMPERTZ_MAX_EXPONENT)[0]
        raise DomainError(
            f"Gompertz exponent k*t={np.ravel(kt)[bad]:.6g} exceeds {GOMPERTZ_MAX_EXPONENT} "
            f"(t={np.ravel(t)[bad]!r}, k={np.ravel(k)[bad]!r})"
        )


def log_hazard(params: ParameterVector, spec: ModelSpec, u, t):
    """Log of the conditional hazard ``h = dH/dt`` at frailty one."""
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("log hazard requires t >= 0")
    eta, k = linear_predictors(params, spec, u)
    eta, k, t = np.broadcast_arrays(eta, k, t)
    if spec.family is Family.WEIBULL:
        zero = t == 0
        if np.any(zero & (k < 1)):
            raise DomainError("Weibull hazard diverges at t=0 when the shape k < 1")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = eta + np.log(k) + (k - 1.0) * np.log(t) - k * np.log(params.a)
        if np.any(zero):
            at_zero = np.where(k == 1, eta - np.log(params.a), -np.inf)
            out = np.where(zero, at_zero, out)
    else:
        kt = k * t
        _check_gompertz(kt, t, k)
        out = np.log(params.a) + eta + kt
    return _scalar_or_array(out)


def conditional_survival(params: ParameterVector, spec: ModelSpec, u, z, t):
    """Survival ``exp(-z H(t|u))`` given frailty ``z``."""
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("frailty must be positive")
    return _scalar_or_array(np.exp(-z * cumulative_hazard(params, spec, u, t)))


def marginal_survival_from_hazard(H, sigma2: float):
    """``(1 + sigma2 H) ** (-1/sigma2)``, or ``exp(-H)`` when ``sigma2 == 0``."""
    H = np.asarray(H, dtype=float)
    if sigma2 == 0:
        return _scalar_or_array(np.exp(-H))
    return _scalar_or_array(np.exp(-np.log1p(sigma2 * H) / sigma2))


def marginal_survival(params: ParameterVector, spec: ModelSpec, u, t):
    """Survival with the gamma frailty integrated out."""
    return marginal_survival_from_hazard(cumulative_hazard(params, spec, u, t), params.sigma2)
