"""Standard-error and profile-likelihood confidence intervals.

Standard-error intervals near the frailty-variance boundary use the
asymptotic law of ``sqrt(n) (mu_hat_j - mu_j)`` as a two-component mixture:
with weight ``Phi(nu/kappa)`` the first margin of a bivariate normal (second
coordinate truncated to ``[0, inf)``), otherwise the conditional normal given
the variance estimate sits at zero. For the variance itself the law of
``sqrt(n) sigma2_hat`` is a normal truncated at zero plus an atom at zero.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate, optimize
from scipy.stats import chi2, norm

from .estimation import ConditioningError, FitOptions, FitResult, fit
from .likelihood import Dataset
from .model import ModelSpec, ParameterVector

__all__ = [
    "AsymptoticLaw",
    "BracketError",
    "Interval",
    "IntervalMethod",
    "covers",
    "likelihood_ratio_interval",
    "profile_interval",
    "se_interval",
]

log = logging.getLogger(__name__)

#: Deviance tolerance accepted at a profile-likelihood endpoint.
DEVIANCE_TOL = 1e-3
MAX_EXPANSIONS = 50


class BracketError(RuntimeError):
    """The deviance never crossed its threshold while stepping outward."""


class IntervalMethod(str, enum.Enum):
    SE = "SE"
    PL = "PL"


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    level: float
    method: IntervalMethod
    reliable: bool = True

    def __post_init__(self):
        object.__setattr__(self, "method", IntervalMethod(self.method))
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        if not self.lower <= self.upper:
            raise ValueError(f"interval lower {self.lower} exceeds upper {self.upper}")


def covers(interval: Interval, true_value: float) -> bool:
    """Closed-interval membership."""
    return interval.lower <= true_value <= interval.upper


_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _phi_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _check_level(level: float) -> None:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level}")


@dataclass(frozen=True)
class AsymptoticLaw:
    """Boundary-aware limit law for ``sqrt(n)``-scaled estimation errors.

    ``sigma_matrix`` is the asymptotic covariance of ``sqrt(n) mu_hat`` with
    the frailty variance as its last coordinate; ``nu = sqrt(n) sigma2``.
    """

    sigma_matrix: np.ndarray
    kappa: float
    nu: float
    n: int

    def __post_init__(self):
        S = np.asarray(self.sigma_matrix, dtype=float)
        object.__setattr__(self, "sigma_matrix", S)
        if not self.kappa > 0:
            raise ValueError("kappa must be positive")
        if abs(self.kappa**2 - S[-1, -1]) > 1e-12 * max(1.0, S[-1, -1]):
            raise ValueError("kappa**2 must equal the last diagonal entry of sigma_matrix")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")

    @classmethod
    def from_covariance(cls, cov: np.ndarray, sigma2_hat: float, n: int) -> "AsymptoticLaw":
        S = n * np.asarray(cov, dtype=float)
        return cls(S, math.sqrt(S[-1, -1]), math.sqrt(n) * sigma2_hat, n)

    @property
    def k(self) -> int:
        return self.sigma_matrix.shape[0] - 1

    @property
    def weight(self) -> float:
        """Mass of the interior component, ``Phi(nu / kappa)``."""
        return float(norm.cdf(self.nu / self.kappa))

    def _parts(self, j):
        S = self.sigma_matrix
        sjj, sjk, skk = S[j, j], S[j, -1], S[-1, -1]
        cond_var = max(sjj - sjk * sjk / skk, 1e-14 * sjj)
        return sjk / self.kappa, math.sqrt(cond_var), -(sjk / skk) * self.nu

    def cdf(self, j: int, x: float) -> float:
        """CDF of the limit law of ``sqrt(n) (mu_hat_j - mu_j)``.

        For ``j == k`` (the variance) the law is that of ``sqrt(n) sigma2_hat``.
        """
        r = self.nu / self.kappa
        if j == self.k:
            if x < 0:
                return 0.0
            tn = (norm.cdf((x - self.nu) / self.kappa) - norm.cdf(-r)) / max(norm.cdf(r), 1e-300)
            return float(norm.cdf(-r) + self.weight * tn)
        slope, sd, mean2 = self._parts(j)

        # Phi(r) * P(X1 <= x | X2 >= 0), X2 standardized as v
        def integrand(v):
            # plain math calls: this runs tens of thousands of times per interval
            return math.exp(-0.5 * v * v) * _INV_SQRT_2PI * _phi_cdf((x - slope * v) / sd)

        first, _ = integrate.quad(integrand, -r, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
        second = norm.cdf(-r) * norm.cdf((x - mean2) / sd)
        return float(min(1.0, max(0.0, first + second)))

    def quantile(self, j: int, p: float, tol: float = 1e-9) -> float:
        """Smallest ``x`` with ``cdf(j, x) >= p``, by bisection."""
        if not 0.0 < p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if j == self.k and p <= norm.cdf(-self.nu / self.kappa):
            return 0.0
        scale = math.sqrt(self.sigma_matrix[j, j]) + abs(self.nu) * (
            abs(self.sigma_matrix[j, -1]) / self.sigma_matrix[-1, -1] + 1.0
        )
        lo, hi = -scale, scale
        if j == self.k:
            lo = 0.0
        else:
            while self.cdf(j, lo) >= p:
                lo -= 2 * scale
        while self.cdf(j, hi) < p:
            hi += 2 * scale
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            c = self.cdf(j, mid)
            if abs(c - p) < tol:
                return mid
            if c < p:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-14 * scale:
                break
        return hi


def _index(fitresult: FitResult, j) -> int:
    if isinstance(j, str):
        return fitresult.param_names.index(j)
    j = int(j)
    if not 0 <= j < fitresult.spec.n_params:
        raise IndexError(f"parameter index {j} out of range")
    return j


def se_interval(fitresult: FitResult, j, level: float = 0.95) -> Interval:
    """Standard-error-based interval for parameter ``j`` (index or name).

    Far from the boundary (variance estimate more than two standard errors
    above zero, or no frailty in the model) this is the plain normal
    interval; otherwise the mixture law's quantiles are used.

    Raises
    ------
    ConditioningError
        When the fit carries no covariance matrix.
    """
    _check_level(level)
    j = _index(fitresult, j)
    theta = fitresult.estimates.to_array()
    if j in fitresult.fixed:
        return Interval(theta[j], theta[j], level, IntervalMethod.SE)
    if fitresult.covariance is None:
        raise ConditioningError(
            f"no covariance available: {fitresult.covariance_error}", float("nan")
        )
    cov = fitresult.covariance
    k = fitresult.spec.n_params - 1
    z = float(norm.ppf(0.5 + level / 2))
    alpha = 1.0 - level
    frailty_free = k not in fitresult.fixed
    se_j = math.sqrt(max(cov[j, j], 0.0))
    if not frailty_free or cov[k, k] <= 0:
        return Interval(theta[j] - z * se_j, theta[j] + z * se_j, level, IntervalMethod.SE)
    s2_hat = theta[k]
    se_k = math.sqrt(cov[k, k])
    if j != k and s2_hat / se_k > 2:
        return Interval(theta[j] - z * se_j, theta[j] + z * se_j, level, IntervalMethod.SE)
    law = AsymptoticLaw.from_covariance(cov, s2_hat, fitresult.n_obs)
    root_n = math.sqrt(law.n)
    q_lo = law.quantile(j, alpha / 2)
    q_hi = law.quantile(j, 1 - alpha / 2)
    if j == k:
        return Interval(max(0.0, q_lo / root_n), max(0.0, q_hi / root_n), level, IntervalMethod.SE)
    return Interval(theta[j] - q_hi / root_n, theta[j] - q_lo / root_n, level, IntervalMethod.SE)


def likelihood_ratio_interval(
    profile: Callable[[float], tuple[float, bool]],
    estimate: float,
    loglik_max: float,
    level: float = 0.95,
    step: float | None = None,
    *,
    lower_limit: float | None = None,
    lower_inclusive: bool = True,
) -> Interval:
    """Invert the likelihood-ratio test for a scalar parameter.

    ``profile(x)`` returns the profile log-likelihood at ``x`` and whether its
    maximization succeeded. Each endpoint is bracketed by stepping outward in
    multiples of ``step`` and then located by Brent's method on
    ``2 (loglik_max - profile(x)) = chi2_1(level)``. With ``lower_limit`` the
    search never leaves ``[lower_limit, inf)``: an inclusive limit whose
    deviance stays under the threshold becomes the lower endpoint, an
    exclusive one is approached geometrically.
    """
    _check_level(level)
    q = float(chi2.ppf(level, 1))
    if step is None or not np.isfinite(step) or step <= 0:
        step = 0.1 * abs(estimate) + 0.1
    cache: dict[float, float] = {}
    ok_flags: dict[float, bool] = {}

    def dev(x: float) -> float:
        if x not in cache:
            value, ok = profile(x)
            cache[x] = 2.0 * (loglik_max - value) if np.isfinite(value) else np.inf
            ok_flags[x] = bool(ok)
        return cache[x]

    def root(a: float, b: float) -> float:
        lo, hi = min(a, b), max(a, b)
        return optimize.brentq(
            lambda x: min(dev(x), 1e300) - q, lo, hi, xtol=1e-7 * step, rtol=1e-15, maxiter=200
        )

    def side(direction: int) -> tuple[float, bool]:
        prev = estimate
        for m in range(1, MAX_EXPANSIONS + 1):
            x = estimate + direction * m * step
            if direction < 0 and lower_limit is not None and x <= lower_limit:
                if lower_inclusive:
                    x = lower_limit
                    if dev(x) < q:
                        return x, ok_flags[x]
                    r = root(prev, x)
                    return r, ok_flags.get(r, True)
                x = lower_limit + 0.5 * (prev - lower_limit)
            if dev(x) >= q:
                r = root(prev, x)
                return r, ok_flags.get(r, True)
            prev = x
        raise BracketError(
            f"deviance stayed below {q:.6g} after {MAX_EXPANSIONS} steps of {step:.6g}"
        )

    lower, ok_lo = side(-1)
    upper, ok_hi = side(+1)
    reliable = ok_lo and ok_hi
    for x in (lower, upper):
        at_limit = lower_limit is not None and x == lower_limit and cache[x] < q
        if not at_limit and abs(cache[x] - q) >= DEVIANCE_TOL:
            reliable = False
    return Interval(lower, upper, level, IntervalMethod.PL, reliable)


def profile_interval(
    data: Dataset,
    spec: ModelSpec,
    fitresult: FitResult,
    j,
    level: float = 0.95,
    opts: FitOptions | None = None,
    *,
    profile: Callable[[float], tuple[float, bool]] | None = None,
) -> Interval:
    """Profile-likelihood interval for parameter ``j`` (index or name).

    The other free parameters are re-maximized at every probe value, warm
    started from the nearest probe already solved (the MLE at first). A
    ``profile`` callable may replace the model's profile likelihood.
    """
    _check_level(level)
    opts = opts or FitOptions()
    j = _index(fitresult, j)
    theta_hat = fitresult.estimates.to_array()
    if j in fitresult.fixed:
        return Interval(theta_hat[j], theta_hat[j], level, IntervalMethod.PL)
    se = float("nan")
    if fitresult.covariance is not None:
        se = math.sqrt(max(fitresult.covariance[j, j], 0.0))
    if profile is None:
        profile = _model_profile(data, spec, fitresult, j, opts)
    k = spec.n_params - 1
    lower_limit, inclusive = None, True
    if j == k:
        lower_limit = 0.0
    elif j in (0, 1):
        lower_limit, inclusive = 0.0, False
    return likelihood_ratio_interval(
        profile,
        theta_hat[j],
        fitresult.loglik,
        level,
        se,
        lower_limit=lower_limit,
        lower_inclusive=inclusive,
    )


def _model_profile(data, spec, fitresult, j, opts):
    solved: dict[float, np.ndarray] = {fitresult.estimates.to_array()[j]: fitresult.estimates.to_array()}
    fixed_base = dict(fitresult.fixed)

    def profile(x: float) -> tuple[float, bool]:
        nearest = min(solved, key=lambda v: abs(v - x))
        start = solved[nearest].copy()
        start[j] = x
        fixed = {**fixed_base, j: x}
        res = fit(
            data, spec, opts, init=ParameterVector.from_array(start, spec), fixed=fixed,
            covariance=False,
        )
        solved[x] = res.estimates.to_array()
        return res.loglik, res.converged

    return profile
