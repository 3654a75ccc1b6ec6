"""Synthetic clustered survival data with calibrated uniform censoring.

Each subject gets a binary covariate ``Success ~ Bernoulli(p_success)`` and a
continuous ``Score ~ Normal(0, score_sd**2)``; all subjects of a cluster share
a gamma frailty with mean 1 and variance ``sigma2``. Survival times come from
inverting the conditional survival function, censoring times from
``Uniform(0, theta)`` with ``theta`` solved so that the population censoring
probability equals the target rate.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import integrate

from .likelihood import Dataset
from .model import Family, ModelSpec, ParameterVector, cumulative_hazard, linear_predictors
from .special import exp_integral_e1_scaled, scaled_lower_gamma

__all__ = [
    "COVARIATE_NAMES",
    "CalibrationError",
    "CensoringPlan",
    "CensorProbFallbackWarning",
    "DatasetFormatError",
    "SimConfig",
    "calibrate_theta",
    "draw_survival_time",
    "generate_dataset",
    "individual_censor_prob",
    "mix_seed",
    "read_dataset_csv",
    "sub_seed",
    "write_dataset_csv",
]

log = logging.getLogger(__name__)

COVARIATE_NAMES = ("Success", "Score")
_MASK64 = (1 << 64) - 1


class CalibrationError(RuntimeError):
    """The censoring bound could not be bracketed."""


class DatasetFormatError(ValueError):
    """A dataset file is missing columns or holds unparsable values."""


class CensorProbFallbackWarning(RuntimeWarning):
    """The closed-form censoring probability was replaced by quadrature."""


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def mix_seed(*keys: int) -> int:
    """Fold integers into one 64-bit value with the splitmix64 finalizer."""
    h = 0
    for k in keys:
        h = _splitmix64(h ^ (int(k) & _MASK64))
    return h


def sub_seed(seed: int, config_index: int, rep_index: int) -> int:
    """``seed XOR mix(config_index, rep_index)``: per-replication seed."""
    return (int(seed) & _MASK64) ^ mix_seed(config_index, rep_index)


@dataclass(frozen=True)
class SimConfig:
    """One simulation design: sample, clustering, covariate laws, truth, censoring.

    Covariates are ``Success ~ Bernoulli(p_success)`` and
    ``Score ~ Normal(0, score_sd**2)``; ``beta_scale``/``beta_shape`` of the true
    parameters use the first one or two of them in that order.
    """

    family: Family
    n: int
    n_clusters: int
    true_params: ParameterVector
    p_success: float = 0.5
    score_sd: float = math.sqrt(0.2)
    p_cens: float = 0.0
    seed: int = 0
    mc_n: int = 1_000_000

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        if not (self.n >= self.n_clusters >= 1):
            raise ValueError("need n >= n_clusters >= 1")
        if not (0.0 <= self.p_cens < 1.0):
            raise ValueError("p_cens must lie in [0, 1)")
        if not (0.0 <= self.p_success <= 1.0):
            raise ValueError("p_success must lie in [0, 1]")
        if len(self.true_params.beta_scale) > 2 or len(self.true_params.beta_shape) > 2:
            raise ValueError("at most two covariates (Success, Score) per term")
        if self.mc_n < 1:
            raise ValueError("mc_n must be positive")

    @property
    def spec(self) -> ModelSpec:
        """Model with the covariates the true parameters refer to."""
        return ModelSpec(
            self.family,
            tuple(range(len(self.true_params.beta_scale))),
            tuple(range(len(self.true_params.beta_shape))),
        )


@dataclass(frozen=True)
class CensoringPlan:
    theta: float | None
    achieved_rate_estimate: float

    def __post_init__(self):
        if self.theta is not None and not self.theta > 0:
            raise ValueError("theta must be positive")


def _open_uniform(rng: np.random.Generator, size: int) -> np.ndarray:
    """Uniform draws strictly inside (0, 1)."""
    return (rng.integers(0, 1 << 53, size=size).astype(float) + 0.5) / float(1 << 53)


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def draw_survival_time(params: ParameterVector, spec: ModelSpec, u, z, s):
    """Invert ``exp(-z H(t|u)) = s`` for ``t``."""
    s = np.asarray(s, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(~((s > 0) & (s < 1))):
        raise ValueError("uniform draw s must lie strictly inside (0, 1)")
    if np.any(~(z > 0)):
        raise ValueError("frailty must be positive")
    eta, k = linear_predictors(params, spec, u)
    target = -np.log(s)  # z H(t) = target
    if spec.family is Family.WEIBULL:
        logt = math.log(params.a) + (np.log(target) - np.log(z) - eta) / k
        return _out(np.exp(logt))
    return _out(np.log1p(k * target / (params.a * np.exp(eta) * z)) / k)


def _censor_prob_quadrature(params, spec, u_row, z, theta):
    eta, k = linear_predictors(params, spec, u_row)
    eta, k = float(np.ravel(eta)[0]), float(np.ravel(k)[0])
    log_scale = math.log(z) + eta

    def surv(c):
        if c <= 0:
            return 1.0
        if spec.family is Family.WEIBULL:
            log_zh = log_scale + k * (math.log(c) - math.log(params.a))
        else:
            # log of z a e^eta (e^{kc} - 1) / k without overflowing e^{kc}
            kc = k * c
            log_growth = kc + math.log1p(-math.exp(-kc)) if kc > 1 else math.log(math.expm1(kc))
            log_zh = log_scale + math.log(params.a) - math.log(k) + log_growth
        return math.exp(-math.exp(log_zh)) if log_zh < 700 else 0.0

    val, _ = integrate.quad(surv, 0.0, theta, epsabs=0.0, epsrel=1e-12, limit=200)
    return val / theta


def individual_censor_prob(params: ParameterVector, spec: ModelSpec, u, z, theta: float):
    """Probability that ``C ~ Uniform(0, theta)`` precedes the survival time.

    Equals ``theta^-1 int_0^theta S(c | u, z) dc``, evaluated in closed form:
    through the lower incomplete gamma function for Weibull and the
    exponential integral for Gompertz.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    z = np.asarray(z, dtype=float)
    eta, k = linear_predictors(params, spec, u)
    eta, k, z = np.broadcast_arrays(eta, k, z)
    c = z * np.exp(eta)
    if spec.family is Family.WEIBULL:
        with np.errstate(divide="ignore"):
            x = np.exp(np.log(c) + k * (math.log(theta) - math.log(params.a)))
        return _out(scaled_lower_gamma(1.0 / k, x))

    x0 = c * params.a / k
    ktheta = k * theta
    out = np.empty(np.shape(x0))
    x0f, ktf, kf = np.ravel(x0), np.ravel(ktheta), np.ravel(k)
    outf = out.reshape(-1)
    # second exponential-integral term is exactly zero once its argument passes ~745
    tail_zero = (ktf > 700.0) & (np.log(x0f) + np.minimum(ktf, 700.0) > math.log(750.0))
    regular = ktf <= 700.0
    fallback = ~(regular | tail_zero)
    if np.any(regular):
        x0r, ktr = x0f[regular], ktf[regular]
        x1 = x0r * np.exp(ktr)
        with np.errstate(under="ignore"):
            diff = exp_integral_e1_scaled(x0r) - np.exp(x0r - x1) * exp_integral_e1_scaled(x1)
        outf[regular] = diff / ktr
    if np.any(tail_zero):
        outf[tail_zero] = exp_integral_e1_scaled(x0f[tail_zero]) / ktf[tail_zero]
    if np.any(fallback):
        warnings.warn(
            f"{int(fallback.sum())} Gompertz censoring probabilities evaluated by quadrature",
            CensorProbFallbackWarning,
            stacklevel=2,
        )
        U = np.asarray(u, dtype=float)
        if U.ndim == 0:
            U = U.reshape(1)
        m = U.shape[-1]
        U = np.broadcast_to(U, np.shape(x0) + (m,)).reshape(out.size, m)
        zf = np.ravel(z)
        for i in np.flatnonzero(fallback):
            outf[i] = _censor_prob_quadrature(params, spec, U[i], float(zf[i]), theta)
    return _out(np.clip(out, 0.0, 1.0))


def _draw_covariates(rng: np.random.Generator, size: int, p_success: float, score_sd: float):
    success = (rng.random(size) < p_success).astype(float)
    score = rng.normal(0.0, score_sd, size)
    return np.column_stack([success, score])


def _draw_frailty(rng: np.random.Generator, size: int, sigma2: float) -> np.ndarray:
    if sigma2 == 0:
        return np.ones(size)
    # numpy uses Marsaglia-Tsang rejection with squeeze, boosted for shape < 1
    z = rng.gamma(1.0 / sigma2, sigma2, size)
    return np.maximum(z, np.finfo(float).tiny)


def _mc_pairs(config: SimConfig):
    rng = np.random.default_rng(mix_seed(config.seed, 0xCA1B))
    z = _draw_frailty(rng, config.mc_n, config.true_params.sigma2)
    u = _draw_covariates(rng, config.mc_n, config.p_success, config.score_sd)
    return u, z


_PILOT_SIZE = 20_000
_LOG_THETA_TOL = 1e-9


def _mean_rate_and_slope(params, spec, u, z, log_theta):
    """Mean censoring probability and its derivative in ``log theta``.

    With ``P(theta) = theta^-1 int_0^theta S`` the derivative is ``S(theta) - P(theta)``.
    """
    theta = math.exp(log_theta)
    p = individual_censor_prob(params, spec, u, z, theta)
    return float(np.mean(p)), float(np.mean(_survival_at(params, spec, u, z, theta) - p))


def _survival_at(params, spec, u, z, c: float) -> np.ndarray:
    """``exp(-z H(c | u))`` computed in log space, so large Gompertz ``k c`` is harmless."""
    eta, k = linear_predictors(params, spec, u)
    log_scale = np.log(z) + eta
    if spec.family is Family.WEIBULL:
        log_zh = log_scale + k * (math.log(c) - math.log(params.a))
    else:
        kc = k * c
        with np.errstate(divide="ignore"):
            growth = np.where(kc > 1, kc + np.log1p(-np.exp(-np.maximum(kc, 1))), np.log(np.expm1(np.minimum(kc, 1))))
        log_zh = log_scale + math.log(params.a) - np.log(k) + growth
    with np.errstate(over="ignore"):
        return np.exp(-np.exp(np.minimum(log_zh, 700.0)))


def _solve_log_theta(evaluate, target, x, lo, hi):
    """Newton iteration in ``log theta`` kept inside a shrinking bracket.

    The mean rate decreases in ``theta``, so the sign of the residual tells
    which side of the root each iterate lies on; steps leaving the bracket
    are replaced by bisection.
    """
    for _ in range(100):
        rate, slope = evaluate(x)
        resid = rate - target
        if resid > 0:
            lo = x
        else:
            hi = x
        step = -resid / slope if slope < 0 else math.nan
        if resid == 0:
            return x, rate
        new = x + step
        if lo < new < hi:
            if abs(step) < _LOG_THETA_TOL:
                # a converged Newton step: the rate there is known to O(step^2)
                return new, rate + slope * step
        else:
            new = 0.5 * (lo + hi)
        x = new
    raise CalibrationError(f"censoring bound did not converge (last log theta {x:.6g})")


def calibrate_theta(config: SimConfig) -> CensoringPlan:
    """Solve for the uniform censoring bound that gives ``config.p_cens``.

    The population censoring probability is a Monte-Carlo average over
    ``config.mc_n`` frailty/covariate pairs; the same pairs are reused at every
    trial bound, so the average is a deterministic decreasing function of it.
    A first solve on a subsample supplies the starting point for the solve on
    all pairs.
    """
    if config.p_cens == 0:
        return CensoringPlan(None, 0.0)
    params, spec = config.true_params, config.spec
    u, z = _mc_pairs(config)
    t_med = float(np.median(draw_survival_time(params, spec, u, z, 0.5)))
    lo, hi = math.log(1e-6 * t_med), math.log(1e6 * t_med)

    m = min(_PILOT_SIZE, config.mc_n)
    pilot = lambda lt: _mean_rate_and_slope(params, spec, u[:m], z[:m], lt)
    r_lo, r_hi = pilot(lo)[0], pilot(hi)[0]
    if not (r_lo >= config.p_cens >= r_hi):
        raise CalibrationError(
            f"censoring rate {config.p_cens} not bracketed: rate ranges over "
            f"[{r_hi:.6g}, {r_lo:.6g}] for theta in [{math.exp(lo):.6g}, {math.exp(hi):.6g}]"
        )
    start, _ = _solve_log_theta(pilot, config.p_cens, math.log(t_med), lo, hi)
    if m < config.mc_n:
        full = lambda lt: _mean_rate_and_slope(params, spec, u, z, lt)
        root, achieved = _solve_log_theta(full, config.p_cens, start, lo, hi)
    else:
        root, achieved = start, pilot(start)[0]
    theta = math.exp(root)
    log.info("calibrated theta=%.6g for p_cens=%.3g", theta, config.p_cens)
    return CensoringPlan(theta, achieved)


def generate_dataset(config: SimConfig, plan: CensoringPlan, *, return_draws: bool = False):
    """Draw one dataset; identical seeds give identical datasets.

    With ``return_draws`` the frailty, uniform and latent survival draws are
    returned alongside the dataset as a dict.
    """
    rng = np.random.default_rng(int(config.seed) & _MASK64)
    n, ncl = config.n, config.n_clusters
    sizes = np.full(ncl, n // ncl)
    sizes[: n % ncl] += 1
    cluster = np.repeat(np.arange(1, ncl + 1), sizes)
    z_cl = _draw_frailty(rng, ncl, config.true_params.sigma2)
    z = z_cl[cluster - 1]
    X = _draw_covariates(rng, n, config.p_success, config.score_sd)
    s = _open_uniform(rng, n)
    T = draw_survival_time(config.true_params, config.spec, X, z, s)
    if plan.theta is not None:
        C = plan.theta * _open_uniform(rng, n)
        time = np.minimum(T, C)
        event = T <= C
    else:
        time, event = T, np.ones(n, dtype=bool)
    data = Dataset(time, event, tuple(int(c) for c in cluster), X, COVARIATE_NAMES)
    if return_draws:
        return data, {"z": z, "s": s, "T": T, "u": X}
    return data


def write_dataset_csv(data: Dataset, path) -> None:
    """Write ``time,event,cluster,<covariates>`` with 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "event", "cluster", *data.covariate_names])
        for t, e, c, x in zip(data.time, data.event, data.cluster, data.covariates):
            w.writerow([f"{t:.17g}", int(e), c, *(f"{v:.17g}" for v in x)])


def _parse_cluster(text: str):
    try:
        return int(text)
    except ValueError:
        return text


def read_dataset_csv(path) -> Dataset:
    """Read a dataset written by :func:`write_dataset_csv` (or by hand)."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetFormatError(f"{path}: empty file") from None
        for col in ("time", "event", "cluster"):
            if col not in header:
                raise DatasetFormatError(f"{path}: missing required column {col!r}")
        it, ie, ic = header.index("time"), header.index("event"), header.index("cluster")
        cov_idx = [i for i, h in enumerate(header) if h not in ("time", "event", "cluster")]
        times, events, clusters, covs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetFormatError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                times.append(float(row[it]))
                ev = int(float(row[ie]))
                covs.append([float(row[i]) for i in cov_idx])
            except ValueError as exc:
                raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
            if ev not in (0, 1):
                raise DatasetFormatError(f"{path}:{lineno}: column 'event' must be 0 or 1")
            events.append(bool(ev))
            clusters.append(_parse_cluster(row[ic].strip()))
    if not times:
        raise DatasetFormatError(f"{path}: no data rows")
    try:
        return Dataset(
            np.array(times),
            np.array(events),
            tuple(clusters),
            np.array(covs, dtype=float).reshape(len(times), len(cov_idx)),
            tuple(header[i] for i in cov_idx),
        )
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
