"""Maximum marginal likelihood fitting and observed-information covariance."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .likelihood import Dataset, MarginalLikelihood
from .model import Family, ModelSpec, ParameterVector
from .optimize import minimize_bfgs

__all__ = [
    "ConditioningError",
    "FitOptions",
    "FitResult",
    "InvalidDataError",
    "fit",
    "observed_information_covariance",
]

log = logging.getLogger(__name__)


class InvalidDataError(ValueError):
    """The dataset cannot support the requested fit."""


class ConditioningError(ArithmeticError):
    """The observed information matrix is singular or not positive definite."""

    def __init__(self, message: str, smallest_eigenvalue: float):
        super().__init__(f"{message} (smallest eigenvalue {smallest_eigenvalue:.6g})")
        self.smallest_eigenvalue = smallest_eigenvalue


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    loglik_tol: float = 1e-9
    grad_tol: float = 1e-5
    fd_step: float = 1e-5
    boundary_eps: float = 1e-6
    multistart: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("max_iterations", "loglik_tol", "grad_tol", "fd_step", "boundary_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"FitOptions.{name} must be positive")
        if self.multistart < 0:
            raise ValueError("FitOptions.multistart must be nonnegative")


@dataclass
class FitResult:
    """Outcome of :func:`fit`.

    ``covariance`` is the inverse observed information in natural parameters
    (rows for fixed parameters are zero), or None when the information matrix
    could not be inverted; ``covariance_error`` then says why.
    """

    estimates: ParameterVector
    loglik: float
    converged: bool
    iterations: int
    covariance: np.ndarray | None
    at_boundary: bool
    spec: ModelSpec
    n_obs: int
    param_names: list[str]
    fixed: dict[int, float] = field(default_factory=dict)
    covariance_error: str | None = None
    branch_logliks: dict[str, float] = field(default_factory=dict)

    def standard_errors(self) -> np.ndarray:
        if self.covariance is None:
            return np.full(self.spec.n_params, np.nan)
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


class _Problem:
    """Maps free transformed coordinates to natural parameter rows.

    ``a`` and ``b`` are optimized on the log scale and the frailty variance as
    ``sigma2 = gamma ** 2``.
    """

    def __init__(self, lik: MarginalLikelihood, base: np.ndarray, free: list[int]):
        self.lik = lik
        self.base = base.copy()
        self.free = np.asarray(free, dtype=np.intp)
        k = lik.n_params
        self._log_idx = [j for j, i in enumerate(free) if i in (0, 1)]
        self._sq_idx = [j for j, i in enumerate(free) if i == k - 1]

    def to_natural(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        T = np.repeat(self.base[None, :], X.shape[0], axis=0)
        vals = X.copy()
        if self._log_idx:
            with np.errstate(over="ignore"):
                vals[:, self._log_idx] = np.exp(vals[:, self._log_idx])
        if self._sq_idx:
            vals[:, self._sq_idx] = vals[:, self._sq_idx] ** 2
        T[:, self.free] = vals
        return T

    def to_free(self, theta: np.ndarray) -> np.ndarray:
        x = theta[self.free].astype(float).copy()
        if self._log_idx:
            x[self._log_idx] = np.log(x[self._log_idx])
        if self._sq_idx:
            x[self._sq_idx] = np.sqrt(x[self._sq_idx])
        return x

    def objective(self, X: np.ndarray) -> np.ndarray:
        return -self.lik.batch(self.to_natural(X))


def _check_data(data: Dataset, spec: ModelSpec) -> None:
    spec.validate(data.covariates.shape[1])
    if data.n_events == 0:
        raise InvalidDataError("dataset has no observed events")
    for i in sorted(set(spec.scale_terms) | set(spec.shape_terms)):
        col = data.covariates[:, i]
        if np.all(col == col[0]):
            raise InvalidDataError(
                f"covariate column {data.covariate_names[i]!r} is constant"
            )


def default_init(data: Dataset, spec: ModelSpec) -> np.ndarray:
    """Starting point: zero regression coefficients and a moment-style baseline."""
    k = spec.n_params
    theta = np.zeros(k)
    if spec.family is Family.WEIBULL:
        b0 = 1.0
        theta[0] = float(np.median(data.time)) / math.log(2.0) ** (1.0 / b0)
        theta[1] = b0
    else:
        b0 = 0.1
        bt = np.minimum(b0 * data.time, 700.0)
        theta[0] = data.n_events / float(np.sum(np.expm1(bt) / b0))
        theta[1] = b0
    theta[-1] = 0.5
    return theta


def fit(
    data: Dataset,
    spec: ModelSpec,
    opts: FitOptions | None = None,
    init: ParameterVector | None = None,
    fixed: Mapping[int, float] | None = None,
    *,
    covariance: bool = True,
) -> FitResult:
    """Maximize the marginal log-likelihood.

    Two branches are run, one with the frailty variance held at zero and one
    with it free, and the better one is returned. Parameters listed in
    ``fixed`` (natural-parameter index -> value) are held constant.

    Raises
    ------
    InvalidDataError
        No events, or a constant covariate column used by ``spec``.
    """
    opts = opts or FitOptions()
    _check_data(data, spec)
    lik = MarginalLikelihood(data, spec)
    K = spec.n_params
    s2i = K - 1
    fixed = {int(i): float(v) for i, v in (fixed or {}).items()}
    if init is not None:
        init.check(spec)
        theta0 = init.to_array()
    else:
        theta0 = default_init(data, spec)
    for i, v in fixed.items():
        theta0[i] = v

    branches: dict[str, float | None] = {}
    if s2i in fixed:
        branches["fixed"] = fixed[s2i]
    elif not spec.frailty:
        branches["zero"] = 0.0
    else:
        branches["zero"] = 0.0
        branches["free"] = None

    results = {}
    for name, s2_value in branches.items():
        base = theta0.copy()
        free = [i for i in range(K) if i not in fixed and i != s2i]
        if s2_value is None:
            free.append(s2i)
            if not base[s2i] > 0:
                base[s2i] = 0.5
        else:
            base[s2i] = s2_value
        results[name] = _run_branch(lik, base, free, opts)

    name, best = max(results.items(), key=lambda kv: kv[1][1])
    at_boundary = False
    if name == "free" and best[0][s2i] < opts.boundary_eps:
        name, best = "zero", results["zero"]
    if name == "zero" and spec.frailty and s2i not in fixed:
        at_boundary = True
    theta, loglik, converged, iterations = best
    theta[s2i] = max(theta[s2i], 0.0)
    estimates = ParameterVector.from_array(theta, spec)

    cov = None
    cov_err = None
    fixed_all = dict(fixed)
    if not spec.frailty:
        fixed_all.setdefault(s2i, 0.0)
    if covariance:
        try:
            cov = observed_information_covariance(data, spec, estimates, opts, fixed=fixed_all)
        except ConditioningError as exc:
            cov_err = str(exc)
            log.debug("covariance unavailable: %s", exc)
    return FitResult(
        estimates=estimates,
        loglik=loglik,
        converged=converged,
        iterations=iterations,
        covariance=cov,
        at_boundary=at_boundary,
        spec=spec,
        n_obs=len(data),
        param_names=spec.param_names(data.covariate_names),
        fixed=fixed_all,
        covariance_error=cov_err,
        branch_logliks={k: v[1] for k, v in results.items()},
    )


def _run_branch(lik, base, free, opts):
    problem = _Problem(lik, base, free)
    x0 = problem.to_free(base)
    starts = [x0]
    if opts.multistart:
        rng = np.random.default_rng(opts.seed)
        starts += [x0 + rng.normal(0.0, 0.5, x0.size) for _ in range(opts.multistart)]
    best = None
    for x in starts:
        res = minimize_bfgs(
            problem.objective,
            x,
            max_iter=opts.max_iterations,
            f_rtol=opts.loglik_tol,
            g_tol=opts.grad_tol,
            rel_step=opts.fd_step,
        )
        if best is None or (np.isfinite(res.fun) and res.fun < best.fun):
            best = res
    theta = problem.to_natural(best.x)[0]
    return theta, -float(best.fun), bool(best.converged), int(best.iterations)


def _hessian_steps(x: np.ndarray, free: list[int], fd_step: float) -> np.ndarray:
    h = np.empty(len(free))
    for j, i in enumerate(free):
        if i in (0, 1):
            h[j] = fd_step * abs(x[i])
        else:
            h[j] = fd_step * max(1.0, abs(x[i]))
    return h


def fd_hessian(
    loglik: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    free: list[int],
    steps: np.ndarray,
    one_sided: set[int] = frozenset(),
) -> np.ndarray:
    """Finite-difference Hessian of a batch log-likelihood over ``free`` coordinates.

    Coordinates in ``one_sided`` are differenced forward only.
    """
    d = len(free)
    pts = []

    def point(offsets):
        p = x.copy()
        for j, o in offsets:
            p[free[j]] += o
        pts.append(p)
        return len(pts) - 1

    plan = {}
    i0 = point([])
    for j in range(d):
        h = steps[j]
        if j in one_sided:
            plan[(j, j)] = ("fwd", point([(j, h)]), point([(j, 2 * h)]))
        else:
            plan[(j, j)] = ("ctr", point([(j, h)]), point([(j, -h)]))
    for j in range(d):
        for l in range(j + 1, d):
            hj, hl = steps[j], steps[l]
            if j in one_sided or l in one_sided:
                # forward in the one-sided coordinate, central in the other
                fj, cl = (j, l) if j in one_sided else (l, j)
                hf, hc = steps[fj], steps[cl]
                plan[(j, l)] = (
                    "mix",
                    point([(fj, hf), (cl, hc)]),
                    point([(fj, hf), (cl, -hc)]),
                    point([(cl, hc)]),
                    point([(cl, -hc)]),
                    hf,
                    hc,
                )
            else:
                plan[(j, l)] = (
                    "ctr2",
                    point([(j, hj), (l, hl)]),
                    point([(j, hj), (l, -hl)]),
                    point([(j, -hj), (l, hl)]),
                    point([(j, -hj), (l, -hl)]),
                )
    vals = np.asarray(loglik(np.array(pts)), dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ConditioningError("log-likelihood not finite at a Hessian probe point", float("nan"))
    f0 = vals[i0]
    H = np.empty((d, d))
    for (j, l), entry in plan.items():
        kind = entry[0]
        if kind == "ctr":
            H[j, j] = (vals[entry[1]] - 2 * f0 + vals[entry[2]]) / steps[j] ** 2
        elif kind == "fwd":
            H[j, j] = (vals[entry[2]] - 2 * vals[entry[1]] + f0) / steps[j] ** 2
        elif kind == "ctr2":
            _, pp, pm, mp, mm = entry
            H[j, l] = (vals[pp] - vals[pm] - vals[mp] + vals[mm]) / (4 * steps[j] * steps[l])
            H[l, j] = H[j, l]
        else:
            _, pp, pm, zp, zm, hf, hc = entry
            H[j, l] = (vals[pp] - vals[pm] - vals[zp] + vals[zm]) / (2 * hf * hc)
            H[l, j] = H[j, l]
    return H


def observed_information_covariance(
    data: Dataset | None,
    spec: ModelSpec,
    at: ParameterVector,
    opts: FitOptions | None = None,
    *,
    fixed: Mapping[int, float] | None = None,
    loglik: Callable[[np.ndarray], np.ndarray] | None = None,
    pseudo_inverse: bool = False,
) -> np.ndarray:
    """Inverse of the finite-difference observed information at ``at``.

    The Hessian is taken of the negative log-likelihood in natural parameters
    ``(a, b, beta_scale, beta_shape, sigma2)``; a frailty variance at zero is
    differenced into the feasible side only. ``loglik`` replaces the model
    likelihood by any batch function of natural-parameter rows.

    Raises
    ------
    ConditioningError
        If the information matrix is singular or not positive definite and
        ``pseudo_inverse`` is False.
    """
    opts = opts or FitOptions()
    if loglik is None:
        loglik = MarginalLikelihood(data, spec).batch
    x = at.to_array()
    K = x.size
    fixed = fixed or {}
    free = [i for i in range(K) if i not in fixed]
    steps = _hessian_steps(x, free, opts.fd_step)
    one_sided = set()
    s2i = K - 1
    if s2i in free:
        j = free.index(s2i)
        if x[s2i] - steps[j] < 0:
            one_sided.add(j)
    info = -fd_hessian(loglik, x, free, steps, one_sided)
    info = 0.5 * (info + info.T)
    eig = np.linalg.eigvalsh(info)
    smallest = float(eig[0]) if eig.size else 0.0
    largest = float(eig[-1]) if eig.size else 0.0
    cov = np.zeros((K, K))
    if eig.size == 0:
        return cov
    if not (smallest > 0 and smallest > 1e-12 * largest):
        if not pseudo_inverse:
            raise ConditioningError("observed information is not positive definite", smallest)
        log.warning("observed information ill-conditioned; using pseudo-inverse")
        sub = np.linalg.pinv(info)
    else:
        sub = np.linalg.inv(info)
    sub = 0.5 * (sub + sub.T)
    cov[np.ix_(free, free)] = sub
    return cov
