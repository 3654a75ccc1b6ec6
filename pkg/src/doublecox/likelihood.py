"""Clustered data container and the gamma shared-frailty marginal likelihood.

For cluster ``i`` with ``D_i`` observed failures and summed cumulative hazard
``H_i`` the frailty integrates out in closed form::

    l_i = sum_{events} log h + sum_{k<D_i} log(1 + k s2) - (1/s2 + D_i) log(1 + s2 H_i)

and ``l_i = sum_{events} log h - H_i`` at ``s2 = 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import (
    GOMPERTZ_MAX_EXPONENT,
    Family,
    ModelSpec,
    ParameterVector,
    SubjectRecord,
    cumulative_hazard,
    log_hazard,
)

__all__ = ["INFEASIBLE", "Dataset", "MarginalLikelihood", "cluster_loglik", "marginal_loglik"]

log = logging.getLogger(__name__)

#: Returned in place of a log-likelihood value when evaluation fails.
INFEASIBLE = float("-inf")


def _cluster_key(cid):
    if isinstance(cid, (int, np.integer)):
        return (0, int(cid), "")
    return (1, 0, str(cid))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Right-censored clustered survival data.

    Subjects are stored grouped by cluster, clusters in sorted id order and
    subjects in their input order within a cluster. That order fixes the
    summation order of the likelihood.
    """

    time: np.ndarray
    event: np.ndarray
    cluster: tuple
    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    cluster_ids: tuple = field(init=False)
    cluster_starts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = np.asarray(self.time, dtype=float).ravel()
        ev = np.asarray(self.event, dtype=bool).ravel()
        cl = [c.item() if isinstance(c, np.generic) else c for c in self.cluster]
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(len(t), -1) if len(t) else X.reshape(0, 0)
        names = tuple(str(n) for n in self.covariate_names)
        n = len(t)
        if n == 0:
            raise ValueError("dataset must contain at least one subject")
        if not (len(ev) == len(cl) == X.shape[0] == n):
            raise ValueError("time, event, cluster and covariates lengths differ")
        if X.shape[1] != len(names):
            raise ValueError(
                f"{X.shape[1]} covariate columns but {len(names)} covariate names"
            )
        if not np.all(np.isfinite(t) & (t > 0)):
            raise ValueError("all times must be positive and finite")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates must be finite")
        order = sorted(range(n), key=lambda i: _cluster_key(cl[i]))
        idx = np.asarray(order, dtype=np.intp)
        t, ev, X = t[idx], ev[idx], X[idx]
        cl = tuple(cl[i] for i in order)
        starts = [0] + [i for i in range(1, n) if cl[i] != cl[i - 1]]
        for arr in (t, ev, X):
            arr.flags.writeable = False
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "event", ev)
        object.__setattr__(self, "cluster", cl)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "cluster_ids", tuple(cl[s] for s in starts))
        object.__setattr__(self, "cluster_starts", np.asarray(starts, dtype=np.intp))

    @classmethod
    def from_records(
        cls, records: Iterable[SubjectRecord], covariate_names: Sequence[str] | None = None
    ) -> "Dataset":
        records = list(records)
        if not records:
            raise ValueError("dataset must contain at least one subject")
        p = len(records[0].covariates)
        if any(len(r.covariates) != p for r in records):
            raise ValueError("subjects have differing covariate counts")
        if covariate_names is None:
            covariate_names = [f"u{i}" for i in range(p)]
        return cls(
            time=np.array([r.time for r in records]),
            event=np.array([r.event for r in records]),
            cluster=tuple(r.cluster for r in records),
            covariates=np.array([r.covariates for r in records], dtype=float).reshape(len(records), p),
            covariate_names=tuple(covariate_names),
        )

    def __len__(self) -> int:
        return len(self.time)

    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_events(self) -> int:
        return int(self.event.sum())

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(float(t), bool(e), c, tuple(x))
            for t, e, c, x in zip(self.time, self.event, self.cluster, self.covariates)
        ]

    @property
    def cluster_index(self) -> Mapping[object, list[int]]:
        ends = list(self.cluster_starts[1:]) + [len(self)]
        return {
            cid: list(range(s, e))
            for cid, s, e in zip(self.cluster_ids, self.cluster_starts, ends)
        }

    def cluster_subjects(self) -> list[list[SubjectRecord]]:
        subjects = self.subjects
        return [[subjects[i] for i in ix] for ix in self.cluster_index.values()]

    def with_covariates(self, covariates: np.ndarray) -> "Dataset":
        return Dataset(self.time, self.event, self.cluster, covariates, self.covariate_names)


class MarginalLikelihood:
    """Vectorized marginal log-likelihood for one dataset and model spec.

    Calling the object with a 2-D array of natural parameter rows
    ``(a, b, beta_scale, beta_shape, sigma2)`` evaluates all rows in one pass;
    rows that cannot be evaluated come back as :data:`INFEASIBLE`.
    """

    def __init__(self, data: Dataset, spec: ModelSpec):
        spec.validate(data.covariates.shape[1])
        self.data = data
        self.spec = spec
        self.n_params = spec.n_params
        self._ps = len(spec.scale_terms)
        self._t = data.time[:, None]
        self._logt = np.log(data.time)[:, None]
        self._ev = data.event
        self._Us = data.covariates[:, list(spec.scale_terms)]
        self._Uk = data.covariates[:, list(spec.shape_terms)]
        self._starts = data.cluster_starts
        ends = np.append(data.cluster_starts[1:], len(data))
        self._D = np.add.reduceat(data.event.astype(np.int64), data.cluster_starts)
        assert np.all(ends > data.cluster_starts)
        self._dmax = int(self._D.max()) if self._D.size else 0
        # number of clusters with exactly d events, d = 0..dmax
        self._d_counts = np.bincount(self._D, minlength=self._dmax + 1).astype(float)
        self._d_total = float(self._D.sum())

    def __call__(self, theta) -> np.ndarray | float:
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            return float(self.batch(theta[None, :])[0])
        return self.batch(theta)

    def batch(self, theta: np.ndarray) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        m = theta.shape[0]
        out = np.full(m, INFEASIBLE)
        ok = (
            np.all(np.isfinite(theta), axis=1)
            & (theta[:, 0] > 0)
            & (theta[:, 1] > 0)
            & (theta[:, -1] >= 0)
        )
        if not np.any(ok):
            return out
        th = theta[ok]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            vals = self._eval(th)
        vals = np.where(np.isfinite(vals), vals, INFEASIBLE)
        out[ok] = vals
        return out

    def _eval(self, th: np.ndarray) -> np.ndarray:
        ps = self._ps
        a, b, s2 = th[:, 0], th[:, 1], th[:, -1]
        bs, bk = th[:, 2 : 2 + ps], th[:, 2 + ps : -1]
        eta = self._Us @ bs.T if ps else np.zeros((len(self._ev), len(th)))
        k = b * np.exp(self._Uk @ bk.T) if bk.shape[1] else np.broadcast_to(b, (len(self._ev), len(th)))
        if self.spec.family is Family.WEIBULL:
            logH = eta + k * (self._logt - np.log(a))
            H = np.exp(logH)
            loghaz = logH + np.log(k) - self._logt
        else:
            kt = k * self._t
            bad = np.any(kt > GOMPERTZ_MAX_EXPONENT, axis=0)
            H = a * np.exp(eta) * np.expm1(kt) / k
            loghaz = np.log(a) + eta + kt
        ev_term = loghaz[self._ev].sum(axis=0)
        Hc = np.add.reduceat(H, self._starts, axis=0)  # (clusters, m)

        # sigma2 = 0 rows use the exact limit
        pos = s2 > 0
        s2_safe = np.where(pos, s2, 1.0)
        frail = -((1.0 / s2_safe) + self._D[:, None]) * np.log1p(s2_safe * Hc)
        frail = frail.sum(axis=0)
        if self._dmax > 0:
            kk = np.arange(self._dmax, dtype=float)
            table = np.cumsum(np.log1p(np.outer(s2_safe, kk)), axis=1)  # table[:, d-1]
            frail = frail + table @ self._d_counts[1:]
        frail = np.where(pos, frail, -Hc.sum(axis=0))
        total = ev_term + frail
        if self.spec.family is Family.GOMPERTZ:
            total = np.where(bad, INFEASIBLE, total)
        return total


def cluster_loglik(
    cluster_subjects: Sequence[SubjectRecord], params: ParameterVector, spec: ModelSpec
) -> float:
    """Marginal log-likelihood contribution of one cluster.

    Domain errors from the hazard functions propagate to the caller.
    """
    subjects = list(cluster_subjects)
    if not subjects:
        raise ValueError("cluster must contain at least one subject")
    U = np.array([s.covariates for s in subjects], dtype=float).reshape(len(subjects), -1)
    t = np.array([s.time for s in subjects])
    ev = np.array([s.event for s in subjects], dtype=bool)
    H = np.atleast_1d(cumulative_hazard(params, spec, U, t))
    total_h = 0.0
    if ev.any():
        total_h = float(np.sum(np.atleast_1d(log_hazard(params, spec, U[ev], t[ev]))))
    Hsum = float(np.sum(H))
    s2 = params.sigma2
    if s2 == 0:
        return total_h - Hsum
    D = int(ev.sum())
    poch = float(np.sum(np.log1p(np.arange(D) * s2)))
    return total_h + poch - (1.0 / s2 + D) * float(np.log1p(s2 * Hsum))


def marginal_loglik(data: Dataset, params: ParameterVector, spec: ModelSpec) -> float:
    """Sum of cluster contributions; :data:`INFEASIBLE` if any cluster fails."""
    params.check(spec)
    value = MarginalLikelihood(data, spec)(params.to_array())
    if value == INFEASIBLE:
        log.debug("marginal log-likelihood infeasible at %s", params)
    return value
