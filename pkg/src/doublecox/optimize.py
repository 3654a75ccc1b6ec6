"""BFGS minimizer driven by central finite-difference gradients.

The objective is a *batch* function: it maps an ``(m, d)`` array of points to
``m`` values, returning ``+inf`` for infeasible points. Gradients and line
searches submit all their trial points in one call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

BatchFn = Callable[[np.ndarray], np.ndarray]

_ARMIJO = 1e-4
_MAX_REBUILDS = 3
_RESOLUTION = 64 * np.finfo(float).eps
_STEP_GROUPS = (
    2.0 ** -np.arange(0, 4),
    2.0 ** -np.arange(4, 12),
    2.0 ** -np.arange(12, 40),
)


@dataclass
class QNResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    converged: bool
    iterations: int
    message: str


def fd_steps(x: np.ndarray, rel_step: float) -> np.ndarray:
    return rel_step * np.maximum(1.0, np.abs(x))


def fd_gradient(fun: BatchFn, x: np.ndarray, rel_step: float, f0: float | None = None,
                steps: np.ndarray | None = None) -> np.ndarray:
    """Central-difference gradient; falls back to one side next to an infeasible point."""
    x = np.asarray(x, dtype=float)
    d = x.size
    h = fd_steps(x, rel_step) if steps is None else steps
    pts = np.repeat(x[None, :], 2 * d, axis=0)
    idx = np.arange(d)
    pts[idx, idx] += h
    pts[d + idx, idx] -= h
    vals = fun(pts)
    fp, fm = vals[:d], vals[d:]
    g = (fp - fm) / (2 * h)
    bad = ~np.isfinite(g)
    if np.any(bad):
        if f0 is None:
            f0 = float(fun(x[None, :])[0])
        fwd = (fp - f0) / h
        bwd = (f0 - fm) / h
        g = np.where(bad & np.isfinite(fwd), fwd, g)
        g = np.where(bad & ~np.isfinite(fwd) & np.isfinite(bwd), bwd, g)
        g = np.where(np.isfinite(g), g, 0.0)
    return g


def minimize_bfgs(
    fun: BatchFn,
    x0,
    *,
    max_iter: int = 500,
    f_rtol: float = 1e-9,
    g_tol: float = 1e-5,
    rel_step: float = 1e-5,
    callback: Callable[[np.ndarray, float], None] | None = None,
) -> QNResult:
    """Minimize ``fun`` from ``x0``.

    Convergence requires both the relative change of the objective over the
    last step to be below ``f_rtol`` and the gradient infinity norm to be
    below ``g_tol``. Accepted steps never increase the objective;
    ``callback(x, f)`` sees each accepted iterate.
    """
    x = np.asarray(x0, dtype=float).copy()
    d = x.size
    f = float(fun(x[None, :])[0])
    if not np.isfinite(f):
        return QNResult(x, f, np.full(d, np.nan), False, 0, "infeasible starting point")
    if d == 0:
        return QNResult(x, f, np.zeros(0), True, 0, "no free parameters")
    g = fd_gradient(fun, x, rel_step, f)
    Hinv = None
    rel_change = np.inf
    it = 0
    stalled = 0
    rebuilds = 0
    message = "maximum iterations reached"
    while it < max_iter:
        gnorm = np.max(np.abs(g))
        if gnorm <= g_tol and (rel_change <= f_rtol or gnorm == 0.0):
            return QNResult(x, f, g, True, it, "converged")
        if Hinv is None:
            direction = -g / max(1.0, gnorm)
        else:
            direction = -Hinv @ g
            if g @ direction >= 0:
                Hinv = None
                direction = -g / max(1.0, gnorm)
        slope = float(g @ direction)
        step = _line_search(fun, x, f, direction, slope)
        if step is None and Hinv is not None:
            Hinv = None
            direction = -g / max(1.0, gnorm)
            slope = float(g @ direction)
            step = _line_search(fun, x, f, direction, slope)
        if step is None:
            if gnorm <= g_tol or _at_working_precision(fun, x, f, g, rel_step):
                return QNResult(x, f, g, True, it, "converged")
            return QNResult(x, f, g, False, it, "line search failed")
        alpha, f_new = step
        it += 1
        x_new = x + alpha * direction
        g_new = fd_gradient(fun, x_new, rel_step, f_new)
        s = x_new - x
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if Hinv is None:
                Hinv = np.eye(d) * (sy / float(y @ y))
            rho = 1.0 / sy
            Hy = Hinv @ y
            Hinv = (
                Hinv
                - rho * (np.outer(s, Hy) + np.outer(Hy, s))
                + (rho * rho * float(y @ Hy) + rho) * np.outer(s, s)
            )
        rel_change = abs(f - f_new) / max(1.0, abs(f))
        stalled = stalled + 1 if f_new == f else 0
        x, f, g = x_new, f_new, g_new
        if stalled >= 2 and rebuilds < _MAX_REBUILDS and np.max(np.abs(g)) > g_tol:
            # The objective no longer resolves the remaining progress, so the
            # secant updates are mostly noise; restart from a differenced Hessian.
            rebuilt = _inverse_fd_hessian(fun, x, 10 * rel_step)
            if rebuilt is not None:
                Hinv = rebuilt
            rebuilds += 1
            stalled = 0
        if callback is not None:
            callback(x, f)
    gnorm = np.max(np.abs(g))
    converged = gnorm <= g_tol and rel_change <= f_rtol
    return QNResult(x, f, g, converged, it, "converged" if converged else message)


def _inverse_fd_hessian(fun: BatchFn, x: np.ndarray, rel_step: float) -> np.ndarray | None:
    """Inverse of a central-difference Hessian, or None if it is not positive definite."""
    d = x.size
    h = fd_steps(x, rel_step)
    pts = [x]
    for i in range(d):
        for si in (1, -1):
            p = x.copy()
            p[i] += si * h[i]
            pts.append(p)
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    for i, j in pairs:
        for si, sj in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            p = x.copy()
            p[i] += si * h[i]
            p[j] += sj * h[j]
            pts.append(p)
    vals = fun(np.array(pts))
    if not np.all(np.isfinite(vals)):
        return None
    f0 = vals[0]
    H = np.empty((d, d))
    for i in range(d):
        H[i, i] = (vals[1 + 2 * i] - 2 * f0 + vals[2 + 2 * i]) / h[i] ** 2
    base = 1 + 2 * d
    for m, (i, j) in enumerate(pairs):
        fpp, fpm, fmp, fmm = vals[base + 4 * m: base + 4 * m + 4]
        H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * h[i] * h[j])
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        return None
    Hinv = np.linalg.inv(H)
    return 0.5 * (Hinv + Hinv.T)


def _at_working_precision(fun: BatchFn, x: np.ndarray, f: float, g: np.ndarray, rel_step: float) -> bool:
    """True when the Newton decrement is below the objective's rounding level.

    Then no representable decrease remains, even if the gradient is a little
    above tolerance (large curvature makes tiny gradients unresolvable in f).
    """
    Hinv = _inverse_fd_hessian(fun, x, 10 * rel_step)
    if Hinv is None:
        return False
    decrement = 0.5 * float(g @ Hinv @ g)
    return decrement <= _RESOLUTION * max(1.0, abs(f))


def _line_search(fun, x, f, direction, slope):
    """Largest step from a halving sequence that satisfies the Armijo condition."""
    if not slope < 0:
        return None
    for alphas in _STEP_GROUPS:
        trial = x[None, :] + alphas[:, None] * direction[None, :]
        moved = np.any(trial != x[None, :], axis=1)
        if not np.any(moved):
            break
        vals = fun(trial)
        ok = moved & np.isfinite(vals) & (vals <= f + _ARMIJO * alphas * slope) & (vals <= f)
        if np.any(ok):
            i = int(np.argmax(ok))
            return float(alphas[i]), float(vals[i])
    return None
