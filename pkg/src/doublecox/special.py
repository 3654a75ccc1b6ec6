"""Lower incomplete gamma and exponential integral, vectorized over numpy arrays.

Both use a power series on the small-argument side and a modified Lentz
continued fraction on the large-argument side (Numerical Recipes, ch. 6).
"""

from __future__ import annotations

import math

import numpy as np

from .model import DomainError

__all__ = ["log_gamma", "lower_incomplete_gamma", "exp_integral_e1"]

EULER_GAMMA = 0.57721566490153286061
_EPS = 1e-15
_TINY = 1e-300
_MAX_ITER = 1000

# Lanczos approximation, g = 7, n = 9
_LANCZOS_G = 7.0
_LANCZOS = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def log_gamma(x):
    """``log Gamma(x)`` for positive ``x``."""
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise DomainError("log_gamma requires x > 0")
    small = x < 0.5
    # reflection for x < 0.5
    y = np.where(small, 1.0 - x, x) - 1.0
    acc = np.full_like(y, _LANCZOS[0])
    for i in range(1, len(_LANCZOS)):
        acc = acc + _LANCZOS[i] / (y + i)
    tt = y + _LANCZOS_G + 0.5
    lg = 0.5 * math.log(2 * math.pi) + (y + 0.5) * np.log(tt) - tt + np.log(acc)
    if np.any(small):
        lg = np.where(small, np.log(np.pi / np.abs(np.sin(np.pi * x))) - lg, lg)
    return _out(lg)


def _gamma_series(s, x):
    """Return ``sum_n x^n / (s (s+1) ... (s+n))`` (so ``gamma(s,x) = x^s e^-x * sum``)."""
    out = np.empty_like(x)
    idx = np.arange(s.size)
    term = 1.0 / s
    total = term.copy()
    ap = s.copy()
    x = x.copy()
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        done = np.abs(term) < np.abs(total) * _EPS
        if done.any():
            # converged entries are stored and dropped from the working arrays
            out[idx[done]] = total[done]
            keep = ~done
            idx, term, total, ap, x = idx[keep], term[keep], total[keep], ap[keep], x[keep]
            if idx.size == 0:
                return out
    raise ArithmeticError("incomplete gamma series did not converge")


def _gamma_cf(s, x):
    """Continued fraction ``h`` with ``Gamma(s, x) = x^s e^-x h`` (modified Lentz)."""
    out = np.empty_like(x)
    idx = np.arange(s.size)
    s = s.copy()
    b = x + 1.0 - s
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    for i in range(1, _MAX_ITER):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        d[np.abs(d) < _TINY] = _TINY
        c = b + an / c
        c[np.abs(c) < _TINY] = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        done = np.abs(delta - 1.0) < _EPS
        if done.any():
            out[idx[done]] = h[done]
            keep = ~done
            idx, s, b, c, d, h = idx[keep], s[keep], b[keep], c[keep], d[keep], h[keep]
            if idx.size == 0:
                return out
    raise ArithmeticError("incomplete gamma continued fraction did not converge")


def _log_lower_gamma(s, x):
    """``log gamma(s, x)`` and ``log`` of the scaled form ``s x^-s gamma(s, x)``."""
    s, x = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(x, dtype=float))
    s = s.ravel().copy()
    x = x.ravel().copy()
    logg = np.empty_like(x)
    logscaled = np.empty_like(x)
    zero = x == 0
    logg[zero] = -np.inf
    logscaled[zero] = 0.0
    ser = (~zero) & (x < s + 1.0)
    if np.any(ser):
        ss, xs = s[ser], x[ser]
        lsum = np.log(_gamma_series(ss, xs))
        logg[ser] = ss * np.log(xs) - xs + lsum
        logscaled[ser] = np.log(ss) - xs + lsum
    cf = (~zero) & ~ser
    if np.any(cf):
        ss, xs = s[cf], x[cf]
        log_upper = ss * np.log(xs) - xs + np.log(_gamma_cf(ss, xs))
        # gamma = Gamma(s) - Gamma(s, x), formed in log space
        lg = log_gamma(ss)
        logg[cf] = lg + np.log1p(-np.exp(log_upper - lg))
        logscaled[cf] = np.log(ss) - ss * np.log(xs) + logg[cf]
    return logg, logscaled


def lower_incomplete_gamma(s, x):
    """Lower incomplete gamma ``gamma(s, x) = int_0^x t^(s-1) e^-t dt``.

    Parameters
    ----------
    s : float or ndarray
        Positive order.
    x : float or ndarray
        Nonnegative upper limit; may be ``inf`` (gives ``Gamma(s)``).

    Returns
    -------
    float or ndarray
    """
    s_arr = np.asarray(s, dtype=float)
    x_arr = np.asarray(x, dtype=float)
    if np.any(~(s_arr > 0)):
        raise DomainError("lower_incomplete_gamma requires s > 0")
    if np.any(~(x_arr >= 0)):
        raise DomainError("lower_incomplete_gamma requires x >= 0")
    shape = np.broadcast_shapes(s_arr.shape, x_arr.shape)
    s_b, x_b = np.broadcast_arrays(s_arr, x_arr)
    inf = np.isinf(x_b)
    out = np.empty(shape)
    if np.any(inf):
        out[inf] = np.exp(log_gamma(s_b[inf]))
    if np.any(~inf):
        logg, _ = _log_lower_gamma(s_b[~inf], x_b[~inf])
        out[~inf] = np.exp(logg)
    return _out(out)


def scaled_lower_gamma(s, x):
    """``s x^-s gamma(s, x)``; equals 1 at ``x = 0`` and decreases in ``x``."""
    s_arr, x_arr = np.broadcast_arrays(np.asarray(s, dtype=float), np.asarray(x, dtype=float))
    _, logscaled = _log_lower_gamma(s_arr, x_arr)
    return _out(np.exp(logscaled).reshape(s_arr.shape))


def _e1_series(x):
    """``E1`` for ``0 < x <= 1``."""
    term = np.ones_like(x)
    total = np.zeros_like(x)
    active = np.arange(x.size)
    for n in range(1, _MAX_ITER):
        term[active] *= -x[active] / n
        inc = term[active] / n
        total[active] += inc
        active = active[np.abs(inc) >= np.abs(total[active]) * _EPS]
        if active.size == 0:
            return -EULER_GAMMA - np.log(x) - total
    raise ArithmeticError("E1 series did not converge")


def _e1_cf(x):
    """``exp(x) E1(x)`` for ``x > 1``."""
    b = x + 1.0
    c = np.full_like(x, 1.0 / _TINY)
    d = 1.0 / b
    h = d.copy()
    active = np.arange(x.size)
    for i in range(1, _MAX_ITER):
        an = -float(i * i)
        ba = b[active] + 2.0
        da = 1.0 / (an * d[active] + ba)
        ca = ba + an / c[active]
        delta = ca * da
        b[active], c[active], d[active] = ba, ca, da
        h[active] *= delta
        active = active[np.abs(delta - 1.0) >= _EPS]
        if active.size == 0:
            return h
    raise ArithmeticError("E1 continued fraction did not converge")


def exp_integral_e1_scaled(x):
    """``exp(x) E1(x)`` for ``x > 0``; finite for large ``x`` where ``E1`` underflows."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(~(x_arr > 0)):
        raise DomainError("exp_integral_e1 requires x > 0")
    flat = x_arr.ravel()
    out = np.empty_like(flat)
    small = flat <= 1.0
    if np.any(small):
        out[small] = np.exp(flat[small]) * _e1_series(flat[small].copy())
    big = ~small
    if np.any(big):
        mid = big & (flat <= 1e8)
        out[mid] = _e1_cf(flat[mid].copy())
        huge = big & ~mid
        # asymptotic series; truncation error below 6 / x**4
        xh = flat[huge]
        with np.errstate(over="ignore", divide="ignore"):
            out[huge] = (1.0 - (1.0 - 2.0 / xh) / xh) / xh
    return _out(out.reshape(x_arr.shape))


def exp_integral_e1(x):
    """Exponential integral ``E1(x) = int_x^inf e^-s / s ds`` for ``x > 0``."""
    x_arr = np.asarray(x, dtype=float)
    if np.any(~(x_arr > 0)):
        raise DomainError("exp_integral_e1 requires x > 0")
    flat = x_arr.ravel()
    out = np.empty_like(flat)
    small = flat <= 1.0
    if np.any(small):
        out[small] = _e1_series(flat[small].copy())
    big = ~small
    if np.any(big):
        with np.errstate(under="ignore"):
            out[big] = np.exp(-flat[big]) * exp_integral_e1_scaled(flat[big])
    return _out(out.reshape(x_arr.shape))
