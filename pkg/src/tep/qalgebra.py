"""Deformed exponential / logarithm and the q-product algebra.

All functions accept scalars or numpy arrays and broadcast.  The deformation
index ``t`` (also written ``q``) must be strictly positive; ``t == 1`` selects
the ordinary exp/log.

Note on the q-division: the bracket used here is ``x**(1-q) - y**(1-q) + 1``.
This is the form under which ``q_division`` inverts ``q_product`` and
``exp_q(a) / exp_q(b) = exp_q(a - b)`` holds.  A ``- 1`` in place of ``+ 1``
breaks both identities.
"""

from __future__ import annotations

import numpy as np

# |t - 1| below this dispatches to the classical exp/log
T_ONE_TOL = 1e-12

DeformIndex = float


class DomainError(ValueError):
    """Raised when a deformed exponential has no real value."""


def _check_t(t: float) -> float:
    t = float(t)
    if not t > 0:
        raise ValueError(f"deformation index must be positive, got {t}")
    return t


def is_classical(t: float) -> bool:
    return abs(t - 1.0) < T_ONE_TOL


def _out(value, scalar: bool):
    return float(value) if scalar else value


def exp_t(x, t: DeformIndex):
    """Deformed exponential ``[1 + (1-t) x]^(1/(1-t))``.

    For ``t < 1`` a non-positive bracket gives 0.  For ``t > 1`` the bracket
    must be positive; otherwise :class:`DomainError` is raised.
    """
    t = _check_t(t)
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    if is_classical(t):
        return _out(np.exp(x), scalar)
    u = (1.0 - t) * x
    ok = u > -1.0
    if t > 1.0 and not np.all(ok):
        raise DomainError("exp_t: 1 + (1-t)x <= 0 with t > 1")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = np.where(ok, np.exp(np.log1p(np.where(ok, u, 0.0)) / (1.0 - t)), 0.0)
    return _out(val, scalar)


def ln_t(x, t: DeformIndex):
    """Deformed logarithm ``(x^(1-t) - 1) / (1-t)``; the inverse of :func:`exp_t`."""
    t = _check_t(t)
    scalar = np.ndim(x) == 0
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("ln_t: negative argument")
    with np.errstate(divide="ignore", over="ignore"):
        if is_classical(t):
            return _out(np.log(x), scalar)
        val = np.expm1((1.0 - t) * np.log(x)) / (1.0 - t)
    return _out(val, scalar)


def pseudo_add(x, y, t: DeformIndex):
    """``x + y + (1-t) x y``, so that ``exp_t(x) exp_t(y) = exp_t(pseudo_add(x, y))``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    val = x + y + (1.0 - _check_t(t)) * x * y
    return _out(val, val.ndim == 0)


def _from_bracket(s, q: float):
    # s = ln_q of the result; returns (value, truncated mask)
    u = (1.0 - q) * np.asarray(s, dtype=float)
    trunc = ~(u > -1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        val = np.exp(np.log1p(np.where(trunc, 0.0, u)) / (1.0 - q))
    return np.where(trunc, 0.0, val), trunc


def q_product(x, y, q: DeformIndex, *, flag: bool = False):
    """q-product ``[x^(1-q) + y^(1-q) - 1]^(1/(1-q))``, 0 when the bracket is not positive.

    With ``flag=True`` returns ``(value, truncated)`` where ``truncated`` marks
    entries that were set to 0 by the truncation rule.
    """
    q = _check_t(q)
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if np.any(x < 0) or np.any(y < 0):
        raise DomainError("q_product: negative argument")
    pos = (x > 0) & (y > 0)
    if is_classical(q):
        val, trunc = x * y, ~pos
    else:
        with np.errstate(divide="ignore"):
            s = ln_t(np.where(pos, x, 1.0), q) + ln_t(np.where(pos, y, 1.0), q)
        val, trunc = _from_bracket(s, q)
        trunc = trunc | ~pos
        val = np.where(pos, val, 0.0)
    if flag:
        return _out(val, scalar), (bool(trunc) if scalar else trunc)
    return _out(val, scalar)


def q_division(x, y, q: DeformIndex, *, flag: bool = False):
    """q-division ``[x^(1-q) - y^(1-q) + 1]^(1/(1-q))``, 0 when the bracket is not positive."""
    q = _check_t(q)
    scalar = np.ndim(x) == 0 and np.ndim(y) == 0
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    if np.any(x < 0) or np.any(y <= 0):
        raise DomainError("q_division: requires x >= 0 and y > 0")
    pos = x > 0
    if is_classical(q):
        val, trunc = x / y, ~pos
    else:
        s = ln_t(np.where(pos, x, 1.0), q) - ln_t(y, q)
        val, trunc = _from_bracket(s, q)
        trunc = trunc | ~pos
        val = np.where(pos, val, 0.0)
    if flag:
        return _out(val, scalar), (bool(trunc) if scalar else trunc)
    return _out(val, scalar)
