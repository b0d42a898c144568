"""Linear recurrence ``s[k] = a[k] * s[k-1] + x[k]`` along a time axis.

The parallel form is a Hillis-Steele prefix scan over the associative
operator ``(a1, x1) . (a2, x2) = (a1 a2, a2 x1 + x2)``: ``ceil(log2 L)``
vectorized passes instead of ``L`` sequential ones.
"""

import numpy as np


def _time_last_but_one(x):
    if x.ndim < 2:
        raise ValueError("x needs a time axis and a state axis")


def scan_sequential(a, x, reverse=False):
    """Reference loop. ``x`` is ``(..., L, n)``; ``a`` is ``(n,)`` or ``(..., L, n)``.

    With ``reverse=True`` the recurrence runs backwards: ``s[k] = a[k] s[k+1] + x[k]``.
    """
    _time_last_but_one(x)
    a = np.asarray(a)
    varying = a.ndim >= 2
    L = x.shape[-2]
    out = np.empty(x.shape, dtype=np.result_type(a, x))
    order = range(L - 1, -1, -1) if reverse else range(L)
    s = None
    for k in order:
        s = x[..., k, :] if s is None else (a[..., k, :] if varying else a) * s + x[..., k, :]
        out[..., k, :] = s
    return out


def scan_parallel(a, x, reverse=False):
    """Associative-scan evaluation of the same recurrence as :func:`scan_sequential`."""
    _time_last_but_one(x)
    a = np.asarray(a)
    s = np.array(x, dtype=np.result_type(a, x))
    if reverse:
        s = s[..., ::-1, :]
    L = s.shape[-2]
    if a.ndim >= 2:
        A = np.broadcast_to(a, s.shape).astype(s.dtype)
        A = (A[..., ::-1, :] if reverse else A).copy()
        d = 1
        while d < L:
            s[..., d:, :] = A[..., d:, :] * s[..., :-d, :] + s[..., d:, :]
            A[..., d:, :] = A[..., d:, :] * A[..., :-d, :]
            d *= 2
    else:
        pw = a.astype(s.dtype)
        d = 1
        while d < L:
            s[..., d:, :] = s[..., d:, :] + pw * s[..., :-d, :]
            pw = pw * pw
            d *= 2
    if reverse:
        s = s[..., ::-1, :]
    return np.ascontiguousarray(s)


def linear_scan(a, x, mode="scan", reverse=False):
    if mode == "scan":
        return scan_parallel(a, x, reverse)
    if mode == "sequential":
        return scan_sequential(a, x, reverse)
    raise ValueError(f"unknown scan mode {mode!r}")
