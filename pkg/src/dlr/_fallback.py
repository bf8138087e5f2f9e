"""Pure-numpy delay loop, used when the compiled kernel is unavailable.

Same recurrence, chip order and counter-based noise as ``_kernel.pyx``;
rows are vectorized and chips within a sample are updated as one slice,
since only the final chip reads a value written in the same sample.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x: np.ndarray) -> np.ndarray:
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def normal_chips(seeds: np.ndarray, chips: np.ndarray) -> np.ndarray:
    """Standard normals keyed by (seed, chip index); shape ``seeds x chips``."""
    with np.errstate(over="ignore"):
        key = seeds.astype(np.uint64)[:, None] * _GOLDEN + chips.astype(np.uint64)[None, :]
        r1 = _mix(key * np.uint64(2))
        r2 = _mix(key * np.uint64(2) + np.uint64(1))
    u1 = ((r1 >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u2 = (r2 >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2 * np.pi * u2)


def run_loop_batch(S, mask, eta, nu, h0, h1, nl, out, sigma, seeds, threads=1):
    """Signature-compatible with ``dlr._kernel.run_loop_batch``."""
    dt = S.dtype.type
    batch, length = S.shape
    n = mask.shape[0]
    if out.shape != (batch, n):
        raise ValueError("out has wrong shape")
    if seeds.shape[0] != batch:
        raise ValueError("need one noise seed per row")
    if batch == 0:
        return
    f = np.sin if nl == 0 else np.tanh
    eta, nu, h0, h1, sigma = (dt(v) for v in (eta, nu, h0, h1, sigma))
    old = np.zeros((batch, n), dtype=S.dtype)
    jbuf = np.zeros((batch, n + 1), dtype=S.dtype)
    chips = np.arange(n, dtype=np.uint64)
    for t in range(length):
        jbuf[:, 0] = jbuf[:, n]
        np.multiply(S[:, t, None], mask[None, :], out=jbuf[:, 1:])
        if h1 == 0:
            new = h0 * f(eta * old + nu * jbuf[:, 1:])
        else:
            new = np.empty_like(old)
            a0 = f(eta * old[:, :-1] + nu * jbuf[:, 1:n])
            a1 = f(eta * old[:, 1:] + nu * jbuf[:, : n - 1])
            new[:, :-1] = h0 * a0 + h1 * a1
        if sigma != 0:
            eps = normal_chips(seeds, chips + np.uint64(t * n)).astype(S.dtype)
            new[:, :-1] += sigma * eps[:, :-1]
        if h1 != 0:
            a0 = f(eta * old[:, -1] + nu * jbuf[:, n])
            a1 = f(eta * new[:, 0] + nu * jbuf[:, n - 1])
            new[:, -1] = h0 * a0 + h1 * a1
        if sigma != 0:
            new[:, -1] += sigma * eps[:, -1]
        old = new
    out[...] = old
