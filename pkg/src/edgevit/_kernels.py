"""Hot numeric kernels.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version. The active backend is chosen once at import time:

* ``NUWA_NUMBA=0`` forces the numpy path,
* otherwise numba is used when it imports cleanly.

Both implementations are always importable as ``numba_impl`` / ``numpy_impl``
so tests and ``benchmarks/bench_kernels.py`` can compare them directly.
All kernels take and return float64 arrays.
"""

from __future__ import annotations

import math
import os
import types

import numpy as np
from scipy import special

SQRT_HALF = 1.0 / math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _round_robin(n: int) -> np.ndarray:
    """Brent-Luk tournament schedule: (n_rounds, n_pairs, 2) disjoint pairs."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for k in range(m // 2):
            i, j = players[k], players[m - 1 - k]
            if i < n and j < n:
                pairs.append((min(i, j), max(i, j)))
        rounds.append(pairs)
        players = [players[0], players[-1]] + players[1:-1]
    width = max((len(r) for r in rounds), default=0)
    out = np.full((len(rounds), width, 2), -1, dtype=np.int64)
    for r, pairs in enumerate(rounds):
        for k, (i, j) in enumerate(pairs):
            out[r, k] = (i, j)
    return out


# ---------------------------------------------------------------- numpy path


def _np_gelu(x):
    return 0.5 * x * (1.0 + special.erf(x * SQRT_HALF))


def _np_gelu_grad(x):
    cdf = 0.5 * (1.0 + special.erf(x * SQRT_HALF))
    return cdf + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _np_softmax_rows(a):
    z = a - a.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _np_layernorm_rows(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _np_jacobi_sweeps(work, v, schedule, tol, floor, max_sweeps):
    """One-sided Jacobi on the columns of ``work`` (m x n, m >= n), in place.

    Returns (sweeps used, final max off-diagonal ratio).
    """
    off = 0.0
    for sweep in range(1, max_sweeps + 1):
        off = 0.0
        for pairs in schedule:
            pairs = pairs[pairs[:, 0] >= 0]
            if pairs.size == 0:
                continue
            i, j = pairs[:, 0], pairs[:, 1]
            ci, cj = work[:, i], work[:, j]
            alpha = (ci * ci).sum(axis=0)
            beta = (cj * cj).sum(axis=0)
            gamma = (ci * cj).sum(axis=0)
            denom = np.sqrt(alpha * beta)
            live = (alpha > floor) & (beta > floor)
            ratio = np.where(live, np.abs(gamma) / np.where(live, denom, 1.0), 0.0)
            off = max(off, float(ratio.max()))
            act = ratio > tol
            if not act.any():
                continue
            i, j = i[act], j[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wi, wj = work[:, i].copy(), work[:, j]
            work[:, i] = c * wi - s * wj
            work[:, j] = s * wi + c * wj
            vi, vj = v[:, i].copy(), v[:, j]
            v[:, i] = c * vi - s * vj
            v[:, j] = s * vi + c * vj
        if off <= tol:
            return sweep, off
    return max_sweeps, off


numpy_impl = types.SimpleNamespace(
    name="numpy",
    gelu=_np_gelu,
    gelu_grad=_np_gelu_grad,
    softmax_rows=_np_softmax_rows,
    layernorm_rows=_np_layernorm_rows,
    jacobi_sweeps=_np_jacobi_sweeps,
)


# ---------------------------------------------------------------- numba path


def _build_numba():
    from numba import njit

    @njit(cache=True)
    def gelu(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for k in range(flat.size):
            v = flat[k]
            out[k] = 0.5 * v * (1.0 + math.erf(v * SQRT_HALF))
        return out.reshape(x.shape)

    @njit(cache=True)
    def gelu_grad(x):
        flat = x.ravel()
        out = np.empty_like(flat)
        for k in range(flat.size):
            v = flat[k]
            out[k] = 0.5 * (1.0 + math.erf(v * SQRT_HALF)) + v * INV_SQRT_2PI * math.exp(-0.5 * v * v)
        return out.reshape(x.shape)

    @njit(cache=True)
    def softmax_rows(a):
        m, n = a.shape
        out = np.empty_like(a)
        for r in range(m):
            mx = a[r, 0]
            for c in range(1, n):
                if a[r, c] > mx:
                    mx = a[r, c]
            # separate exp and sum loops so LLVM can vectorise the exp
            for c in range(n):
                out[r, c] = math.exp(a[r, c] - mx)
            total = 0.0
            for c in range(n):
                total += out[r, c]
            inv = 1.0 / total
            for c in range(n):
                out[r, c] *= inv
        return out

    @njit(cache=True)
    def layernorm_rows(x, gamma, beta, eps):
        m, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(m)
        for r in range(m):
            mean = 0.0
            for c in range(d):
                mean += x[r, c]
            mean /= d
            var = 0.0
            for c in range(d):
                diff = x[r, c] - mean
                var += diff * diff
            var /= d
            rs = 1.0 / math.sqrt(var + eps)
            rstd[r] = rs
            for c in range(d):
                h = (x[r, c] - mean) * rs
                xhat[r, c] = h
                y[r, c] = h * gamma[c] + beta[c]
        return y, xhat, rstd

    @njit(cache=True)
    def jacobi_sweeps(work, v, schedule, tol, floor, max_sweeps):
        m = work.shape[0]
        n = v.shape[0]
        off = 0.0
        for sweep in range(1, max_sweeps + 1):
            off = 0.0
            for r in range(schedule.shape[0]):
                for k in range(schedule.shape[1]):
                    i = schedule[r, k, 0]
                    j = schedule[r, k, 1]
                    if i < 0:
                        continue
                    alpha = 0.0
                    beta = 0.0
                    gamma = 0.0
                    for t in range(m):
                        alpha += work[t, i] * work[t, i]
                        beta += work[t, j] * work[t, j]
                        gamma += work[t, i] * work[t, j]
                    if alpha <= floor or beta <= floor:
                        continue
                    denom = math.sqrt(alpha * beta)
                    ratio = abs(gamma) / denom
                    if ratio > off:
                        off = ratio
                    if ratio <= tol:
                        continue
                    zeta = (beta - alpha) / (2.0 * gamma)
                    sgn = 1.0 if zeta >= 0 else -1.0
                    t_ = sgn / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                    c = 1.0 / math.sqrt(1.0 + t_ * t_)
                    s = c * t_
                    for t in range(m):
                        wi = work[t, i]
                        wj = work[t, j]
                        work[t, i] = c * wi - s * wj
                        work[t, j] = s * wi + c * wj
                    for t in range(n):
                        vi = v[t, i]
                        vj = v[t, j]
                        v[t, i] = c * vi - s * vj
                        v[t, j] = s * vi + c * vj
            if off <= tol:
                return sweep, off
        return max_sweeps, off

    return types.SimpleNamespace(
        name="numba",
        gelu=gelu,
        gelu_grad=gelu_grad,
        # numpy's SIMD exp beats the scalar loop, so the backend routes softmax
        # there; the jitted version stays for benchmarks and agreement tests
        softmax_rows=_np_softmax_rows,
        softmax_rows_jit=softmax_rows,
        layernorm_rows=layernorm_rows,
        jacobi_sweeps=jacobi_sweeps,
    )


try:
    numba_impl = _build_numba()
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    numba_impl = None


def _select():
    flag = os.environ.get("NUWA_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or numba_impl is None:
        return numpy_impl
    return numba_impl


active = _select()


def use_backend(name: str) -> None:
    """Switch the process-wide backend ("numba" or "numpy")."""
    global active
    if name == "numpy":
        active = numpy_impl
    elif name == "numba":
        if numba_impl is None:
            raise RuntimeError("numba is not available")
        active = numba_impl
    else:
        raise ValueError(f"unknown backend {name!r}")


def backend_name() -> str:
    return active.name
