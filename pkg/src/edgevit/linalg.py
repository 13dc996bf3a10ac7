"""Dense kernels: matmul, row softmax, GELU, layer norm and SVD.

Inputs may be float32 or float64; every routine accumulates in float64 and
returns float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import DimensionError, NumericError

EPS64 = np.finfo(np.float64).eps


def _f64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """``a @ b`` for 2-D operands with float64 accumulation."""
    a, b = _f64(a), _f64(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a) -> np.ndarray:
    """Softmax over the last axis (row-max stabilised)."""
    a = _f64(a)
    if a.size == 0:
        return a.copy()
    flat = a.reshape(-1, a.shape[-1])
    return _kernels.active.softmax_rows(flat).reshape(a.shape)


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` via erf."""
    x = _f64(x)
    if x.size == 0:
        return x.copy()
    return _kernels.active.gelu(x)


def gelu_grad(x) -> np.ndarray:
    x = _f64(x)
    if x.size == 0:
        return x.copy()
    return _kernels.active.gelu_grad(x)


def layernorm(x, gamma, beta, eps=1e-6, return_cache=False):
    """Normalise over the last axis, then apply ``gamma * xhat + beta``.

    With ``return_cache`` also returns ``(xhat, rstd)`` shaped like the
    input's leading axes, which the backward pass needs.
    """
    x = _f64(x)
    d = x.shape[-1]
    if d < 1:
        raise DimensionError("layernorm needs at least one feature")
    flat = x.reshape(-1, d)
    y, xhat, rstd = _kernels.active.layernorm_rows(flat, _f64(gamma), _f64(beta), float(eps))
    y = y.reshape(x.shape)
    if return_cache:
        return y, xhat.reshape(x.shape), rstd.reshape(x.shape[:-1])
    return y


def layernorm_backward(dy, xhat, rstd, gamma):
    """Gradient w.r.t. the layer-norm input; ``dgamma``/``dbeta`` are left to the caller."""
    g = dy * gamma
    mean_g = g.mean(axis=-1, keepdims=True)
    mean_gx = (g * xhat).mean(axis=-1, keepdims=True)
    return (g - mean_g - xhat * mean_gx) * rstd[..., None]


@dataclass(frozen=True)
class SvdFactorization:
    u: np.ndarray  # m x r
    sigma: np.ndarray  # r, descending
    vt: np.ndarray  # r x n

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def reconstruct(self, r: int | None = None) -> np.ndarray:
        r = self.rank if r is None else r
        return (self.u[:, :r] * self.sigma[:r]) @ self.vt[:r]


@lru_cache(maxsize=64)
def _schedule(n: int) -> np.ndarray:
    return _kernels._round_robin(n)


def _complete_orthonormal(q: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``q`` not flagged ``good`` with an orthonormal completion."""
    m = q.shape[0]
    basis = [q[:, k] for k in range(q.shape[1]) if good[k]]
    out = q.copy()
    cand = 0
    for k in range(q.shape[1]):
        if good[k]:
            continue
        while cand < m:
            e = np.zeros(m)
            e[cand] = 1.0
            cand += 1
            for _ in range(2):
                for b in basis:
                    e -= (b @ e) * b
            nrm = np.linalg.norm(e)
            if nrm > 1e-8:
                e /= nrm
                basis.append(e)
                out[:, k] = e
                break
    return out


def svd(a, tol: float = 1e-13, max_sweeps: int = 80) -> SvdFactorization:
    """Thin SVD by one-sided Jacobi rotations.

    The result is deterministic; each column of ``u`` is sign-normalised so its
    first non-negligible entry is positive. Raises :class:`NumericError` if the
    sweeps do not converge within ``max_sweeps``.
    """
    a = _f64(a)
    if a.ndim != 2:
        raise DimensionError(f"svd expects a matrix, got shape {a.shape}")
    m, n = a.shape
    r = min(m, n)
    if r == 0:
        return SvdFactorization(np.zeros((m, 0)), np.zeros(0), np.zeros((0, n)))
    if not np.all(np.isfinite(a)):
        raise NumericError("svd input contains non-finite entries")

    transposed = m < n
    work = (a.T if transposed else a).copy()
    cols = work.shape[1]
    v = np.eye(cols)
    norm_f = float(np.sqrt((work * work).sum()))
    floor = (EPS64 * max(norm_f, 1e-300)) ** 2
    sweeps, off = _kernels.active.jacobi_sweeps(work, v, _schedule(cols), tol, floor, max_sweeps)
    if off > tol:
        raise NumericError(f"Jacobi SVD did not converge after {sweeps} sweeps", residual=off)

    sigma = np.sqrt((work * work).sum(axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]
    good = sigma > max(m, n) * EPS64 * max(sigma[0], 1e-300) * 10
    left = np.where(good, work / np.where(good, sigma, 1.0), 0.0)
    left = _complete_orthonormal(left, good)
    sigma = np.where(good, sigma, 0.0)

    if transposed:
        u, vt = v, left.T
    else:
        u, vt = left, v.T
    u = np.ascontiguousarray(u)
    vt = np.ascontiguousarray(vt)
    for k in range(r):
        col = u[:, k]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, k] = -col
            vt[k] = -vt[k]
    return SvdFactorization(u, sigma, vt)
