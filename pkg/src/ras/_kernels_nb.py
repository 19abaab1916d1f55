"""JIT-compiled numeric loops shared by the public kernels and the model engine.

Every reduction here runs strictly left-to-right over the contraction index for
each output element, and parallelism is only ever over output rows (or flat
groups of rows). Together these make every kernel bit-reproducible across runs
and across thread counts, and bit-identical to a scalar triple-loop reference.
fastmath stays off everywhere: it would license reassociation and FMA
contraction, both of which change low-order bits.
"""

from __future__ import annotations

import math
import os

import numba
import numpy as np
from numba import njit, prange

# omp scheduling never splits a row, so determinism survives any thread count;
# picking the layer explicitly also avoids numba's noisy TBB-version probe.
numba.config.THREADING_LAYER = "omp"

_env_threads = os.environ.get("RAS_NUM_THREADS")
if _env_threads:
    numba.set_num_threads(max(1, int(_env_threads)))


@njit(cache=True, parallel=True)
def gemm_acc(a, b, out):
    # out[i, j] += sum_k a[i, k] * b[k, j], k ascending per element.
    m, kk = a.shape
    n = b.shape[1]
    for i in prange(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] += aik * b[k, j]


@njit(cache=True, parallel=True)
def bmm_nn(a, b, out):
    # out[g, i, j] = sum_k a[g, i, k] * b[g, k, j]
    g, m, kk = a.shape
    n = b.shape[2]
    for gi in prange(g * m):
        gg = gi // m
        i = gi % m
        for k in range(kk):
            aik = a[gg, i, k]
            for j in range(n):
                out[gg, i, j] += aik * b[gg, k, j]


@njit(cache=True, parallel=True)
def gather_gemm(x_full, idx, w, out):
    # out[r, j] = sum_k x_full[idx[r], k] * w[k, j]; rows are read through the
    # index list at load time, no gathered copy of x_full is ever formed.
    kk = x_full.shape[1]
    n = w.shape[1]
    for r in prange(idx.shape[0]):
        src = idx[r]
        for k in range(kk):
            aik = x_full[src, k]
            for j in range(n):
                out[r, j] += aik * w[k, j]


@njit(cache=True, parallel=True)
def gemm_scatter(x_active, w, idx, dest):
    # dest[idx[r], :] = x_active[r, :] @ w; all other rows of dest untouched.
    kk = x_active.shape[1]
    n = w.shape[1]
    zero = np.zeros(1, dest.dtype)[0]
    for r in prange(idx.shape[0]):
        drow = idx[r]
        for j in range(n):
            dest[drow, j] = zero
        for k in range(kk):
            aik = x_active[r, k]
            for j in range(n):
                dest[drow, j] += aik * w[k, j]


@njit(cache=True, parallel=True)
def softmax_rows(a, out):
    m, n = a.shape
    zero = np.zeros(1, a.dtype)[0]
    for i in prange(m):
        rmax = a[i, 0]
        for j in range(1, n):
            if a[i, j] > rmax:
                rmax = a[i, j]
        total = zero
        for j in range(n):
            out[i, j] = math.exp(a[i, j] - rmax)
            total += out[i, j]
        for j in range(n):
            out[i, j] = out[i, j] / total


@njit(cache=True, parallel=True)
def rmsnorm_rows(x, eps, out, inv_rms):
    m, n = x.shape
    zero = np.zeros(1, x.dtype)[0]
    for i in prange(m):
        acc = zero
        for j in range(n):
            acc += x[i, j] * x[i, j]
        inv_rms[i] = 1.0 / math.sqrt(acc / n + eps)
        for j in range(n):
            out[i, j] = x[i, j] * inv_rms[i]
