"""Hot numeric kernels: batched reshape maps and flop-counted scalar arithmetic.

Two interchangeable backends produce bit-identical results:

* ``numba`` -- the loop kernels below compiled with ``@njit`` (default whenever
  numba imports cleanly),
* ``numpy`` -- vectorized reshapes for the index maps plus the same loop
  kernels run interpreted.

Set ``KRONBLOCK_NO_NUMBA=1`` in the environment to force the numpy backend.
``build_backend`` lets callers (tests, ``benchmarks/bench_kernels.py``)
instantiate both side by side regardless of the environment.

The counted kernels implement the flop convention used throughout the cost
model: one flop per scalar multiply, add or subtract (a multiply-accumulate is
two), comparisons are free. Counts are returned alongside the result so that
concurrent counted runs never share an accumulator.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

ENV_DISABLE = "KRONBLOCK_NO_NUMBA"

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _njit = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# index maps, loop form (njit-able)
# ---------------------------------------------------------------------------
# Conventions (normative for the package):
#   fold_input : (N, n1*n2) -> (n2, N*n1),  out[j2, s*n1+j1] = x[s, j1*n2+j2]
#   fold_mid   : (m2, N*n1) -> (N*m2, n1),  out[s*m2+i2, j1] = v[i2, s*n1+j1]
#   fold_output: (N*m2, m1) -> (N, m1*m2),  out[s, i1*m2+i2] = v[s*m2+i2, i1]


def _fold_input_loop(x, n1, n2):
    nbatch = x.shape[0]
    out = np.empty((n2, nbatch * n1), x.dtype)
    for s in range(nbatch):
        for j1 in range(n1):
            for j2 in range(n2):
                out[j2, s * n1 + j1] = x[s, j1 * n2 + j2]
    return out


def _unfold_input_loop(xf, n1):
    n2 = xf.shape[0]
    nbatch = xf.shape[1] // n1
    out = np.empty((nbatch, n1 * n2), xf.dtype)
    for s in range(nbatch):
        for j1 in range(n1):
            for j2 in range(n2):
                out[s, j1 * n2 + j2] = xf[j2, s * n1 + j1]
    return out


def _fold_mid_loop(v, n1):
    m2 = v.shape[0]
    nbatch = v.shape[1] // n1
    out = np.empty((nbatch * m2, n1), v.dtype)
    for s in range(nbatch):
        for i2 in range(m2):
            for j1 in range(n1):
                out[s * m2 + i2, j1] = v[i2, s * n1 + j1]
    return out


def _unfold_mid_loop(v, m2):
    nbatch = v.shape[0] // m2
    n1 = v.shape[1]
    out = np.empty((m2, nbatch * n1), v.dtype)
    for s in range(nbatch):
        for i2 in range(m2):
            for j1 in range(n1):
                out[i2, s * n1 + j1] = v[s * m2 + i2, j1]
    return out


def _fold_output_loop(v, m2):
    nbatch = v.shape[0] // m2
    m1 = v.shape[1]
    out = np.empty((nbatch, m1 * m2), v.dtype)
    for s in range(nbatch):
        for i1 in range(m1):
            for i2 in range(m2):
                out[s, i1 * m2 + i2] = v[s * m2 + i2, i1]
    return out


def _unfold_output_loop(o, m2):
    nbatch = o.shape[0]
    m1 = o.shape[1] // m2
    out = np.empty((nbatch * m2, m1), o.dtype)
    for s in range(nbatch):
        for i1 in range(m1):
            for i2 in range(m2):
                out[s * m2 + i2, i1] = o[s, i1 * m2 + i2]
    return out


# ---------------------------------------------------------------------------
# index maps, vectorized form (numpy backend)
# ---------------------------------------------------------------------------


def _fold_input_np(x, n1, n2):
    nbatch = x.shape[0]
    return np.ascontiguousarray(
        x.reshape(nbatch, n1, n2).transpose(2, 0, 1).reshape(n2, nbatch * n1)
    )


def _unfold_input_np(xf, n1):
    n2 = xf.shape[0]
    nbatch = xf.shape[1] // n1
    return np.ascontiguousarray(
        xf.reshape(n2, nbatch, n1).transpose(1, 2, 0).reshape(nbatch, n1 * n2)
    )


def _fold_mid_np(v, n1):
    m2 = v.shape[0]
    nbatch = v.shape[1] // n1
    return np.ascontiguousarray(
        v.reshape(m2, nbatch, n1).transpose(1, 0, 2).reshape(nbatch * m2, n1)
    )


def _unfold_mid_np(v, m2):
    nbatch = v.shape[0] // m2
    n1 = v.shape[1]
    return np.ascontiguousarray(
        v.reshape(nbatch, m2, n1).transpose(1, 0, 2).reshape(m2, nbatch * n1)
    )


def _fold_output_np(v, m2):
    nbatch = v.shape[0] // m2
    m1 = v.shape[1]
    return np.ascontiguousarray(
        v.reshape(nbatch, m2, m1).transpose(0, 2, 1).reshape(nbatch, m1 * m2)
    )


def _unfold_output_np(o, m2):
    nbatch = o.shape[0]
    m1 = o.shape[1] // m2
    return np.ascontiguousarray(
        o.reshape(nbatch, m1, m2).transpose(0, 2, 1).reshape(nbatch * m2, m1)
    )


# ---------------------------------------------------------------------------
# counted scalar kernels (njit-able); each returns (result, flops)
# ---------------------------------------------------------------------------


def _counted_matmul_loop(a, b):
    # (p, q) @ (q, s): per output element q multiplies + (q - 1) adds.
    p, q = a.shape
    s = b.shape[1]
    out = np.empty((p, s), a.dtype)
    flops = 0
    for i in range(p):
        for j in range(s):
            acc = a[i, 0] * b[0, j]
            flops += 1
            for k in range(1, q):
                acc += a[i, k] * b[k, j]
                flops += 2
            out[i, j] = acc
    return out, flops


def _counted_hadamard_loop(a, b):
    out = np.empty_like(a)
    flops = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i, j] = a[i, j] * b[i, j]
            flops += 1
    return out, flops


def _counted_add_loop(a, b):
    out = np.empty_like(a)
    flops = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i, j] = a[i, j] + b[i, j]
            flops += 1
    return out, flops


def _counted_sub_loop(a, b):
    out = np.empty_like(a)
    flops = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i, j] = a[i, j] - b[i, j]
            flops += 1
    return out, flops


def _counted_scale_loop(a, c):
    out = np.empty_like(a)
    flops = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            out[i, j] = c * a[i, j]
            flops += 1
    return out, flops


def _counted_sq_sum_loop(a):
    # sum of squares: one multiply per element, size-1 adds.
    total = a[0, 0] * a[0, 0]
    flops = 1
    first = True
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if first:
                first = False
                continue
            total += a[i, j] * a[i, j]
            flops += 2
    return total, flops


def _counted_relu_loop(a):
    # max(x, 0): one flop per scalar, per the cost model's activation rule.
    out = np.empty_like(a)
    flops = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            v = a[i, j]
            out[i, j] = v if v > 0.0 else 0.0
            flops += 1
    return out, flops


def _counted_mask_mul_loop(g, pre):
    # g * relu'(pre): the elementwise product is counted, the 0/1 mask is free.
    out = np.empty_like(g)
    flops = 0
    for i in range(g.shape[0]):
        for j in range(g.shape[1]):
            out[i, j] = g[i, j] if pre[i, j] > 0.0 else 0.0
            flops += 1
    return out, flops


_FOLD_LOOPS = {
    "fold_input": _fold_input_loop,
    "unfold_input": _unfold_input_loop,
    "fold_mid": _fold_mid_loop,
    "unfold_mid": _unfold_mid_loop,
    "fold_output": _fold_output_loop,
    "unfold_output": _unfold_output_loop,
}

_FOLD_VECTORIZED = {
    "fold_input": _fold_input_np,
    "unfold_input": _unfold_input_np,
    "fold_mid": _fold_mid_np,
    "unfold_mid": _unfold_mid_np,
    "fold_output": _fold_output_np,
    "unfold_output": _unfold_output_np,
}

_COUNTED_LOOPS = {
    "counted_matmul": _counted_matmul_loop,
    "counted_hadamard": _counted_hadamard_loop,
    "counted_add": _counted_add_loop,
    "counted_sub": _counted_sub_loop,
    "counted_scale": _counted_scale_loop,
    "counted_sq_sum": _counted_sq_sum_loop,
    "counted_relu": _counted_relu_loop,
    "counted_mask_mul": _counted_mask_mul_loop,
}


@dataclass(frozen=True)
class KernelBackend:
    name: str
    fold_input: Callable
    unfold_input: Callable
    fold_mid: Callable
    unfold_mid: Callable
    fold_output: Callable
    unfold_output: Callable
    counted_matmul: Callable
    counted_hadamard: Callable
    counted_add: Callable
    counted_sub: Callable
    counted_scale: Callable
    counted_sq_sum: Callable
    counted_relu: Callable
    counted_mask_mul: Callable


_jit_cache: dict[int, KernelBackend] = {}


def build_backend(use_numba: bool) -> KernelBackend:
    """Build a kernel backend; jitted functions are compiled lazily on first call."""
    if use_numba and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    key = 1 if use_numba else 0
    if key in _jit_cache:
        return _jit_cache[key]
    if use_numba:
        wrap = _njit(cache=True)
        fns = {name: wrap(fn) for name, fn in _FOLD_LOOPS.items()}
        fns.update({name: wrap(fn) for name, fn in _COUNTED_LOOPS.items()})
        backend = KernelBackend(name="numba", **fns)
    else:
        fns = dict(_FOLD_VECTORIZED)
        fns.update(_COUNTED_LOOPS)
        backend = KernelBackend(name="numpy", **fns)
    _jit_cache[key] = backend
    return backend


def _env_disabled() -> bool:
    return os.environ.get(ENV_DISABLE, "").strip().lower() in ("1", "true", "yes")


USE_NUMBA = HAVE_NUMBA and not _env_disabled()
_active = build_backend(USE_NUMBA)


def active() -> KernelBackend:
    """The backend selected at import time (numba unless disabled/unavailable)."""
    return _active
