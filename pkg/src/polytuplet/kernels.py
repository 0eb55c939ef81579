"""Sparse linear-layer kernels: numba JIT with a pure-numpy fallback.

Training time is dominated by the hashed-feature layer: multiplying a CSR
batch of token counts into a dense (vocab, hidden) weight matrix on the
forward pass, and scattering per-row gradients back into the weight
gradient on the backward pass. Both operations carry ``@njit`` kernels.

Backend selection is per-call via the ``POLYTUPLET_BACKEND`` environment
variable: ``numba`` (default when importable) or ``numpy``. Both
implementations accumulate in the same order, so results agree to the
last bit in practice; correctness tests compare them against a dense
matmul oracle. ``benchmarks/bench_kernels.py`` times the two paths.
"""

from __future__ import annotations

import os

import numpy as np

ENV_BACKEND = "POLYTUPLET_BACKEND"


def _numpy_csr_matmul(indptr, indices, values, weights, out):
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    np.add.at(out, rows, values[:, None] * weights[indices])
    return out


def _numpy_csr_weight_grad(indptr, indices, values, row_grads, out):
    rows = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    np.add.at(out, indices, values[:, None] * row_grads[rows])
    return out


try:
    from numba import njit

    HAVE_NUMBA = True

    @njit(cache=True)
    def _numba_csr_matmul(indptr, indices, values, weights, out):  # pragma: no cover - timed via tests of csr_matmul
        n_cols = weights.shape[1]
        for r in range(len(indptr) - 1):
            for k in range(indptr[r], indptr[r + 1]):
                v = values[k]
                w = weights[indices[k]]
                for j in range(n_cols):
                    out[r, j] += v * w[j]
        return out

    @njit(cache=True)
    def _numba_csr_weight_grad(indptr, indices, values, row_grads, out):  # pragma: no cover
        n_cols = row_grads.shape[1]
        for r in range(len(indptr) - 1):
            g = row_grads[r]
            for k in range(indptr[r], indptr[r + 1]):
                v = values[k]
                row = indices[k]
                for j in range(n_cols):
                    out[row, j] += v * g[j]
        return out

except ImportError:  # pragma: no cover - exercised only on numba-free installs
    HAVE_NUMBA = False
    _numba_csr_matmul = None
    _numba_csr_weight_grad = None


def active_backend() -> str:
    """Resolve the backend name currently in effect ("numba" or "numpy")."""
    requested = os.environ.get(ENV_BACKEND, "").strip().lower()
    if requested == "numpy":
        return "numpy"
    if requested == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("POLYTUPLET_BACKEND=numba but numba is not importable")
        return "numba"
    if requested:
        raise ValueError(f"unknown {ENV_BACKEND} value: {requested!r} (expected 'numba' or 'numpy')")
    return "numba" if HAVE_NUMBA else "numpy"


def csr_matmul(indptr: np.ndarray, indices: np.ndarray, values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Rows-of-CSR times dense weights: out[r] = sum_k values[k] * weights[indices[k]]."""
    out = np.zeros((len(indptr) - 1, weights.shape[1]), dtype=np.float64)
    if active_backend() == "numba":
        return _numba_csr_matmul(indptr, indices, values, weights, out)
    return _numpy_csr_matmul(indptr, indices, values, weights, out)


def csr_weight_grad(
    indptr: np.ndarray,
    indices: np.ndarray,
    values: np.ndarray,
    row_grads: np.ndarray,
    n_features: int,
) -> np.ndarray:
    """Scatter-add row gradients into a (n_features, hidden) weight gradient."""
    out = np.zeros((n_features, row_grads.shape[1]), dtype=np.float64)
    if active_backend() == "numba":
        return _numba_csr_weight_grad(indptr, indices, values, row_grads, out)
    return _numpy_csr_weight_grad(indptr, indices, values, row_grads, out)
