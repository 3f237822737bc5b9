"""Dense float64 math kernels shared by every other module.

Everything here is a pure function over numpy arrays: operations return new
arrays and never mutate their inputs.  All execution in this package is
sequential and single-threaded from numpy's point of view, so reductions are
run in a fixed order and results are reproducible bit-for-bit across runs on
the same platform.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "seeded_rng",
    "silu",
    "silu_grad",
    "softmax",
    "log_softmax",
    "topk",
    "topk_rows",
    "matmul",
    "outer_accumulate",
    "quad_form",
    "symmetrize",
]

_U64 = (1 << 64) - 1


def seeded_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed by (seed, stream).

    Distinct streams let one user-facing seed drive several independent
    consumers (init, training batches, corpus sampling, ...) without their
    draws interleaving.  Same key, same platform: identical draw sequence.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _U64, int(stream) & _U64]))


def _as_float_array(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or Inf")
    return arr


def silu(x) -> np.ndarray:
    """x * sigmoid(x), elementwise."""
    x = _as_float_array(x, "x")
    return x * expit(x)


def silu_grad(x) -> np.ndarray:
    """Derivative of silu: sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    x = _as_float_array(x, "x")
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def softmax(z, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along `axis`.

    Rows of -inf entries are allowed (masked categories get probability 0)
    as long as at least one entry per row is finite.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)) or np.any(np.isposinf(z)):
        raise ValueError("softmax input contains NaN or +Inf")
    m = np.max(z, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax row has no finite entry")
    e = np.exp(z - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> np.ndarray:
    """log(softmax(z)) computed without forming the ratio."""
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.isnan(z)) or np.any(np.isposinf(z)):
        raise ValueError("log_softmax input contains NaN or +Inf")
    m = np.max(z, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("log_softmax row has no finite entry")
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


def topk(z, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices and values of the k largest entries of a 1-D array.

    Ordering is by descending value; exact ties are broken toward the lower
    index (stable sort), which pins down routing and ranking decisions under
    duplicated scores.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"topk expects a 1-D array, got shape {z.shape}")
    if not 1 <= k <= z.shape[0]:
        raise ValueError(f"k={k} out of range for {z.shape[0]} entries")
    order = np.argsort(-z, kind="stable")[:k]
    return order, z[order]


def topk_rows(z, k: int) -> np.ndarray:
    """Row-wise topk indices for a 2-D array, same tie rule as `topk`."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"topk_rows expects a 2-D array, got shape {z.shape}")
    if not 1 <= k <= z.shape[1]:
        raise ValueError(f"k={k} out of range for {z.shape[1]} columns")
    return np.argsort(-z, axis=1, kind="stable")[:, :k]


def matmul(a, b) -> np.ndarray:
    """2-D float64 matrix product with explicit shape checking."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def outer_accumulate(acc, g) -> np.ndarray:
    """Return acc + g g^T without mutating acc.

    Accumulator for gradient covariance estimates; g is a 1-D vector and acc
    a square matrix of matching size.
    """
    acc = np.asarray(acc, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1:
        raise ValueError(f"outer_accumulate expects a vector, got shape {g.shape}")
    d = g.shape[0]
    if acc.shape != (d, d):
        raise ValueError(f"accumulator shape {acc.shape} does not match vector length {d}")
    return acc + np.outer(g, g)


def quad_form(mat, v) -> float:
    """0.5 * v^T mat v for a square matrix and a matching vector."""
    mat = np.asarray(mat, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"quad_form expects a vector, got shape {v.shape}")
    d = v.shape[0]
    if mat.shape != (d, d):
        raise ValueError(f"matrix shape {mat.shape} does not match vector length {d}")
    return float(0.5 * (v @ (mat @ v)))


def symmetrize(mat) -> np.ndarray:
    """(mat + mat^T) / 2; cleans up rounding drift in accumulated covariances."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"symmetrize expects a square matrix, got shape {mat.shape}")
    return (mat + mat.T) / 2.0
