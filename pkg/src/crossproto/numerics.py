"""Dense float64 kernels shared by every other module.

Conventions: matrices are 2-D C-contiguous float64 numpy arrays and
columns are samples (a feature batch is d x B, a prototype bank is
d x K).  All randomness flows through explicitly seeded PCG64
generators; there is no module-level RNG state, so identical seeds give
identical draws on every platform.  Every public operation returns a
fresh array with finite entries.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray

# exp() overflows float64 just above 709; leave headroom
EXP_LIMIT = 700.0


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for a bare integer seed."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream keyed by (seed, *key), stable across runs."""
    ss = np.random.SeedSequence([int(seed), *(int(k) for k in key)])
    return np.random.Generator(np.random.PCG64(ss))


def as_matrix(m, name: str = "matrix") -> Matrix:
    out = np.ascontiguousarray(np.asarray(m, dtype=np.float64))
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def check_finite(m: np.ndarray, name: str = "matrix") -> None:
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul dimension mismatch: {a.shape} @ {b.shape}"
        )
    with np.errstate(over="ignore", invalid="ignore"):
        out = a @ b
    check_finite(out, "matmul result")
    return out


def softmax_cols(m: Matrix, temperature: float) -> Matrix:
    """Column-wise softmax of m / temperature, max-subtracted for stability."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = np.asarray(m, dtype=np.float64) / temperature
    t = t - t.max(axis=0, keepdims=True)
    e = np.exp(t)
    return e / e.sum(axis=0, keepdims=True)


def log_softmax_cols(m: Matrix, temperature: float) -> Matrix:
    """Column-wise log-softmax of m / temperature."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    t = np.asarray(m, dtype=np.float64) / temperature
    t = t - t.max(axis=0, keepdims=True)
    return t - np.log(np.exp(t).sum(axis=0, keepdims=True))


def column_norms(m: Matrix) -> np.ndarray:
    return np.linalg.norm(m, axis=0)


def l2_normalize_cols(m: Matrix) -> Matrix:
    """Rescale every column to unit Euclidean norm.  Zero columns are an error."""
    norms = column_norms(m)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"cannot normalize zero column {bad}")
    return m / norms
