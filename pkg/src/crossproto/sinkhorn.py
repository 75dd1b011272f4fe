"""Equipartition assignment of features to prototypes.

Given a K x B matrix of cosine similarities between prototypes and
features, find the soft assignment Q maximizing <Q, scores> + eps*H(Q)
over the transportation polytope {Q >= 0, row sums 1/K, column sums
1/B}: start from exp(scores / eps) and alternately rescale rows and
columns.  A fixed iteration count keeps training deterministic (a
separate high-iteration path is used when exact marginals matter).
Every round ends with the column pass, so columns sum to exactly 1/B
and ``Assignment.distributions()`` (columns times the assigned column
count) are per-sample probability vectors over prototypes.

Scores must be cosine similarities: with unit-norm features and
prototypes they lie in [-1, 1], and eps >= ~0.0015 keeps exp(scores/eps)
inside float64 range without log-domain arithmetic.  A bound check at
entry rejects anything that would overflow.

Assignments are plain arrays produced outside any gradient path; they
are constant targets and no gradient flows back through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import EXP_LIMIT, Matrix


@dataclass(frozen=True)
class SinkhornConfig:
    """Solver settings.  Defaults: eps 0.05, 3 rescaling rounds."""

    epsilon: float = 0.05
    iterations: int = 3
    include_queue: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")


@dataclass(frozen=True)
class Assignment:
    """Soft assignment block returned to the loss.

    ``q`` holds the leading batch columns of the solved plan;
    ``total_cols`` is the number of columns the plan was solved over
    (batch plus any queue padding), which is the rescaling factor that
    turns a column into a probability vector.
    """

    q: Matrix
    total_cols: int

    @property
    def num_prototypes(self) -> int:
        return self.q.shape[0]

    @property
    def num_cols(self) -> int:
        return self.q.shape[1]

    def distributions(self) -> Matrix:
        """Per-sample probability vectors over prototypes (columns sum to 1)."""
        return self.q * float(self.total_cols)


def assign(scores: Matrix, cfg: SinkhornConfig, batch_cols: int | None = None) -> Assignment:
    """Solve the equipartition plan for a K x B similarity matrix.

    When ``batch_cols`` is given, trailing columns are treated as queue
    padding: they participate in the rescaling but only the leading
    ``batch_cols`` columns are returned.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    k, b = scores.shape
    if k < 2:
        raise ValueError(f"need at least 2 prototypes, got {k}")
    if b < 1:
        raise ValueError("need at least 1 column to assign")
    if np.abs(scores).max() / cfg.epsilon > EXP_LIMIT:
        raise ValueError(
            "exp(scores/epsilon) would overflow; scores must be cosine "
            "similarities in [-1, 1] (unit-norm features and prototypes)"
        )

    q = np.exp(scores / cfg.epsilon)
    for _ in range(cfg.iterations):
        q *= (1.0 / k) / q.sum(axis=1, keepdims=True)
        q *= (1.0 / b) / q.sum(axis=0, keepdims=True)

    if batch_cols is not None and batch_cols < b:
        q = np.ascontiguousarray(q[:, :batch_cols])
    return Assignment(q=q, total_cols=b)


def assignment_entropy(q) -> float:
    """-sum(q * log q) over all cells, with 0*log(0) := 0."""
    arr = q.q if isinstance(q, Assignment) else np.asarray(q, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("entropy undefined for negative entries")
    nz = arr[arr > 0]
    return float(-(nz * np.log(nz)).sum())
