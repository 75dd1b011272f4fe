"""Training objectives and their analytic gradients.

Three objectives share one primitive, the per-batch cross entropy
between a constant target distribution q over prototypes and the
softmax of prototype similarities at temperature tau:

    l(z, q) = -(1/B) sum_b sum_k q[k,b] * log softmax_k(C^T z / tau)[k,b]

Targets are always constants (stop-gradient): gradients are taken with
q held fixed, flowing only into the predicting features and the
prototype bank.

The two-view objective averages l(z_j, q_i) and l(z_i, q_j).  The
four-view objective predicts each of the four assignments from every
view except the one with the same stream and the same augmentation,
giving 12 terms weighted 1/4 * 1/3 (re-averaged when a view switch
drops terms); views from the frozen stream contribute to the value and
to the prototype gradient but receive zero feature gradient.

The pairwise baseline scores each anchor column against every column of
the opposite view (the aligned column is the positive), symmetrized
over both views.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import PrototypeBank
from .numerics import Matrix, log_softmax_cols

MODES = ("single_stream", "cross_stream", "infonce_baseline")
PREDICTION_VIEWS = ("all_others", "other_stream_only")
ASSIGNMENT_VIEWS = ("both_streams", "other_stream_only")


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.1
    mode: str = "single_stream"
    prediction_views: str = "all_others"
    assignment_views: str = "both_streams"

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.prediction_views not in PREDICTION_VIEWS:
            raise ValueError(f"prediction_views must be one of {PREDICTION_VIEWS}")
        if self.assignment_views not in ASSIGNMENT_VIEWS:
            raise ValueError(f"assignment_views must be one of {ASSIGNMENT_VIEWS}")


@dataclass
class LossOutput:
    value: float
    grad_z: dict = field(default_factory=dict)
    grad_c: Matrix | None = None
    term_count: int = 0


def _check_target_columns(q: Matrix, name: str) -> Matrix:
    q = np.asarray(q, dtype=np.float64)
    sums = q.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > 1e-6):
        bad = int(np.argmax(np.abs(sums - 1.0)))
        raise ValueError(
            f"{name} column {bad} sums to {sums[bad]:.9f}, expected 1 "
            "(pass Assignment.distributions(), not raw plan columns)"
        )
    return q


def _cross_entropy(z: Matrix, q: Matrix, c: Matrix, tau: float):
    """Batch-mean cross entropy of softmax(C^T z / tau) against constant q.

    Returns (value, grad_z, grad_c).
    """
    b = z.shape[1]
    scores = c.T @ z
    logp = log_softmax_cols(scores, tau)
    value = float(-(q * logp).sum() / b)
    delta = (np.exp(logp) - q) / (tau * b)
    grad_z = c @ delta
    grad_c = z @ delta.T
    return value, grad_z, grad_c


def infonce(z_i: Matrix, z_j: Matrix, tau: float) -> LossOutput:
    """Symmetrized pairwise contrastive loss over a batch of aligned views."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.shape != z_j.shape:
        raise ValueError(f"view shapes differ: {z_i.shape} vs {z_j.shape}")
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    b = z_i.shape[1]
    if b < 2:
        raise ValueError("need at least 2 columns for negatives")

    s = (z_i.T @ z_j) / tau                       # s[a, k] = z_i[:,a] . z_j[:,k] / tau
    row_max = s.max(axis=1, keepdims=True)
    p_row = np.exp(s - row_max)
    p_row /= p_row.sum(axis=1, keepdims=True)     # anchors from view i
    col_max = s.max(axis=0, keepdims=True)
    p_col = np.exp(s - col_max)
    p_col /= p_col.sum(axis=0, keepdims=True)     # anchors from view j

    diag = np.arange(b)
    value = float(
        (-np.log(p_row[diag, diag]).sum() - np.log(p_col[diag, diag]).sum())
        / (2 * b)
    )
    g = p_row + p_col
    g[diag, diag] -= 2.0
    g /= 2 * b
    grad_i = (z_j @ g.T) / tau
    grad_j = (z_i @ g) / tau
    return LossOutput(value=value, grad_z={"i": grad_i, "j": grad_j},
                      grad_c=None, term_count=2 * b)


def single_stream_loss(z_i: Matrix, z_j: Matrix, bank: PrototypeBank,
                       q_i: Matrix, q_j: Matrix, cfg: LossConfig) -> LossOutput:
    """Swapped prediction between two augmented views of one stream."""
    q_i = _check_target_columns(q_i, "q_i")
    q_j = _check_target_columns(q_j, "q_j")
    tau = cfg.temperature

    v1, gz_j, gc1 = _cross_entropy(z_j, q_i, bank.c, tau)
    v2, gz_i, gc2 = _cross_entropy(z_i, q_j, bank.c, tau)
    return LossOutput(
        value=0.5 * (v1 + v2),
        grad_z={"i": 0.5 * gz_i, "j": 0.5 * gz_j},
        grad_c=0.5 * (gc1 + gc2),
        term_count=2,
    )


def cross_stream_loss(z_s_i: Matrix, z_s_j: Matrix, z_t_i: Matrix, z_t_j: Matrix,
                      bank_s: PrototypeBank,
                      q_s_i: Matrix, q_s_j: Matrix, q_t_i: Matrix, q_t_j: Matrix,
                      cfg: LossConfig) -> LossOutput:
    """Four-view swapped prediction against the optimized stream's bank.

    Stream s is being optimized; stream t comes from the frozen encoder,
    so grad_z for t-views is identically zero even though their terms
    contribute to the value and the prototype gradient.
    """
    z = {"s_i": np.asarray(z_s_i, np.float64), "s_j": np.asarray(z_s_j, np.float64),
         "t_i": np.asarray(z_t_i, np.float64), "t_j": np.asarray(z_t_j, np.float64)}
    q = {"s_i": _check_target_columns(q_s_i, "q_s_i"),
         "s_j": _check_target_columns(q_s_j, "q_s_j"),
         "t_i": _check_target_columns(q_t_i, "q_t_i"),
         "t_j": _check_target_columns(q_t_j, "q_t_j")}
    tau = cfg.temperature

    if cfg.assignment_views == "other_stream_only":
        targets = ["t_i", "t_j"]
    else:
        targets = ["s_i", "s_j", "t_i", "t_j"]

    def predictors(target: str):
        if cfg.prediction_views == "other_stream_only":
            other = "t" if target.startswith("s") else "s"
            return [f"{other}_i", f"{other}_j"]
        return [v for v in ("s_i", "s_j", "t_i", "t_j") if v != target]

    groups = [(t, predictors(t)) for t in targets]
    weight = 1.0 / (len(groups) * len(groups[0][1]))

    value = 0.0
    term_count = 0
    grad_z = {name: np.zeros_like(z[name]) for name in z}
    grad_c = np.zeros_like(bank_s.c)
    for target, views in groups:
        for view in views:
            v, gz, gc = _cross_entropy(z[view], q[target], bank_s.c, tau)
            value += weight * v
            grad_c += weight * gc
            if view.startswith("s"):
                grad_z[view] += weight * gz
            term_count += 1

    return LossOutput(value=float(value), grad_z=grad_z, grad_c=grad_c,
                      term_count=term_count)
