"""Downstream evaluation of frozen representations: nearest-neighbour
retrieval, linear probing, stream averaging, and cluster-quality
metrics on rounded prototype assignments.

Retrieval ranks training items by cosine similarity to each test query
(features must be unit-norm), with ties broken toward the lower
training index so results are deterministic.  Cluster metrics compare a
hard prototype assignment against held-out labels: accuracy under the
optimal cluster-to-label matching, mutual information normalized by
sqrt(H(U) H(V)), adjusted Rand index under the permutation model, and
per-cluster label entropy / max purity averaged over non-empty
clusters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import _cross_entropy
from .model import PrototypeBank, init_prototypes, prototype_scores, renormalize
from .numerics import Matrix, derive_rng
from .sinkhorn import SinkhornConfig, assign

DEFAULT_KS = (1, 5, 10, 20)


def similarity_matrix(train_feats: Matrix, test_feats: Matrix) -> Matrix:
    """Cosine similarities, train items as rows, queries as columns."""
    if train_feats.shape[0] != test_feats.shape[0]:
        raise ValueError(
            f"feature dims differ: {train_feats.shape[0]} vs {test_feats.shape[0]}"
        )
    return train_feats.T @ test_feats


def combine_streams(scores1: Matrix, scores2: Matrix) -> Matrix:
    """Average two streams' similarity or probability matrices."""
    scores1 = np.asarray(scores1, dtype=np.float64)
    scores2 = np.asarray(scores2, dtype=np.float64)
    if scores1.shape != scores2.shape:
        raise ValueError(f"shapes differ: {scores1.shape} vs {scores2.shape}")
    return 0.5 * (scores1 + scores2)


def _check_unit_columns(feats: Matrix, name: str) -> None:
    norms = np.linalg.norm(feats, axis=0)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError(f"{name} columns must be unit-norm for cosine ranking")


def retrieval_from_similarities(sims: Matrix, train_labels, test_labels,
                                ks=DEFAULT_KS) -> dict:
    """Recall@k from a precomputed (train x query) similarity matrix."""
    train_labels = np.asarray(train_labels)
    test_labels = np.asarray(test_labels)
    n_train = sims.shape[0]
    ks = tuple(sorted(ks))
    if ks[-1] > n_train:
        raise ValueError(f"k={ks[-1]} exceeds training set size {n_train}")
    # stable sort on negated scores: ties resolve to the lower train index
    order = np.argsort(-sims, axis=0, kind="stable")
    ranked = train_labels[order]                     # n_train x n_test
    hits = ranked == test_labels[None, :]
    return {k: float(hits[:k].any(axis=0).mean()) for k in ks}


def knn_retrieval(train_feats: Matrix, train_labels, test_feats: Matrix,
                  test_labels, ks=DEFAULT_KS) -> dict:
    """Recall@k of cosine k-nearest-neighbour retrieval."""
    _check_unit_columns(train_feats, "train features")
    _check_unit_columns(test_feats, "test features")
    sims = similarity_matrix(train_feats, test_feats)
    return retrieval_from_similarities(sims, train_labels, test_labels, ks)


# ---------------------------------------------------------------------------
# Linear probe


def fit_logistic(feats: Matrix, labels, reg: float = 1e-2,
                 max_iter: int = 3000, tol: float = 1e-8) -> np.ndarray:
    """Multinomial logistic regression by accelerated full-batch descent.

    Returns W of shape (num_classes, d+1); the last column is the bias,
    which is not regularized.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("training set has a single class; nothing to separate")
    if not np.array_equal(classes, np.arange(len(classes))):
        raise ValueError("labels must be 0..M-1")
    x = np.vstack([np.asarray(feats, dtype=np.float64),
                   np.ones(feats.shape[1])])
    m, n = len(classes), x.shape[1]
    y = np.zeros((m, n))
    y[labels, np.arange(n)] = 1.0

    # softmax cross entropy has curvature <= 0.5 * max ||x||^2 per sample
    lipschitz = 0.5 * float((x * x).sum(axis=0).max()) + reg
    step = 1.0 / lipschitz

    def grad(w):
        logits = w @ x
        logits -= logits.max(axis=0, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=0, keepdims=True)
        g = (p - y) @ x.T / n
        g[:, :-1] += reg * w[:, :-1]
        return g

    w = np.zeros((m, x.shape[0]))
    w_prev = w.copy()
    t = 1.0
    for _ in range(max_iter):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y_acc = w + ((t - 1.0) / t_next) * (w - w_prev)
        g = grad(y_acc)
        w_prev = w
        w = y_acc - step * g
        t = t_next
        if np.abs(grad(w)).max() < tol:
            break
    return w


def predict_proba(w: np.ndarray, feats: Matrix) -> Matrix:
    """Class probabilities (num_classes x N) under a fitted probe."""
    x = np.vstack([np.asarray(feats, dtype=np.float64),
                   np.ones(feats.shape[1])])
    logits = w @ x
    logits -= logits.max(axis=0, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=0, keepdims=True)


def linear_probe(train_feats: Matrix, train_labels, test_feats: Matrix,
                 test_labels, reg: float = 1e-2, max_iter: int = 3000,
                 tol: float = 1e-8) -> float:
    """Top-1 accuracy of a logistic probe on frozen features."""
    w = fit_logistic(train_feats, train_labels, reg=reg, max_iter=max_iter, tol=tol)
    pred = predict_proba(w, test_feats).argmax(axis=0)
    return float((pred == np.asarray(test_labels)).mean())


# ---------------------------------------------------------------------------
# Optimal matching and cluster metrics


def hungarian(cost: Matrix) -> np.ndarray:
    """Minimum-cost perfect matching on a square cost matrix.

    Potential-based shortest-augmenting-path construction, O(n^3).
    Returns ``perm`` with ``perm[i]`` the column matched to row i.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix contains non-finite entries")
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    match = np.zeros(n + 1, dtype=np.int64)   # match[j] = row on column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    perm = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[match[j] - 1] = j - 1
    return perm


@dataclass(frozen=True)
class ClusterReport:
    acc: float
    nmi: float
    ari: float
    mean_entropy: float
    max_purity: float

    def to_dict(self) -> dict:
        return {"acc": self.acc, "nmi": self.nmi, "ari": self.ari,
                "mean_entropy": self.mean_entropy, "max_purity": self.max_purity}


def _contingency(clusters, labels, num_clusters: int) -> np.ndarray:
    labels = np.asarray(labels)
    num_labels = int(labels.max()) + 1
    table = np.zeros((num_clusters, num_labels), dtype=np.int64)
    np.add.at(table, (clusters, labels), 1)
    return table


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def _mutual_information(table: np.ndarray) -> float:
    n = table.sum()
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    mi = 0.0
    for i, j in zip(*np.nonzero(table)):
        p = table[i, j] / n
        mi += p * np.log(n * table[i, j] / (rows[i] * cols[j]))
    return float(mi)


def cluster_eval(assign_hard, labels, k_eval: int) -> ClusterReport:
    """Score a hard assignment of samples to k_eval prototypes against labels."""
    clusters = np.asarray(assign_hard)
    labels = np.asarray(labels)
    if clusters.shape != labels.shape:
        raise ValueError("assignments and labels must align")
    if clusters.min() < 0 or clusters.max() >= k_eval:
        raise ValueError(f"cluster ids must be in [0, {k_eval})")
    table = _contingency(clusters, labels, k_eval)
    n = len(labels)

    # accuracy under optimal matching; pad to square with zero gain
    side = max(table.shape)
    padded = np.zeros((side, side))
    padded[: table.shape[0], : table.shape[1]] = table
    perm = hungarian(-padded)
    matched = sum(padded[i, perm[i]] for i in range(side))
    acc = float(matched / n)

    h_u = _entropy(table.sum(axis=1))
    h_v = _entropy(table.sum(axis=0))
    if h_u == 0.0 and h_v == 0.0:
        nmi = 1.0
    elif h_u == 0.0 or h_v == 0.0:
        nmi = 0.0
    else:
        nmi = _mutual_information(table) / np.sqrt(h_u * h_v)

    def comb2(x):
        return x * (x - 1) / 2.0

    sum_ij = comb2(table.astype(np.float64)).sum()
    sum_a = comb2(table.sum(axis=1).astype(np.float64)).sum()
    sum_b = comb2(table.sum(axis=0).astype(np.float64)).sum()
    total = comb2(float(n))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    ari = 1.0 if max_index == expected else float(
        (sum_ij - expected) / (max_index - expected)
    )

    sizes = table.sum(axis=1)
    nonempty = sizes > 0
    entropies = [
        _entropy(row) for row, keep in zip(table, nonempty) if keep
    ]
    purities = [
        row.max() / row.sum() for row, keep in zip(table, nonempty) if keep
    ]
    return ClusterReport(
        acc=acc,
        nmi=float(nmi),
        ari=ari,
        mean_entropy=float(np.mean(entropies)),
        max_purity=float(np.mean(purities)),
    )


# ---------------------------------------------------------------------------
# Prototype fitting on frozen features (cluster evaluation uses the same
# swapped-prediction objective, with the encoder out of the loop)


def fit_eval_prototypes(feats: Matrix, k_eval: int, epochs: int = 40,
                        batch_size: int = 128, lr: float = 2.0,
                        temperature: float = 0.1,
                        sinkhorn_cfg: SinkhornConfig | None = None,
                        seed: int = 0) -> PrototypeBank:
    """Train a fresh k_eval-prototype bank on frozen unit-norm features."""
    if sinkhorn_cfg is None:
        sinkhorn_cfg = SinkhornConfig()
    rng = derive_rng(seed, 9000)
    bank = init_prototypes(feats.shape[0], k_eval, rng)
    n = feats.shape[1]
    batch_size = min(batch_size, n)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1, batch_size):
            z = feats[:, perm[start:start + batch_size]]
            scores = prototype_scores(z, bank)
            q = assign(scores, sinkhorn_cfg).distributions()
            _, _, grad_c = _cross_entropy(z, q, bank.c, temperature)
            bank.c = bank.c - lr * grad_c
            renormalize(bank)
    return bank


def hard_assignments(feats: Matrix, bank: PrototypeBank) -> np.ndarray:
    """Nearest-prototype id per feature column."""
    return prototype_scores(feats, bank).argmax(axis=0)


def usage_entropy(assign_ids, k: int) -> float:
    """Entropy of the prototype-usage histogram (natural log)."""
    counts = np.bincount(np.asarray(assign_ids), minlength=k)
    return _entropy(counts)
