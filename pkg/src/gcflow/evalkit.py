"""Classification and clustering metrics, k-means, and PCA.

All metrics are pure functions of their inputs. Cluster ids and class ids
are plain integer vectors; ``ClusterAssignment`` additionally carries the
centroids and the inertia trace of the k-means run that produced it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

# cap on temporary elements per distance block (rows x n x D floats)
DISTANCE_BUDGET = 4_000_000


def _labels_of(assign):
    labels = assign.labels if hasattr(assign, "labels") else assign
    return np.asarray(labels)


def micro_f1(pred, truth, eval_set=None) -> float:
    """Micro-averaged F1 over the evaluation set.

    With one label per node, micro precision and recall both equal
    accuracy, so this is the fraction of exact matches.
    """
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction and truth lengths differ: {pred.shape} vs {truth.shape}")
    if eval_set is not None:
        eval_set = np.asarray(eval_set, dtype=np.intp)
        pred = pred[eval_set]
        truth = truth[eval_set]
    if pred.size == 0:
        raise ConfigError("evaluation set is empty")
    return float((pred == truth).mean())


def _pairwise_distances(a, b):
    # direct differences, not the inner-product expansion: the latter loses
    # ~1e-9 of precision, which the metric oracles notice
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))


def silhouette(points, assign) -> float:
    """Mean silhouette width under Euclidean distance.

    Per point: a = mean distance to its own cluster (excluding itself),
    b = smallest mean distance to any other cluster, score = (b-a)/max(a,b).
    Points in singleton clusters score 0. Distances are accumulated
    blockwise so the full n x n matrix never materializes.
    """
    x = np.asarray(points, dtype=np.float64)
    raw = _labels_of(assign)
    _, labels = np.unique(raw, return_inverse=True)
    k = labels.max() + 1
    if k < 2:
        raise ConfigError("silhouette needs at least two clusters")
    n = x.shape[0]
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0

    scores = np.zeros(n)
    block = max(1, DISTANCE_BUDGET // max(n * x.shape[1], 1))
    for start in range(0, n, block):
        stop = min(start + block, n)
        sums = _pairwise_distances(x[start:stop], x) @ onehot
        rows = np.arange(start, stop)
        own = labels[rows]
        own_count = counts[own]
        with np.errstate(invalid="ignore", divide="ignore"):
            a = sums[np.arange(rows.size), own] / (own_count - 1.0)
            means = sums / counts[None, :]
        means[np.arange(rows.size), own] = np.inf
        b = means.min(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            s = (b - a) / np.maximum(a, b)
        s[own_count == 1.0] = 0.0
        s[np.maximum(a, b) == 0.0] = 0.0
        scores[rows] = s
    return float(scores.mean())


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1.0)
    return table


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-(p * np.log(p)).sum())


def nmi(assign, truth) -> float:
    """Mutual information normalized by the geometric mean of entropies.

    Natural logarithms throughout; zero by convention when either side has
    zero entropy (a single cluster carries no information).
    """
    a = _labels_of(assign)
    t = _labels_of(truth)
    if a.size == 0 or a.shape != t.shape:
        raise ShapeError("need two equal-length non-empty label vectors")
    n = a.size
    table = _contingency(a, t)
    row = table.sum(axis=1)
    col = table.sum(axis=0)
    h_a = _entropy(row, n)
    h_t = _entropy(col, n)
    if h_a == 0.0 or h_t == 0.0:
        return 0.0
    info = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            c = table[i, j]
            if c > 0:
                info += (c / n) * np.log(c * n / (row[i] * col[j]))
    return float(max(info, 0.0) / np.sqrt(h_a * h_t))


def _choose2(x):
    return x * (x - 1.0) / 2.0


def ari(assign, truth) -> float:
    """Adjusted Rand index from the pair-counting formula."""
    a = _labels_of(assign)
    t = _labels_of(truth)
    if a.size == 0 or a.shape != t.shape:
        raise ShapeError("need two equal-length non-empty label vectors")
    table = _contingency(a, t)
    index = _choose2(table).sum()
    sum_a = _choose2(table.sum(axis=1)).sum()
    sum_t = _choose2(table.sum(axis=0)).sum()
    total = _choose2(float(a.size))
    expected = sum_a * sum_t / total if total else 0.0
    denom = 0.5 * (sum_a + sum_t) - expected
    if denom == 0.0:
        return 1.0
    return float((index - expected) / denom)


@dataclass
class ClusterAssignment:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    inertia_trace: list = field(default_factory=list)


def _plusplus_seed(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = ((x - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[c] = x[idx]
        closest = np.minimum(closest, ((x - centroids[c]) ** 2).sum(axis=1))
    return centroids


def kmeans(points, k, max_iters=1000, seed=0) -> ClusterAssignment:
    """Lloyd iterations from a distance-weighted random seeding.

    Stops when assignments reach a fixpoint or after ``max_iters`` rounds.
    A cluster that loses all members is restarted at the point farthest
    from its current centroid assignment.
    """
    x = np.asarray(points, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise ConfigError(f"cannot form {k} clusters from {n} points")
    if max_iters < 1:
        raise ConfigError("need at least one iteration")
    rng = np.random.default_rng(seed)
    centroids = _plusplus_seed(x, k, rng)
    labels = None
    trace = []
    for _ in range(max_iters):
        sq = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = sq.argmin(axis=1)
        for c in range(k):
            if not np.any(new_labels == c):
                farthest = sq[np.arange(n), new_labels].argmax()
                centroids[c] = x[farthest]
                sq[:, c] = ((x - centroids[c]) ** 2).sum(axis=1)
                new_labels = sq.argmin(axis=1)
        trace.append(float(sq[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centroids[c] = x[labels == c].mean(axis=0)
    sq = ((x - centroids[labels]) ** 2).sum(axis=1)
    return ClusterAssignment(labels=labels, centroids=centroids, inertia=float(sq.sum()), inertia_trace=trace)


@dataclass
class PcaProjection:
    mean: np.ndarray
    directions: np.ndarray  # D x r, orthonormal columns
    explained: np.ndarray  # variances, non-increasing


def pca_fit(x, r) -> PcaProjection:
    """Top-r principal directions of the feature covariance.

    Deterministic up to sign, which is fixed by making each direction's
    largest-magnitude entry positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"need a 2-D feature matrix, got shape {x.shape}")
    n, d = x.shape
    if not (1 <= r <= min(n, d)):
        raise ShapeError(f"cannot keep {r} directions of a {n}x{d} matrix")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / max(n - 1, 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:r]
    directions = eigvecs[:, order].copy()
    for c in range(r):
        col = directions[:, c]
        if col[np.abs(col).argmax()] < 0:
            directions[:, c] = -col
    return PcaProjection(mean=mean, directions=directions, explained=eigvals[order].copy())


def pca_apply(proj: PcaProjection, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1] != proj.mean.size:
        raise ShapeError(f"projection expects {proj.mean.size} features, got {x.shape[1]}")
    return (x - proj.mean) @ proj.directions
