import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from gcflow import evalkit
from gcflow.errors import ConfigError, ShapeError


# -- independent oracles ------------------------------------------------


def f1_via_confusion(pred, truth):
    """Micro F1 from per-class confusion counts: micro P = micro R here."""
    classes = np.union1d(pred, truth)
    tp = sum(np.sum((pred == c) & (truth == c)) for c in classes)
    fp = sum(np.sum((pred == c) & (truth != c)) for c in classes)
    fn = sum(np.sum((pred != c) & (truth == c)) for c in classes)
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def silhouette_loops(x, labels):
    """Quadratic-time reference silhouette."""
    x = np.asarray(x, float)
    labels = np.asarray(labels)
    n = x.shape[0]
    dist = np.array([[np.linalg.norm(x[i] - x[j]) for j in range(n)] for i in range(n)])
    scores = []
    for i in range(n):
        mine = (labels == labels[i]) & (np.arange(n) != i)
        if not mine.any():
            scores.append(0.0)
            continue
        a = dist[i][mine].mean()
        b = min(
            dist[i][labels == c].mean() for c in np.unique(labels) if c != labels[i]
        )
        scores.append(0.0 if max(a, b) == 0 else (b - a) / max(a, b))
    return float(np.mean(scores))


def nmi_from_table(a, t):
    """Direct contingency-table computation with explicit loops."""
    a = np.asarray(a)
    t = np.asarray(t)
    n = a.size
    va, vt = np.unique(a), np.unique(t)
    info = 0.0
    for ca in va:
        for ct in vt:
            joint = np.sum((a == ca) & (t == ct)) / n
            if joint > 0:
                pa = np.sum(a == ca) / n
                pt = np.sum(t == ct) / n
                info += joint * np.log(joint / (pa * pt))
    ha = -sum(p * np.log(p) for p in [np.mean(a == c) for c in va] if p > 0)
    ht = -sum(p * np.log(p) for p in [np.mean(t == c) for c in vt] if p > 0)
    if ha == 0 or ht == 0:
        return 0.0
    return info / np.sqrt(ha * ht)


def ari_from_pairs(a, t):
    """ARI from exhaustive pair enumeration."""
    a = np.asarray(a)
    t = np.asarray(t)
    ss = sd = ds = dd = 0
    for i, j in itertools.combinations(range(a.size), 2):
        same_a = a[i] == a[j]
        same_t = t[i] == t[j]
        ss += same_a and same_t
        sd += same_a and not same_t
        ds += same_t and not same_a
        dd += not same_a and not same_t
    index = ss
    sum_a = ss + sd
    sum_t = ss + ds
    total = ss + sd + ds + dd
    expected = sum_a * sum_t / total
    denom = 0.5 * (sum_a + sum_t) - expected
    if denom == 0:
        return 1.0
    return (index - expected) / denom


# -- micro F1 -----------------------------------------------------------


def test_micro_f1_trivials():
    truth = np.array([0, 1, 2, 1])
    assert evalkit.micro_f1(truth, truth) == 1.0
    half = np.array([0, 1, 0, 0])
    assert evalkit.micro_f1(half, truth) == 0.5


def test_micro_f1_eval_subset():
    pred = np.array([0, 0, 1, 1])
    truth = np.array([0, 1, 1, 1])
    assert evalkit.micro_f1(pred, truth, eval_set=[0, 2]) == 1.0
    assert evalkit.micro_f1(pred, truth, eval_set=[1]) == 0.0


def test_micro_f1_empty_eval_set_rejected():
    with pytest.raises(ConfigError):
        evalkit.micro_f1(np.array([0]), np.array([0]), eval_set=[])


def test_micro_f1_matches_confusion_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = rng.integers(5, 40)
        pred = rng.integers(0, 4, size=n)
        truth = rng.integers(0, 4, size=n)
        if not np.any(pred == truth):
            continue  # oracle precision undefined with zero true positives
        assert_allclose(evalkit.micro_f1(pred, truth), f1_via_confusion(pred, truth), atol=1e-12)
        assert_allclose(evalkit.micro_f1(pred, truth), np.mean(pred == truth), atol=1e-15)


# -- silhouette ---------------------------------------------------------


def test_silhouette_two_tight_far_pairs():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    labels = np.array([0, 0, 1, 1])
    want = np.mean(
        [
            (10.05 - 0.1) / 10.05,
            (9.95 - 0.1) / 9.95,
            (9.95 - 0.1) / 9.95,
            (10.05 - 0.1) / 10.05,
        ]
    )
    got = evalkit.silhouette(x, labels)
    assert_allclose(got, want, atol=1e-12)
    assert got == pytest.approx(0.99, abs=1e-3)


def test_silhouette_label_swap_invariant():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 3))
    labels = rng.integers(0, 2, size=20)
    labels[0], labels[1] = 0, 1
    assert_allclose(evalkit.silhouette(x, labels), evalkit.silhouette(x, 1 - labels), atol=1e-15)


def test_silhouette_single_cluster_rejected():
    with pytest.raises(ConfigError):
        evalkit.silhouette(np.zeros((3, 2)), [1, 1, 1])


def test_silhouette_singleton_contributes_zero():
    x = np.array([[0.0], [5.0], [6.0]])
    got = evalkit.silhouette(x, [0, 1, 1])
    want = np.mean([0.0, (5.0 - 1.0) / 5.0, (6.0 - 1.0) / 6.0])
    assert_allclose(got, want, atol=1e-12)


def test_silhouette_matches_loop_oracle_and_range():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n = int(rng.integers(6, 40))
        k = int(rng.integers(2, 5))
        x = rng.normal(size=(n, 3))
        labels = rng.integers(0, k, size=n)
        labels[:k] = np.arange(k)  # every cluster non-empty
        got = evalkit.silhouette(x, labels)
        assert_allclose(got, silhouette_loops(x, labels), atol=1e-10)
        assert -1.0 <= got <= 1.0


def test_silhouette_blockwise_equals_direct():
    # n*n*D exceeds the block budget, so rows are processed in several blocks
    rng = np.random.default_rng(3)
    n, dim = 300, 45
    x = rng.normal(size=(n, dim))
    labels = rng.integers(0, 3, size=n)
    assert evalkit.DISTANCE_BUDGET // (n * dim) < n
    assert_allclose(evalkit.silhouette(x, labels), silhouette_loops(x, labels), atol=1e-10)


# -- NMI ----------------------------------------------------------------


def test_nmi_identical_partitions():
    labels = np.array([0, 0, 1, 1, 2, 2, 2])
    assert_allclose(evalkit.nmi(labels, labels), 1.0, atol=1e-12)


def test_nmi_single_cluster_is_zero():
    assert evalkit.nmi(np.zeros(6, dtype=int), np.array([0, 1, 2, 0, 1, 2])) == 0.0


def test_nmi_matches_contingency_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.integers(0, 3, size=20)
        t = rng.integers(0, 4, size=20)
        assert_allclose(evalkit.nmi(a, t), nmi_from_table(a, t), atol=1e-12)
        assert 0.0 <= evalkit.nmi(a, t) <= 1.0 + 1e-12


def test_nmi_label_permutation_invariant():
    rng = np.random.default_rng(5)
    a = rng.integers(0, 3, size=30)
    t = rng.integers(0, 3, size=30)
    relabeled = np.array([2, 0, 1])[a]
    assert_allclose(evalkit.nmi(a, t), evalkit.nmi(relabeled, t), atol=1e-12)


# -- ARI ----------------------------------------------------------------


def test_ari_identical_partitions():
    labels = np.array([0, 1, 1, 2, 0, 2])
    assert_allclose(evalkit.ari(labels, labels), 1.0, atol=1e-12)


def test_ari_hand_example_matches_pair_oracle():
    a = np.array([0, 0, 1, 1, 2, 2])
    t = np.array([0, 0, 1, 2, 2, 2])
    assert_allclose(evalkit.ari(a, t), ari_from_pairs(a, t), atol=1e-12)


def test_ari_matches_pair_oracle_on_random_cases():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.integers(0, 3, size=12)
        t = rng.integers(0, 3, size=12)
        assert_allclose(evalkit.ari(a, t), ari_from_pairs(a, t), atol=1e-12)


def test_ari_near_zero_for_independent_partitions():
    rng = np.random.default_rng(7)
    values = [
        evalkit.ari(rng.integers(0, 3, size=24), rng.integers(0, 3, size=24))
        for _ in range(1000)
    ]
    assert abs(np.mean(values)) < 0.02


# -- k-means ------------------------------------------------------------


def test_kmeans_one_cluster_per_point():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(5, 2)) * 10
    out = evalkit.kmeans(x, 5, seed=0)
    assert sorted(out.labels.tolist()) == [0, 1, 2, 3, 4]
    assert out.inertia == pytest.approx(0.0, abs=1e-18)


def test_kmeans_recovers_separated_blobs():
    rng = np.random.default_rng(9)
    truth = np.repeat([0, 1], 40)
    x = rng.normal(size=(80, 3)) * 0.2 + truth[:, None] * 25.0
    out = evalkit.kmeans(x, 2, seed=1)
    assert evalkit.ari(out.labels, truth) == 1.0


def test_kmeans_deterministic_for_fixed_seed():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(40, 4))
    a = evalkit.kmeans(x, 3, seed=7)
    b = evalkit.kmeans(x, 3, seed=7)
    assert np.array_equal(a.labels, b.labels)
    assert np.array_equal(a.centroids, b.centroids)


def test_kmeans_inertia_trace_non_increasing():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(60, 2))
    out = evalkit.kmeans(x, 4, seed=2)
    trace = out.inertia_trace
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))


def test_kmeans_rejects_too_many_clusters():
    with pytest.raises(ConfigError):
        evalkit.kmeans(np.zeros((2, 2)), 3)


# -- PCA ----------------------------------------------------------------


def test_pca_reconstructs_low_rank_data():
    rng = np.random.default_rng(12)
    basis = rng.normal(size=(3, 8))
    x = rng.normal(size=(50, 3)) @ basis + rng.normal(size=8)
    proj = evalkit.pca_fit(x, 3)
    coords = evalkit.pca_apply(proj, x)
    back = coords @ proj.directions.T + proj.mean
    assert np.abs(back - x).max() < 1e-8


def test_pca_directions_orthonormal():
    rng = np.random.default_rng(13)
    proj = evalkit.pca_fit(rng.normal(size=(30, 6)), 4)
    gram = proj.directions.T @ proj.directions
    assert np.abs(gram - np.eye(4)).max() < 1e-10


def test_pca_projected_covariance_diagonal():
    rng = np.random.default_rng(14)
    x = rng.normal(size=(40, 5)) @ rng.normal(size=(5, 5))
    coords = evalkit.pca_apply(evalkit.pca_fit(x, 3), x)
    centered = coords - coords.mean(axis=0)
    cov = centered.T @ centered / (coords.shape[0] - 1)
    off = cov - np.diag(np.diag(cov))
    assert np.abs(off).max() < 1e-8


def test_pca_explained_non_increasing():
    rng = np.random.default_rng(15)
    proj = evalkit.pca_fit(rng.normal(size=(25, 7)), 5)
    assert all(b <= a + 1e-12 for a, b in zip(proj.explained, proj.explained[1:]))


def test_pca_full_rank_preserves_distances():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(20, 4))
    coords = evalkit.pca_apply(evalkit.pca_fit(x, 4), x)
    for i in range(0, 20, 5):
        for j in range(20):
            d0 = np.linalg.norm(x[i] - x[j])
            d1 = np.linalg.norm(coords[i] - coords[j])
            assert abs(d0 - d1) < 1e-10


def test_pca_sign_convention_deterministic():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(30, 5))
    p1 = evalkit.pca_fit(x, 3)
    p2 = evalkit.pca_fit(x.copy(), 3)
    assert np.array_equal(p1.directions, p2.directions)
    for c in range(3):
        col = p1.directions[:, c]
        assert col[np.abs(col).argmax()] > 0


def test_pca_rejects_bad_rank():
    with pytest.raises(ShapeError):
        evalkit.pca_fit(np.zeros((4, 3)), 4)
    with pytest.raises(ShapeError):
        evalkit.pca_fit(np.zeros((4, 3)), 0)
