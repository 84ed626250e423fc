import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shared_dml import model as M
from shared_dml.errors import DimensionError
from shared_dml.evaluation import (
    MetricsReport,
    cluster_nmi,
    concat_embeddings,
    cross_class_neighbors,
    evaluate,
    generalization_gap,
    nmi,
    pairwise_distances,
    recall_at_k,
    recall_at_ks,
    representation,
)

from .oracles import brute_nmi, brute_recall_at_k, embed_to_grid


class TestPairwise:
    def test_identical_rows(self):
        np.testing.assert_array_equal(pairwise_distances(np.ones((3, 4))), np.zeros((3, 3)))

    def test_orthonormal(self):
        assert pairwise_distances(np.eye(2))[0, 1] == pytest.approx(math.sqrt(2), abs=1e-15)

    def test_symmetric_zero_diagonal(self):
        D = pairwise_distances(np.random.default_rng(0).standard_normal((9, 5)))
        np.testing.assert_allclose(D, D.T, atol=1e-12)
        assert not np.diag(D).any()

    def test_needs_two(self):
        with pytest.raises(DimensionError):
            pairwise_distances(np.ones((1, 3)))


class TestRecall:
    def test_same_class_pair(self):
        assert recall_at_k(np.eye(2), [0, 0], 1) == 1.0

    def test_all_singletons(self):
        assert recall_at_k(np.eye(4), [0, 1, 2, 3], 1) == 0.0

    def test_constructed_four(self):
        E = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]])
        assert recall_at_k(E, ["A", "A", "B", "B"], 1) == 1.0

    def test_tie_broken_by_index(self):
        # sample 0 has two neighbours at the same distance; the lower index wins
        E = np.array([[0.0], [1.0], [-1.0]])
        assert recall_at_k(E, [0, 1, 0], 1) == pytest.approx(1 / 3)
        assert recall_at_k(E, [0, 0, 1], 1) == pytest.approx(2 / 3)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            recall_at_k(np.eye(3), [0, 0, 1], 3)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 20))
        E = rng.standard_normal((n, 3))
        if seed % 2:
            E = np.array(embed_to_grid(E))
        labels = rng.integers(0, 4, n).tolist()
        for K in range(1, n):
            assert recall_at_k(E, labels, K) == brute_recall_at_k(E, labels, K)

    def test_monotone_in_k(self):
        rng = np.random.default_rng(1)
        E, labels = rng.standard_normal((25, 4)), rng.integers(0, 6, 25)
        values = recall_at_ks(E, labels, range(1, 25))
        assert all(values[k] <= values[k + 1] for k in range(1, 24))

    def test_isometry_invariant(self):
        rng = np.random.default_rng(2)
        E, labels = rng.standard_normal((20, 5)), rng.integers(0, 4, 20)
        Q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
        assert recall_at_ks(E @ Q.T, labels, [1, 2, 4]) == recall_at_ks(E, labels, [1, 2, 4])


class TestNmi:
    def test_renamed_clusters(self):
        assert nmi([3, 3, 7, 7, 1], ["a", "a", "b", "b", "c"]) == pytest.approx(1.0)

    def test_single_cluster(self):
        assert nmi([0, 0, 0, 0], [0, 1, 0, 1]) == 0.0

    def test_balanced_independent(self):
        assert nmi([0, 1, 0, 1], ["A", "A", "B", "B"]) == pytest.approx(0.0, abs=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            nmi([0, 1], [0, 1, 2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=1, max_size=30))
    def test_matches_brute_force_and_symmetric(self, pairs):
        c, l = [p[0] for p in pairs], [p[1] for p in pairs]
        value = nmi(c, l)
        assert 0.0 <= value <= 1.0
        assert value == pytest.approx(brute_nmi(c, l), abs=1e-12)
        assert value == pytest.approx(nmi(l, c), abs=1e-12)

    def test_cluster_nmi_separated_blobs(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0, 0], [10, 0], [0, 10]])
        labels = np.repeat(np.arange(3), 10)
        E = centers[labels] + 0.1 * rng.standard_normal((30, 2))
        assert cluster_nmi(E, labels, restarts=3) == pytest.approx(1.0)

    def test_cluster_nmi_isometry(self):
        rng = np.random.default_rng(4)
        E, labels = rng.standard_normal((24, 3)), np.repeat(np.arange(4), 6)
        Q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        assert cluster_nmi(E @ Q.T, labels, 5, seed=1) == pytest.approx(cluster_nmi(E, labels, 5, seed=1))


class TestSmallOps:
    def test_concat_dims_and_norm(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((4, 128))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        out = concat_embeddings(a, a[::-1])
        assert out.shape == (4, 256)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), math.sqrt(2), atol=1e-9)

    def test_concat_identical_pairs(self):
        v = concat_embeddings(np.eye(3)[0], np.eye(3)[1])
        assert np.linalg.norm(v - v) == 0.0

    def test_concat_preserves_common_ranking(self):
        rng = np.random.default_rng(6)
        E = rng.standard_normal((10, 3))
        labels = rng.integers(0, 3, 10)
        assert recall_at_ks(concat_embeddings(E, E), labels, [1, 3]) == recall_at_ks(E, labels, [1, 3])

    @pytest.mark.parametrize("train,test,gap", [(0.907, 0.799, -0.108), (0.5, 0.5, 0.0), (0.848, 0.862, 0.014)])
    def test_gap(self, train, test, gap):
        assert generalization_gap(train, test) == pytest.approx(gap, abs=1e-12)

    def test_cross_class_neighbors(self):
        rng = np.random.default_rng(7)
        E, labels = rng.standard_normal((15, 3)), rng.integers(0, 3, 15)
        for q in range(15):
            got = cross_class_neighbors(E, labels, q, 3)
            others = sorted((np.linalg.norm(E[j] - E[q]), j) for j in range(15) if labels[j] != labels[q])
            assert got.tolist() == [j for _, j in others[:3]]
            assert np.all(labels[got] != labels[q])

    def test_cross_class_insufficient(self):
        with pytest.raises(ValueError):
            cross_class_neighbors(np.eye(3), [0, 0, 1], 0, 2)


class TestEvaluate:
    def setup_method(self):
        self.params = M.init_params(M.ModelDims(4, 6, 3, 3, f_hidden=(5,)), 0)
        rng = np.random.default_rng(8)
        self.X = rng.standard_normal((12, 4))

    def test_representation_shapes(self):
        shapes = {name: representation(self.params, self.X, name).shape for name in
                  ("phi", "phi_star", "concat", "features_f", "phi_reinit")}
        assert shapes == {"phi": (12, 3), "phi_star": (12, 3), "concat": (12, 6),
                          "features_f": (12, 6), "phi_reinit": (12, 3)}

    def test_unknown_representation(self):
        with pytest.raises(ValueError):
            representation(self.params, self.X, "psi")

    def test_report_rows(self):
        from shared_dml.dataset import Dataset

        ds = Dataset(self.X, np.repeat(np.arange(3), 4), 3, shared_factors=np.tile([0, 1], 6))
        reports = evaluate(self.params, ds, "test", ["phi", "concat"], epoch=2, ks=(1, 2), nmi_restarts=2, shared_recall=True)
        rows = [r for rep in reports for r in rep.rows()]
        assert {r[3] for r in rows} == {"recall@1", "recall@2", "nmi", "shared_recall@1"}
        assert all(r[0] == 2 and r[1] == "test" and 0.0 <= r[4] <= 1.0 for r in rows)

    def test_report_without_nmi(self):
        rep = MetricsReport(0, "train", "phi", {1: 0.5})
        assert rep.rows() == [(0, "train", "phi", "recall@1", 0.5)]
