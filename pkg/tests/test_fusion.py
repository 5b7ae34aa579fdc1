import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import (
    oracle_predict_label,
    oracle_select_task,
    oracle_test_class,
    oracle_train_label,
    raw_matrices,
)
from ssdg.errors import ConfigError, ContractError
from ssdg.fusion import (
    TEST_RULES,
    TRAIN_RULES,
    FusionScheme,
    batch_pseudo_labels,
    batch_test_predict,
    predict_label,
    select_task,
    test_predict as fuse_test,
    train_pseudo_label,
)


class TestPredictLabel:
    def test_worked_example(self):
        y = [[0.9, 0.2], [0.05, 0.7], [0.05, 0.1]]
        np.testing.assert_array_equal(predict_label(y), [1, 0, 0])

    def test_tie_lowest_index(self):
        np.testing.assert_array_equal(predict_label(np.eye(2)), [1, 0])

    def test_single_column(self):
        np.testing.assert_array_equal(predict_label([[0.1], [0.8], [0.1]]), [0, 1, 0])

    def test_empty(self):
        with pytest.raises(ContractError):
            predict_label(np.zeros((0, 2)))


class TestSelectTask:
    def test_worked_example(self):
        np.testing.assert_array_equal(select_task([[0.2, 0.8], [0.5, 0.1]]), [0.8, 0.1])

    def test_single_column(self):
        np.testing.assert_array_equal(select_task([[0.3], [0.7]]), [0.3, 0.7])

    def test_identical_columns_pick_first(self):
        y = np.array([[0.3, 0.3], [0.7, 0.7]])
        np.testing.assert_array_equal(select_task(y), y[:, 0])

    def test_empty(self):
        with pytest.raises(ContractError):
            select_task(np.zeros((2, 0)))


class TestTrainPseudoLabel:
    def test_agreement(self):
        yi = np.array([0.2, 0.5, 0.3])
        y = np.stack([yi, [0.1, 0.1, 0.8], yi], axis=1)
        for rule in TRAIN_RULES:
            assert train_pseudo_label(y, 0, FusionScheme(rule, "avg")).class_index == 1

    def test_max_and_avg(self):
        # N = 1: columns are [y_1, y_global]
        y = np.array([[0.6, 0.1], [0.4, 0.9]])
        pl_max = train_pseudo_label(y, 0, FusionScheme("max", "avg"))
        pl_avg = train_pseudo_label(y, 0, FusionScheme("avg", "avg"))
        pl_loc = train_pseudo_label(y, 0, FusionScheme("local-only", "avg"))
        assert (pl_max.class_index, pl_max.confidence) == (1, 0.9)
        assert pl_avg.class_index == 1 and pl_avg.confidence == pytest.approx(0.65)
        assert (pl_loc.class_index, pl_loc.confidence) == (0, 0.6)

    def test_threshold(self):
        low = np.array([[0.9, 0.9], [0.1, 0.1]])
        high = np.array([[0.96, 0.96], [0.04, 0.04]])
        s = FusionScheme("max", "avg")
        assert not train_pseudo_label(low, 0, s, tau=0.95).retained
        assert train_pseudo_label(high, 0, s, tau=0.95).retained

    def test_domain_out_of_range(self):
        with pytest.raises(IndexError):
            train_pseudo_label(np.full((2, 3), 0.5), 2, FusionScheme())


class TestTestPredict:
    def test_unanimous(self):
        col = np.array([0.1, 0.6, 0.3])
        y = np.stack([col] * 4, axis=1)
        for rule in TEST_RULES:
            assert fuse_test(y, FusionScheme("max", rule)) == 1

    def test_worked_example(self):
        y = np.array([[0.7, 0.2, 0.45], [0.3, 0.8, 0.55]])
        np.testing.assert_array_equal(select_task(y[:, :2]), [0.2, 0.8])
        assert fuse_test(y, FusionScheme("max", "avg"), n_domains=2) == 1
        assert fuse_test(y, FusionScheme("max", "avg-all"), n_domains=2) == 1
        assert fuse_test(y, FusionScheme("max", "global-only"), n_domains=2) == 1
        assert fuse_test(y, FusionScheme("max", "max"), n_domains=2) == 1

    def test_column_count_checked(self):
        with pytest.raises(ContractError):
            fuse_test(np.full((2, 3), 0.5), FusionScheme(), n_domains=3)

    def test_scheme_validation(self):
        with pytest.raises(ConfigError):
            FusionScheme("median", "avg")
        with pytest.raises(ConfigError):
            FusionScheme("max", "vote")


prob_matrix = st.integers(2, 4).flatmap(
    lambda c: st.integers(2, 4).flatmap(
        lambda n: arrays(np.float64, (c, n), elements=st.floats(0.01, 1.0))
    )
).map(lambda m: m / m.sum(axis=0, keepdims=True))


class TestFusionProperties:
    @settings(max_examples=200, deadline=None)
    @given(prob_matrix)
    def test_predict_label_hits_global_max(self, y):
        out = predict_label(y)
        assert out.sum() == 1.0
        assert y[int(out.argmax())].max() == y.max()

    @settings(max_examples=200, deadline=None)
    @given(prob_matrix)
    def test_select_task_holds_global_max(self, y):
        assert select_task(y).max() == y.max()

    @settings(max_examples=200, deadline=None)
    @given(prob_matrix, st.integers(-6, 6))
    def test_positive_scaling_invariance(self, y, k):
        # powers of two scale exactly, so exact ties stay ties
        lam = 2.0**k
        for rule in TEST_RULES:
            assert fuse_test(lam * y, rule) == fuse_test(y, rule)
        for rule in TRAIN_RULES:
            a = train_pseudo_label(lam * y, 0, FusionScheme(rule, "avg"), tau=0.0)
            b = train_pseudo_label(y, 0, FusionScheme(rule, "avg"), tau=0.0)
            assert a.class_index == b.class_index

    @settings(max_examples=200, deadline=None)
    @given(prob_matrix, st.randoms())
    def test_permutation_equivariance(self, y, rnd):
        perm = list(range(y.shape[0]))
        rnd.shuffle(perm)
        yp = y[perm]
        # ties are broken by index, so only compare when the winner is unique
        for rule in TEST_RULES:
            c = fuse_test(y, rule)
            cp = fuse_test(yp, rule)
            if np.unique(y, axis=None).size == y.size:
                assert perm[cp] == c

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 4).flatmap(lambda n: arrays(np.float64, (5, 3, n), elements=st.floats(0, 1))))
    def test_batch_matches_scalar(self, ys):
        n_domains = ys.shape[2] - 1
        for rule in TRAIN_RULES:
            for i in range(n_domains):
                cls, conf, keep = batch_pseudo_labels(ys, i, rule, tau=0.5)
                for b in range(len(ys)):
                    pl = train_pseudo_label(ys[b], i, rule, tau=0.5)
                    assert (pl.class_index, pl.confidence, pl.retained) == (cls[b], conf[b], keep[b])
        for rule in TEST_RULES:
            got = batch_test_predict(ys, rule)
            assert got.tolist() == [fuse_test(y, rule) for y in ys]

    def test_single_column_degeneracy(self):
        col = np.array([[0.2], [0.5], [0.3]])
        assert predict_label(col).argmax() == 1
        np.testing.assert_array_equal(select_task(col), col[:, 0])


def test_small_raw_grid_matches_oracle():
    """Unconstrained entries on the 0.1 grid for every shape with C * n <= 4."""
    for c in (1, 2, 3):
        for n in (1, 2, 3):
            if c * n > 4:
                continue
            for m in raw_matrices(c, n):
                y = np.array(m)
                assert predict_label(y).tolist() == oracle_predict_label(m)
                assert select_task(y).tolist() == oracle_select_task(m)
                if n < 2:
                    continue
                for rule in TRAIN_RULES:
                    for i in range(n - 1):
                        pl = train_pseudo_label(y, i, rule)
                        assert (pl.class_index, pl.confidence) == oracle_train_label(m, i, rule)
                for rule in TEST_RULES:
                    assert fuse_test(y, rule) == oracle_test_class(m, rule)
