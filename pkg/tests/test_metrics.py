import numpy as np
import pytest
from sklearn.metrics import f1_score, recall_score

from fedgeo.errors import ContractError
from fedgeo.metrics import MetricsRow, compute_metrics


class TestHandCases:
    def test_all_correct(self):
        m = compute_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3)
        assert m.accuracy == 1.0
        assert m.error_rate == 0.0
        assert m.mae == 0.0
        assert m.average_accuracy == 1.0
        assert m.macro_f1 == 1.0

    def test_two_class_half_right(self):
        m = compute_metrics([0, 0], [0, 1], 2)
        assert m.accuracy == 0.5
        assert m.average_accuracy == 0.5  # recalls 1.0 and 0.0
        assert m.mae == 0.5
        assert m.error_rate == 0.5

    def test_index_distance_mae(self):
        m = compute_metrics([0, 3], [3, 3], 4)
        assert m.mae == 1.5  # |0-3| and |3-3|
        assert m.error_rate == 0.5


class TestIdentities:
    def test_error_rate_is_exactly_one_minus_accuracy(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 200))
            c = int(rng.integers(2, 7))
            pred = rng.integers(0, c, size=n)
            true = rng.integers(0, c, size=n)
            m = compute_metrics(pred, true, c)
            assert m.error_rate == 1.0 - m.accuracy

    def test_mae_at_least_error_rate(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(1, 100))
            c = int(rng.integers(2, 10))
            pred = rng.integers(0, c, size=n)
            true = rng.integers(0, c, size=n)
            m = compute_metrics(pred, true, c)
            assert m.mae >= m.error_rate

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        pred = rng.integers(0, 4, size=60)
        true = rng.integers(0, 4, size=60)
        m1 = compute_metrics(pred, true, 4)
        perm = rng.permutation(60)
        m2 = compute_metrics(pred[perm], true[perm], 4)
        assert m1 == m2


class TestPerClassMetrics:
    def test_average_accuracy_skips_empty_classes(self):
        # class 2 has no support: AA averages recalls of classes 0 and 1 only
        m = compute_metrics([0, 1, 1], [0, 1, 1], 3)
        assert m.average_accuracy == 1.0

    def test_macro_f1_counts_undefined_as_zero(self):
        # class 2 never appears in labels or predictions: F1 contributes 0
        m = compute_metrics([0, 1, 1], [0, 1, 1], 3)
        assert m.macro_f1 == pytest.approx(2.0 / 3.0)

    def test_matches_sklearn(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            c = int(rng.integers(2, 6))
            n = int(rng.integers(5, 80))
            pred = rng.integers(0, c, size=n)
            true = rng.integers(0, c, size=n)
            m = compute_metrics(pred, true, c)
            sk_f1 = f1_score(true, pred, labels=list(range(c)), average="macro",
                             zero_division=0)
            assert m.macro_f1 == pytest.approx(sk_f1, abs=1e-12)
            support = [cid for cid in range(c) if (true == cid).any()]
            sk_recalls = recall_score(true, pred, labels=support, average="macro",
                                      zero_division=0)
            assert m.average_accuracy == pytest.approx(sk_recalls, abs=1e-12)


class TestContracts:
    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            compute_metrics([0, 1], [0], 2)

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            compute_metrics([], [], 2)

    def test_out_of_range_rejected(self):
        with pytest.raises(ContractError):
            compute_metrics([0, 2], [0, 1], 2)

    def test_metrics_row_validates_identity(self):
        with pytest.raises(ContractError):
            MetricsRow(accuracy=0.8, average_accuracy=0.8, macro_f1=0.8,
                       error_rate=0.1, mae=0.5)
