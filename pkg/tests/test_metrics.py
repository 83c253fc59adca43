import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recapdet.metrics import (
    ScoredSample,
    apcer_at_bpcer,
    apcer_bpcer,
    auc,
    bpcer_threshold,
    eer,
    roc_points,
)


def samples_from(bona, attack):
    return [ScoredSample(float(v), "bona_fide") for v in bona] + [
        ScoredSample(float(v), "attack") for v in attack
    ]


def brute_force_auc(bona, attack):
    wins = 0.0
    for b in bona:
        for a in attack:
            wins += 1.0 if b > a else (0.5 if b == a else 0.0)
    return wins / (len(bona) * len(attack))


def trapezoid_auc(bona, attack):
    """Independent ROC-integration oracle."""
    thresholds = np.unique(np.concatenate([bona, attack]))
    candidates = np.concatenate(([-np.inf], (thresholds[:-1] + thresholds[1:]) / 2, [np.inf]))
    points = sorted(
        (float(np.mean(attack >= t)), float(np.mean(bona >= t))) for t in candidates
    )
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


def brute_force_eer(bona, attack):
    # integer-count arithmetic so mathematically tied gaps compare as ties
    bona, attack = np.asarray(bona), np.asarray(attack)
    n_b, n_a = bona.size, attack.size
    thresholds = np.unique(np.concatenate([bona, attack]))
    candidates = np.concatenate(([-np.inf], (thresholds[:-1] + thresholds[1:]) / 2, [np.inf]))
    best = None
    for t in candidates:
        k_a = int(np.sum(attack >= t))
        k_b = int(np.sum(bona < t))
        gap = abs(k_a * n_b - k_b * n_a)  # |apcer - bpcer| * n_a * n_b
        key = (gap, t)
        if best is None or key < best[0]:
            best = (key, (k_a / n_a + k_b / n_b) / 2)
    return best[1]


class TestWorkedExamples:
    def test_perfect_separation(self):
        s = samples_from([0.9, 0.8], [0.1, 0.2])
        assert apcer_bpcer(s, 0.5) == (0.0, 0.0)
        assert auc(s) == 1.0
        assert eer(s)[0] == 0.0

    def test_apcer_bpcer_counts(self):
        s = samples_from([0.8, 0.7, 0.9, 0.6], [0.5, 0.65, 0.3, 0.2])
        apcer, bpcer = apcer_bpcer(s, 0.6)
        assert apcer == 0.25  # only the 0.65 attack is accepted
        assert bpcer == 0.0

    def test_infinite_threshold_rejects_everything(self):
        s = samples_from([0.8, 0.7], [0.5, 0.2])
        assert apcer_bpcer(s, np.inf) == (0.0, 1.0)

    def test_eer_one_third(self):
        s = samples_from([0.9, 0.8, 0.7], [0.2, 0.3, 0.75])
        value, threshold = eer(s)
        assert value == pytest.approx(1 / 3)
        assert 0.7 < threshold < 0.75

    def test_eer_indistinguishable_classes(self):
        s = samples_from([0.1, 0.5, 0.9], [0.1, 0.5, 0.9])
        assert eer(s)[0] == 0.5

    def test_auc_three_quarters(self):
        s = samples_from([0.9, 0.4], [0.6, 0.1])
        assert auc(s) == 0.75

    def test_auc_identical_multisets(self):
        s = samples_from([0.2, 0.7], [0.2, 0.7])
        assert auc(s) == 0.5

    def test_apcer_at_bpcer_zero(self):
        s = samples_from([0.8, 0.7, 0.9, 0.6], [0.5, 0.65, 0.3, 0.2])
        apcer, theta = apcer_at_bpcer(s, 0.0)
        assert theta == 0.6
        assert apcer == 0.25

    def test_apcer_at_bpcer_one(self):
        s = samples_from([0.8, 0.7], [0.5, 0.2])
        apcer, theta = apcer_at_bpcer(s, 1.0)
        assert theta == np.inf
        assert apcer == 0.0


class TestOrderStatisticThreshold:
    def test_toy_case(self):
        assert bpcer_threshold([0.6, 0.7, 0.8, 0.9], 0.0) == 0.6

    def test_consistency_on_random_sets(self):
        rng = np.random.default_rng(99)
        for _ in range(25):
            bona = rng.uniform(0, 1, 100)
            theta = bpcer_threshold(bona, 0.05)
            assert np.mean(bona < theta) <= 0.05
            larger = np.unique(np.concatenate([bona, [np.inf]]))
            above = larger[larger > theta]
            if above.size:
                assert np.mean(bona < above[0]) > 0.05

    def test_target_bounds_checked(self):
        with pytest.raises(ValueError):
            bpcer_threshold([0.5], 1.5)


class TestOracleEquivalence:
    def test_random_score_sets(self):
        rng = np.random.default_rng(1234)
        for trial in range(200):
            n_b = int(rng.integers(2, 30))
            n_a = int(rng.integers(2, 30))
            # mix continuous scores with deliberate ties
            bona = np.round(rng.uniform(0, 1, n_b), 2)
            attack = np.round(rng.uniform(0, 1, n_a), 2)
            s = samples_from(bona, attack)
            assert auc(s) == pytest.approx(brute_force_auc(bona, attack), abs=1e-12)
            assert auc(s) == pytest.approx(trapezoid_auc(bona, attack), abs=1e-9)
            assert eer(s)[0] == pytest.approx(brute_force_eer(bona, attack), abs=1e-12)
            target = float(rng.uniform(0, 1))
            apcer, theta = apcer_at_bpcer(s, target)
            assert np.mean(bona < theta) <= target + 1e-12
            assert apcer == pytest.approx(float(np.mean(attack >= theta)), abs=1e-12)

    def test_eer_value_in_half_range(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            bona = rng.normal(0.7, 0.2, 20)
            attack = rng.normal(0.3, 0.2, 20)
            value, theta = eer(samples_from(bona, attack))
            assert 0.0 <= value <= 0.5 + 1e-12
            a, b = apcer_bpcer(samples_from(bona, attack), theta)
            assert abs(a - b) <= max(1 / 20, 1e-12) + 1e-12


class TestRankInvariance:
    @given(
        bona=st.lists(st.floats(0.01, 1), min_size=2, max_size=20),
        attack=st.lists(st.floats(0.01, 1), min_size=2, max_size=20),
    )
    @settings(max_examples=100, deadline=None)
    def test_cubing_scores_changes_nothing(self, bona, attack):
        s = samples_from(bona, attack)
        cubed = samples_from([v**3 for v in bona], [v**3 for v in attack])
        assert auc(cubed) == pytest.approx(auc(s), abs=1e-12)
        assert eer(cubed)[0] == pytest.approx(eer(s)[0], abs=1e-12)
        target = 0.1
        assert apcer_at_bpcer(cubed, target)[0] == pytest.approx(apcer_at_bpcer(s, target)[0], abs=1e-12)


class TestValidation:
    def test_missing_class_rejected(self):
        with pytest.raises(ValueError):
            auc([ScoredSample(0.5, "bona_fide")])
        with pytest.raises(ValueError):
            eer([ScoredSample(0.5, "attack")])

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValueError):
            ScoredSample(float("nan"), "attack")

    def test_unknown_label_rejected(self):
        with pytest.raises(ValueError):
            ScoredSample(0.5, "spoof")

    def test_roc_points_cover_both_ends(self):
        points = roc_points(samples_from([0.9, 0.8], [0.1, 0.2]))
        assert points[0][1:] == (1.0, 0.0)  # accept everything
        assert points[-1][1:] == (0.0, 1.0)  # reject everything
