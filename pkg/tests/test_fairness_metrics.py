import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fams.errors import DataError
from fams.fairness_metrics import (
    ScoredDataset,
    accuracy,
    calibration_curve,
    dp_gap,
    eo_gap,
    sufficiency_gap,
    tables_to_csv,
)
from fams.numerics import SeededRng

from oracles import discrete_dp_gap, discrete_eo_gap, discrete_sufficiency_gap

CENTERS = [0.05, 0.15, 0.25, 0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95]


def appendix_a(n, seed=0):
    """Scores independent of everything; label means 0.8 / 0.2 in two equal groups."""
    r = SeededRng(seed)
    groups = np.repeat([0, 1], n // 2)
    p = np.where(groups == 0, 0.8, 0.2)
    return ScoredDataset(r.uniform(n), (r.uniform(n) < p).astype(float), groups)


def random_discrete(seed):
    r = SeededRng(seed)
    n = int(r.integers(4, 51))
    k = int(r.integers(2, 5))
    levels = np.array(CENTERS)[r.choice(10, int(r.integers(1, 6)), replace=False)]
    groups = np.concatenate([np.arange(k), r.integers(0, k, n - k)])
    scores = levels[r.integers(0, len(levels), n)]
    labels = (r.uniform(n) < 0.5).astype(float)
    return scores, labels, groups


# --------------------------------------------------------------- sufficiency

def test_hard_predictor_equal_to_labels_has_zero_gap():
    y = np.array([0, 1, 0, 1, 1, 0, 0, 1], dtype=float)
    g = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    assert sufficiency_gap(ScoredDataset(y, y, g)).overall_gap == pytest.approx(0.0, abs=1e-12)


HAND_SCORES = [0.12, 0.14, 0.26, 0.18, 0.16]
HAND_LABELS = [0, 1, 1, 1, 0]
HAND_GROUPS = ["A", "A", "A", "B", "B"]


@pytest.mark.parametrize("weighting,expected", [
    # group A, bin 1: 0.5 + (0.15 - 0.13) / (0.26 - 0.13) * (1 - 0.5) interpolated towards bin 2
    ("group", (2 / 3 * (0.02 / 0.13 * 0.5) + 0.0) / 2),
    ("global", (4 / 5 * (0.02 / 0.13 * 0.5) + 1 / 5 * 0.5) / 2),
    ("unweighted", ((0.02 / 0.13 * 0.5) + 0.5) / 2),
])
def test_interpolation_hand_example(weighting, expected):
    data = ScoredDataset(HAND_SCORES, HAND_LABELS, HAND_GROUPS)
    assert sufficiency_gap(data, 10, weighting).overall_gap == pytest.approx(expected, abs=1e-12)


def test_hand_example_per_group_values():
    rep = sufficiency_gap(ScoredDataset(HAND_SCORES, HAND_LABELS, HAND_GROUPS))
    assert rep.per_group_gap["A"] == pytest.approx(2 / 39, abs=1e-12)
    assert rep.per_group_gap["B"] == pytest.approx(0.0, abs=1e-12)
    assert rep.overall_gap == np.mean(list(rep.per_group_gap.values()))


def test_appendix_a_construction():
    data = appendix_a(10**5)
    assert sufficiency_gap(data).overall_gap == pytest.approx(0.3, abs=0.02)
    assert dp_gap(data) <= 0.01
    assert eo_gap(data) <= 0.01


def test_matches_discrete_oracle_on_random_instances():
    for seed in range(200):
        s, y, g = random_discrete(seed)
        want, per = discrete_sufficiency_gap(s.tolist(), y.tolist(), g.tolist())
        rep = sufficiency_gap(ScoredDataset(s, y, g))
        assert abs(rep.overall_gap - want) <= 1e-9
        for k, v in per.items():
            assert abs(rep.per_group_gap[k] - v) <= 1e-9


def test_identical_group_mechanisms_have_small_gap():
    r = SeededRng(5)
    n = 10**5
    s = r.uniform(n)
    data = ScoredDataset(s, (r.uniform(n) < s).astype(float), r.integers(0, 3, n))
    assert sufficiency_gap(data).overall_gap <= 0.02


def test_constant_predictor_reduces_to_base_rate_spread():
    # one occupied bin: gap = mean_a |E[Y] - E[Y | A=a]|
    y = np.array([1, 1, 1, 0, 1, 0, 0, 0, 0, 0], dtype=float)
    g = np.array([0] * 5 + [1] * 5)
    rep = sufficiency_gap(ScoredDataset(np.full(10, 0.5), y, g))
    assert rep.overall_gap == pytest.approx(0.4, abs=1e-12)


def test_sufficiency_needs_two_groups():
    with pytest.raises(DataError):
        sufficiency_gap(ScoredDataset([0.1, 0.9], [0, 1], [0, 0]))


def test_sufficiency_needs_two_bins():
    with pytest.raises(ValueError):
        sufficiency_gap(ScoredDataset([0.1, 0.9], [0, 1], [0, 1]), bins=1)
    with pytest.raises(ValueError):
        sufficiency_gap(ScoredDataset([0.1, 0.9], [0, 1], [0, 1]), weighting="mass")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_sufficiency_permutation_and_relabel_invariant(seed):
    r = SeededRng(seed)
    n = 60
    s = r.uniform(n)
    y = (r.uniform(n) < s).astype(float)
    g = np.concatenate([[0, 1, 2], r.integers(0, 3, n - 3)])
    base = sufficiency_gap(ScoredDataset(s, y, g)).overall_gap
    perm = r.choice(n, n, replace=False)
    assert sufficiency_gap(ScoredDataset(s[perm], y[perm], g[perm])).overall_gap == pytest.approx(base, abs=1e-12)
    relabel = np.array(["z", "x", "y"])[g]
    assert sufficiency_gap(ScoredDataset(s, y, relabel)).overall_gap == pytest.approx(base, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_metrics_lie_in_unit_interval(seed):
    r = SeededRng(seed)
    n = 30
    s = r.uniform(n)
    y = np.concatenate([[0.0, 1.0], (r.uniform(n - 2) < 0.5).astype(float)])
    g = np.concatenate([[0, 1], r.integers(0, 2, n - 2)])
    data = ScoredDataset(s, y, g)
    for weighting in ("group", "global"):
        assert 0.0 <= sufficiency_gap(data, weighting=weighting).overall_gap <= 1.0
    assert 0.0 <= dp_gap(data) <= 1.0
    assert 0.0 <= eo_gap(data) <= 1.0


def test_report_serialises(tmp_path):
    rep = sufficiency_gap(ScoredDataset(HAND_SCORES, HAND_LABELS, HAND_GROUPS))
    d = rep.to_dict()
    assert d["bin_count"] == 10 and d["weighting"] == "group" and d["empty_bin_policy"] == "nearest"
    assert set(d["per_group_gap"]) == {"A", "B"}
    assert '"overall_gap"' in rep.to_json()


# ------------------------------------------------------------------- DP / EO

def test_dp_constant_predictor_zero():
    assert dp_gap(ScoredDataset(np.full(6, 0.3), [0, 1, 0, 1, 1, 0], [0, 0, 0, 1, 1, 1])) == 0.0


def test_dp_two_groups_hand_value():
    data = ScoredDataset([0.2, 0.2, 0.8, 0.8], [0, 1, 0, 1], ["a", "a", "b", "b"])
    assert dp_gap(data) == pytest.approx(0.3, abs=1e-15)


def test_eo_constant_predictor_zero():
    assert eo_gap(ScoredDataset(np.full(6, 0.3), [0, 1, 0, 1, 1, 0], [0, 0, 0, 1, 1, 1])) == 0.0


def test_eo_eight_point_hand_value():
    # class 0: overall 0.15, group a 0.10, group b 0.20; class 1: overall 0.75, a 0.70, b 0.80
    s = [0.1, 0.1, 0.6, 0.8, 0.2, 0.2, 0.9, 0.7]
    y = [0, 0, 1, 1, 0, 0, 1, 1]
    g = ["a"] * 4 + ["b"] * 4
    assert eo_gap(ScoredDataset(s, y, g)) == pytest.approx(0.05, abs=1e-12)


def test_eo_skips_group_missing_a_class():
    s = [0.1, 0.5, 0.3, 0.9, 0.7]
    y = [0, 1, 0, 1, 1]
    g = ["a", "a", "b", "b", "c"]  # group c has no class-0 rows
    want = discrete_eo_gap(s, y, g)
    assert eo_gap(ScoredDataset(s, y, g)) == pytest.approx(want, abs=1e-12)


def test_eo_requires_both_classes():
    with pytest.raises(DataError):
        eo_gap(ScoredDataset([0.1, 0.2], [1, 1], [0, 1]))


def test_dp_eo_single_group_rejected():
    data = ScoredDataset([0.1, 0.2], [0, 1], [0, 0])
    with pytest.raises(DataError):
        dp_gap(data)
    with pytest.raises(DataError):
        eo_gap(data)


def test_dp_eo_match_oracles_on_random_instances():
    for seed in range(150):
        s, y, g = random_discrete(seed)
        if len(set(y)) < 2:
            continue
        data = ScoredDataset(s, y, g)
        assert abs(dp_gap(data) - discrete_dp_gap(s.tolist(), g.tolist())) <= 1e-9
        assert abs(eo_gap(data) - discrete_eo_gap(s.tolist(), y.tolist(), g.tolist())) <= 1e-9


def test_dp_eo_use_raw_scores_not_bins():
    a = appendix_a(2000, 3)
    sq = ScoredDataset(a.scores ** 2, a.labels, a.groups)
    # a monotone transform changes DP/EO values but the computation never bins
    assert dp_gap(sq) == pytest.approx(discrete_dp_gap(sq.scores.tolist(), sq.groups.tolist()), abs=1e-12)


# --------------------------------------------------------------- calibration

def test_calibrated_scores_have_small_reliability_error():
    r = SeededRng(8)
    s = r.uniform(10**5)
    t = calibration_curve(ScoredDataset(s, (r.uniform(10**5) < s).astype(float), np.zeros(10**5)))
    assert np.nanmax(np.abs(t.p - t.q)) <= 0.03


def test_constant_score_single_bin():
    y = np.array([1] * 7 + [0] * 3, dtype=float)
    t = calibration_curve(ScoredDataset(np.full(10, 0.7), y, np.zeros(10)))
    assert int(np.sum(t.n > 0)) == 1
    i = int(np.argmax(t.n))
    assert t.p[i] == pytest.approx(0.7, abs=1e-12) and t.q[i] == pytest.approx(0.7, abs=1e-12)


def test_calibration_matches_grouping_oracle():
    r = SeededRng(12)
    s = r.uniform(20)
    y = (r.uniform(20) < 0.5).astype(float)
    g = r.integers(0, 2, 20)
    t = calibration_curve(ScoredDataset(s, y, g), bins=5, group=1)
    for i in range(5):
        members = [(a, b) for a, b, c in zip(s, y, g) if c == 1 and i / 5 <= a < (i + 1) / 5]
        assert t.n[i] == len(members)
        if members:
            assert t.p[i] == pytest.approx(sum(a for a, _ in members) / len(members), abs=1e-12)
            assert t.q[i] == pytest.approx(sum(b for _, b in members) / len(members), abs=1e-12)
    assert t.n.sum() == np.sum(g == 1)


def test_calibration_score_one_falls_in_last_bin():
    t = calibration_curve(ScoredDataset([1.0, 0.0], [1, 0], [0, 0]), bins=4)
    assert t.n.tolist() == [1, 0, 0, 1]


def test_calibration_unknown_group():
    with pytest.raises(DataError):
        calibration_curve(ScoredDataset([0.5], [1], [0]), group=3)


def test_tables_to_csv_header_and_rows():
    t = calibration_curve(ScoredDataset([0.05, 0.95], [0, 1], ["g", "g"]), bins=2, group="g")
    lines = tables_to_csv([t]).splitlines()
    assert lines[0] == "bin_lo,bin_hi,p,q,n,group"
    assert lines[1] == "0.0,0.5,0.05,0.0,1,g"
    assert len(lines) == 3


# -------------------------------------------------------------------- inputs

@pytest.mark.parametrize("scores,labels,groups", [
    ([1.2], [1], [0]),
    ([0.5], [2], [0]),
    ([0.5, 0.5], [1], [0, 0]),
    ([], [], []),
    ([np.nan], [1], [0]),
])
def test_scored_dataset_validation(scores, labels, groups):
    with pytest.raises(DataError):
        ScoredDataset(scores, labels, groups)


def test_accuracy_threshold():
    assert accuracy([0.2, 0.5, 0.7, 0.4], [0, 1, 1, 1]) == 0.75
