import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cafcn import metrics as M
from cafcn import oracles
from cafcn.selftest import metric_oracle_gaps, random_map_pair, reference_metric_gaps


def _half():
    g = np.zeros((8, 8), dtype=bool)
    g[:4] = True
    return g


# --- oracle equivalence --------------------------------------------------------

def test_confusion_counts_equal_pixel_counting():
    gaps = metric_oracle_gaps(seed=21, pairs=30)
    assert gaps["counts"] == 0 and gaps["curves"] == 0.0


def test_scalar_metrics_match_hand_formulas():
    gaps = metric_oracle_gaps(seed=22, pairs=30)
    assert gaps["f_beta"] <= 1e-12 and gaps["mae"] <= 1e-12
    assert gaps["auc"] <= 1e-9 and gaps["ap"] <= 1e-9


def test_auc_equals_pairwise_ranking_probability():
    rng = np.random.default_rng(3)
    for _ in range(20):
        s, g = random_map_pair(rng)
        assert M.auc(M.roc_curve(s, g)) == pytest.approx(oracles.auc_pair_counting(s, g), abs=1e-12)


def test_weighted_f_and_s_measure_match_loop_versions():
    wf, sm = reference_metric_gaps(seed=4, pairs=20)
    assert wf <= 1e-12 and sm <= 1e-12


# --- hand values ---------------------------------------------------------------

def test_f_beta_hand_values():
    assert M.f_beta(0.8, 0.4) == pytest.approx(1.3 * 0.32 / (0.24 + 0.4), abs=1e-15)
    assert M.f_beta(0.0, 0.0) == 0.0


def test_all_ones_map_on_half_mask():
    s = np.ones((8, 8))
    g = _half()
    # every threshold predicts everything: P = 0.5, R = 1
    assert M.f_beta_report(s, g) == pytest.approx(1.3 * 0.5 / 1.15, abs=1e-12)
    assert M.f_beta_report(s, g) == pytest.approx(0.5652, abs=1e-4)
    assert M.mae(s, g) == 0.5


def test_mae_hand_value():
    assert M.mae(np.full((2, 2), 0.4), np.zeros((2, 2), dtype=bool)) == pytest.approx(0.4)


def test_perfect_prediction_scores_one():
    g = _half()
    r = M.evaluate_image(g.astype(float), g)
    assert (r.f_beta, r.mae, r.auc, r.ap, r.s_measure) == (1.0, 0.0, 1.0, 1.0, pytest.approx(1.0, abs=1e-12))
    assert r.f_beta_w == pytest.approx(1.0, abs=1e-12)


def test_quantization_half_up():
    assert M.to_levels(np.array([0.5, 0.0, 1.0, 1.0 / 255.0, 0.5 / 255.0])).tolist() == [128, 0, 255, 1, 1]


def test_empty_prediction_has_precision_one():
    g = _half()
    pr = M.pr_curve(np.zeros((8, 8)), g)
    assert pr[255, 0] == 1.0 and pr[255, 1] == 0.0
    assert pr[0, 0] == 0.5


def test_standard_fpr():
    g = _half()
    s = np.zeros((8, 8))
    s[4:6] = 1.0  # 16 of 32 background pixels fire
    roc = M.roc_curve(s, g)
    assert roc[200].tolist() == [0.5, 0.0]


def test_s_measure_special_cases():
    s = np.full((4, 4), 0.3)
    assert M.s_measure(s, np.zeros((4, 4))) == pytest.approx(0.7)
    assert M.s_measure(s, np.ones((4, 4))) == pytest.approx(0.3)
    # 1-based centroid 1.5 rounds half up
    assert M.centroid(np.pad(np.ones((2, 2), bool), ((0, 2), (0, 2)))) == (2, 2)


def test_s_measure_region_order():
    s = np.random.default_rng(0).random((8, 8))
    g = _half()
    expect = 0.3 * M.s_region(s, g) + 0.7 * M.s_object(s, g)
    assert M.s_measure(s, g, alpha=0.3) == pytest.approx(max(0.0, expect), abs=1e-15)


def test_adaptive_threshold():
    s = np.full((4, 4), 0.2)
    assert M.adaptive_threshold_level(s) == M.to_levels(0.4)
    assert M.adaptive_threshold_level(np.full((2, 2), 0.9)) == 255


def test_degenerate_mask():
    with pytest.raises(M.DegenerateMask):
        M.pr_curve(np.ones((4, 4)), np.zeros((4, 4)))
    r = M.evaluate_dataset([(np.zeros((4, 4)), np.zeros((4, 4))),
                            (np.ones((4, 4)), np.ones((4, 4)))])
    assert r.n_images == 2 and r.n_degenerate == 1
    assert r.f_beta == 1.0 and r.mae == 0.0


# --- dataset aggregation and export -------------------------------------------

def test_dataset_is_mean_of_images():
    rng = np.random.default_rng(9)
    a = random_map_pair(rng)
    b = random_map_pair(rng)
    ra, rb = M.evaluate_image(*a), M.evaluate_image(*b)
    both = M.evaluate_dataset([a, b])
    for k in M.METRIC_KEYS:
        assert getattr(both, k) == pytest.approx((getattr(ra, k) + getattr(rb, k)) / 2, abs=1e-15)
    np.testing.assert_allclose(both.pr_curve, (ra.pr_curve + rb.pr_curve) / 2)


def test_duplicated_image_same_report():
    pair = random_map_pair(np.random.default_rng(10))
    assert M.format_report(M.evaluate_dataset([pair])).replace("n_images=1", "") == \
        M.format_report(M.evaluate_dataset([pair, pair])).replace("n_images=2", "")


def test_report_format_and_parse():
    r = M.evaluate_dataset([random_map_pair(np.random.default_rng(11))])
    text = M.format_report(r)
    lines = text.splitlines()
    assert lines[0] == "# f_beta statistic: max"
    assert [ln.split("=")[0] for ln in lines[1:]] == list(M.METRIC_KEYS) + ["n_images", "n_degenerate"]
    parsed = M.parse_report(text)
    assert set(parsed) == set(M.METRIC_KEYS) | {"n_images", "n_degenerate"}
    assert parsed["mae"] == pytest.approx(r.mae, abs=1e-10)


def test_curves_csv():
    r = M.evaluate_dataset([random_map_pair(np.random.default_rng(12))])
    lines = M.format_curves(r).splitlines()
    assert lines[0] == "threshold,precision,recall,fpr,tpr"
    assert len(lines) == 257
    assert lines[1].startswith("0,") and lines[-1].startswith("255,")


# --- properties ---------------------------------------------------------------

maps = hnp.arrays(np.float64, (6, 6), elements=st.floats(0.0, 1.0))
masks = hnp.arrays(np.bool_, (6, 6)).filter(lambda g: g.any() and not g.all())


@settings(max_examples=60, deadline=None)
@given(s=maps, g=masks)
def test_scalar_metrics_in_unit_interval(s, g):
    r = M.evaluate_image(s, g)
    for k in M.METRIC_KEYS:
        assert 0.0 <= getattr(r, k) <= 1.0 + 1e-12, k


@settings(max_examples=60, deadline=None)
@given(s=maps, g=masks)
def test_mae_complement_symmetry(s, g):
    assert M.mae(s, g) == pytest.approx(M.mae(1.0 - s, ~g), abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(s=maps, g=masks)
def test_recall_non_increasing(s, g):
    recall = M.pr_curve(s, g)[:, 1]
    assert np.all(np.diff(recall) <= 0)
    fpr = M.roc_curve(s, g)[:, 0]
    assert np.all(np.diff(fpr) <= 0)


@settings(max_examples=100, deadline=None)
@given(p=st.floats(0.0, 1.0), r=st.floats(0.0, 1.0), b=st.floats(0.05, 4.0))
def test_f_beta_bounds(p, r, b):
    assert M.f_beta(p, r, b) <= max(p, r) + 1e-12
    assert M.f_beta(p, p, b) == pytest.approx(p, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(s=maps, g=masks, dup=st.lists(st.integers(0, 255), min_size=1, max_size=20))
def test_area_robust_to_duplicate_points(s, g, dup):
    roc = M.roc_curve(s, g)
    pr = M.pr_curve(s, g)
    roc2, pr2 = roc, pr
    for k in sorted(dup, reverse=True):
        roc2 = np.insert(roc2, k, roc2[k], axis=0)
        pr2 = np.insert(pr2, k, pr2[k], axis=0)
    assert M.auc(roc2) == pytest.approx(M.auc(roc), abs=1e-15)
    assert M.ap(pr2) == pytest.approx(M.ap(pr), abs=1e-15)
