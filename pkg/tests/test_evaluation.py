"""Reply parsing, metric suite vs the independent reference, agreement plots."""

from __future__ import annotations

import json
import math
import re

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nutrieval.errors import DataError
from nutrieval.evaluation import (
    InvalidReason,
    MIN_VALID_FRACTION,
    bland_altman,
    compute_metrics,
    format_metrics_table,
    metrics_report_dict,
    parse_prediction,
    render_bland_altman_svg,
    score_predictions,
    score_run,
)
from nutrieval.inference import BackendConfig, build_backend, persist_run, run_inference
from nutrieval.promptkit import PromptBundle, format_target
from nutrieval.recall_data import NUTRIENT_FIELDS, GroundTruth, NutrientVector

import reference_stats as ref


def vec(*values) -> NutrientVector:
    return NutrientVector(*values)


def const_vec(value) -> NutrientVector:
    return NutrientVector(*(value,) * 6)


def pairs_from_series(truth, pred):
    return [(const_vec(t), const_vec(p)) for t, p in zip(truth, pred)]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

TEN_SHOT_OUTPUTS = [
    "1630; 107.97; 233.28; 79.83; 27.7; 33.68",
    "1629; 43.29; 205.67; 113.29; 14.9; 74.29",
    "1293; 48.28; 135.41; 29.22; 13.2; 62.15",
    "2923; 81.63; 443.26; 206.48; 14.8; 93.63",
    "1338; 57.38; 162.67; 81.11; 8; 51.38",
    "2473; 129.47; 215.26; 71.96; 9.1; 121.12",
    "4270; 201.78; 503.17; 127.52; 38.9; 164.7",
    "854; 18.29; 126.89; 73.54; 4.5; 31.65",
    "1693; 51.67; 257.79; 83.32; 22; 51.17",
    "1742; 58.25; 278.91; 167.56; 7.9; 45.46",
]

MALFORMED_CORPUS = [
    ("", InvalidReason.EMPTY_REPLY),
    ("   ", InvalidReason.EMPTY_REPLY),
    (".", InvalidReason.EMPTY_REPLY),
    ("kcal: 1200; 50; 100; 40; 10; 30", InvalidReason.EXTRA_TEXT),
    ("Answer: 1; 2; 3; 4; 5; 6", InvalidReason.EXTRA_TEXT),
    ("Assistant: 1; 2; 3; 4; 5; 6", InvalidReason.EXTRA_TEXT),
    ("The total is 1630; 107; 233; 79; 27; 33", InvalidReason.EXTRA_TEXT),
    ("1630 kcal; 107.97; 233.28; 79.83; 27.7; 33.68", InvalidReason.EXTRA_TEXT),
    ("Sure! Here are the values:\n1; 2; 3; 4; 5; 6", InvalidReason.EXTRA_TEXT),
    ("1; 2; 3; 4; 5; 6 (approx)", InvalidReason.EXTRA_TEXT),
    ("1; 2; 3; 4; 5", InvalidReason.WRONG_FIELD_COUNT),
    ("1; 2; 3; 4; 5; 6; 7", InvalidReason.WRONG_FIELD_COUNT),
    ("1630", InvalidReason.WRONG_FIELD_COUNT),
    ("1;;2;3;4;5", InvalidReason.WRONG_FIELD_COUNT),
    ("1; 2; 3; 4; 5; 6;", InvalidReason.WRONG_FIELD_COUNT),
    ("N/A", InvalidReason.NON_NUMERIC_FIELD),
    ("one; two; three; four; five; six", InvalidReason.NON_NUMERIC_FIELD),
    ("1; 2; 3; 4; 5; 1.2.3", InvalidReason.NON_NUMERIC_FIELD),
    ("1, 2, 3, 4, 5, 6", InvalidReason.EXTRA_TEXT),
    ("-1; 2; 3; 4; 5; 6", InvalidReason.NEGATIVE_VALUE),
    ("1; 2; 3; 4; 5; -0.5", InvalidReason.NEGATIVE_VALUE),
]


def test_all_ten_shot_outputs_parse_valid():
    for raw in TEN_SHOT_OUTPUTS:
        parsed = parse_prediction(raw)
        assert parsed.valid, raw
        assert len(parsed.values.as_tuple()) == 6


def test_chicken_nuggets_example_values():
    parsed = parse_prediction("1293; 48.28; 135.41; 29.22; 13.2; 62.15")
    assert parsed.values == vec(1293, 48.28, 135.41, 29.22, 13.2, 62.15)


@pytest.mark.parametrize("raw,reason", MALFORMED_CORPUS)
def test_malformed_corpus(raw, reason):
    parsed = parse_prediction(raw)
    assert not parsed.valid
    assert parsed.reason == reason


def test_tolerated_surface_variation():
    assert parse_prediction("  1; 2; 3; 4; 5; 6  ").valid
    assert parse_prediction("1; 2; 3; 4; 5; 6.").valid
    assert parse_prediction("1;2;3;4;5;6").valid
    assert parse_prediction("1 ; 2 ; 3 ; 4 ; 5 ; 6").valid


def test_strict_mode_rejects_trailing_period():
    assert parse_prediction("1; 2; 3; 4; 5; 6.", strict=False).valid
    assert not parse_prediction("1; 2; 3; 4; 5; 6.", strict=True).valid


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=120))
def test_parser_totality(raw):
    parsed = parse_prediction(raw)
    assert parsed.valid or parsed.reason in InvalidReason


# ---------------------------------------------------------------------------
# metric hand cases
# ---------------------------------------------------------------------------


def test_perfect_agreement_metrics():
    pairs = [(const_vec(v), const_vec(v)) for v in (10, 20, 30)]
    metrics = compute_metrics(pairs)
    for m in metrics.per_nutrient.values():
        assert m.mse == 0 and m.mae == 0 and m.rmse == 0
        assert m.r2 == 1.0 and m.ccc == 1.0
        assert m.p_value == 1.0 and m.degenerate_t


def test_ccc_hand_case_four_sevenths():
    metrics = compute_metrics(pairs_from_series([1, 2, 3], [2, 3, 4]))
    m = metrics.per_nutrient["kcal"]
    assert m.ccc == pytest.approx(4 / 7, abs=1e-12)
    assert m.r2 == pytest.approx(-0.5, abs=1e-12)
    assert m.mae == pytest.approx(1.0, abs=1e-12)
    assert m.mse == pytest.approx(1.0, abs=1e-12)


def test_symmetric_differences_t_zero_p_one():
    truth = [10, 10, 10, 10]
    pred = [11, 9, 10, 10]  # differences (1, -1, 0, 0)
    m = compute_metrics(pairs_from_series(truth, pred)).per_nutrient["kcal"]
    assert m.t_stat == 0.0
    assert m.p_value == pytest.approx(1.0, abs=1e-12)


def test_zero_variance_differences_flagged_degenerate():
    truth = [10, 20, 30]
    shifted = [12, 22, 32]  # constant difference 2
    m = compute_metrics(pairs_from_series(truth, shifted)).per_nutrient["kcal"]
    assert m.degenerate_t
    assert m.p_value == 0.0
    m_same = compute_metrics(pairs_from_series(truth, truth)).per_nutrient["kcal"]
    assert m_same.degenerate_t and m_same.p_value == 1.0


def test_mape_excludes_zero_truth_pairs():
    truth = [0, 10, 20]
    pred = [5, 11, 18]
    m = compute_metrics(pairs_from_series(truth, pred)).per_nutrient["kcal"]
    assert m.mape == pytest.approx((0.1 + 0.1) / 2, abs=1e-12)
    assert m.mape_excluded_n == 1
    all_zero = compute_metrics(pairs_from_series([0, 0], [1, 2])).per_nutrient["kcal"]
    assert math.isnan(all_zero.mape)
    assert all_zero.mape_excluded_n == 2


def test_compute_metrics_rejects_empty():
    with pytest.raises(DataError):
        compute_metrics([])


# ---------------------------------------------------------------------------
# oracle equivalence on seeded random pairs
# ---------------------------------------------------------------------------


def _random_pairs(n=1000, seed=20240601):
    rng = np.random.default_rng(seed)
    truths, preds = [], []
    for mean, sd in ((1957, 946.29), (73.77, 40.99), (251.8, 127.48),
                     (114.38, 73.04), (13.56, 8.49), (74.34, 43.46)):
        t = np.clip(rng.normal(mean, sd, size=n), 0, None)
        noise = rng.normal(0, sd * 0.35, size=n)
        p = np.clip(t * rng.uniform(0.7, 1.1) + noise + rng.normal(0, 5), 0, None)
        truths.append(t)
        preds.append(p)
    truth_vecs = [NutrientVector(*(truths[j][i] for j in range(6))) for i in range(n)]
    pred_vecs = [NutrientVector(*(preds[j][i] for j in range(6))) for i in range(n)]
    return list(zip(truth_vecs, pred_vecs))


def _assert_close(mine, theirs, label):
    tolerance = max(1e-9, 1e-9 * abs(theirs))
    assert abs(mine - theirs) <= tolerance, f"{label}: {mine} vs {theirs}"


def test_metric_oracle_equivalence_1000_pairs():
    pairs = _random_pairs()
    metrics = compute_metrics(pairs)
    for idx, name in enumerate(NUTRIENT_FIELDS):
        truth = [t.as_tuple()[idx] for t, _ in pairs]
        pred = [p.as_tuple()[idx] for _, p in pairs]
        m = metrics.per_nutrient[name]
        _assert_close(m.mse, ref.ref_mse(truth, pred), f"{name} mse")
        _assert_close(m.mae, ref.ref_mae(truth, pred), f"{name} mae")
        _assert_close(m.mape, ref.ref_mape(truth, pred), f"{name} mape")
        _assert_close(m.rmse, ref.ref_rmse(truth, pred), f"{name} rmse")
        _assert_close(m.r2, ref.ref_r2(truth, pred), f"{name} r2")
        _assert_close(m.ccc, ref.ref_ccc(truth, pred), f"{name} ccc")
        t_ref, p_ref = ref.ref_paired_t(truth, pred)
        _assert_close(m.t_stat, t_ref, f"{name} t_stat")
        _assert_close(m.p_value, p_ref, f"{name} p_value")


def test_rmse_squared_equals_mse_and_mae_ordering():
    pairs = _random_pairs(n=300, seed=77)
    metrics = compute_metrics(pairs)
    for m in metrics.per_nutrient.values():
        assert m.rmse ** 2 == pytest.approx(m.mse, rel=1e-9)
        assert m.mae <= m.rmse + 1e-12


# ---------------------------------------------------------------------------
# CCC properties
# ---------------------------------------------------------------------------

series = st.lists(st.floats(min_value=0, max_value=5000, allow_nan=False,
                            allow_infinity=False), min_size=3, max_size=40)


@settings(max_examples=150, deadline=None)
@given(series, series)
def test_ccc_bounds_and_attenuation(truth, pred):
    n = min(len(truth), len(pred))
    truth, pred = truth[:n], pred[:n]
    assume(np.std(truth) > 1e-6 and np.std(pred) > 1e-6)
    m = compute_metrics(pairs_from_series(truth, pred)).per_nutrient["kcal"]
    assert -1.0 - 1e-12 <= m.ccc <= 1.0 + 1e-12
    r = ref.ref_pearson(truth, pred)
    assert abs(m.ccc) <= abs(r) + 1e-9


def test_ccc_location_shift_strictly_penalized():
    rng = np.random.default_rng(5)
    truth = rng.uniform(10, 100, size=200)
    pred = truth + rng.normal(0, 5, size=200)
    pred = pred - pred.mean() + truth.mean()  # location-matched, positively correlated
    base = compute_metrics(pairs_from_series(truth, pred)).per_nutrient["kcal"]
    for c in (0.5, 3.0, 25.0):
        shifted = compute_metrics(pairs_from_series(truth, pred + c)).per_nutrient["kcal"]
        assert shifted.ccc < base.ccc
        r_base = ref.ref_pearson(truth, pred)
        r_shift = ref.ref_pearson(truth, pred + c)
        assert r_shift == pytest.approx(r_base, abs=1e-12)


# ---------------------------------------------------------------------------
# scoring and exclusions
# ---------------------------------------------------------------------------


def _echo_run(tmp_path, n=100, corrupt=0, corrupt_text="N/A"):
    truths = {f"P{i:03d}": GroundTruth(f"P{i:03d}",
                                       vec(1000 + i, 50 + i, 200 + i, 90 + i, 10 + i % 5, 60 + i))
              for i in range(n)}
    config = BackendConfig(kind="echo_truth")
    backend = build_backend(config, truths=truths)
    bundles = [PromptBundle("s", "u", pid) for pid in truths]
    results = run_inference(bundles, config, backend=backend)
    if corrupt:
        from dataclasses import replace as dc_replace
        corrupted = [dc_replace(r, raw_text=corrupt_text) for r in results[:corrupt]]
        results = corrupted + results[corrupt:]
    run_dir = persist_run(results, {"n_expected": n}, tmp_path / "run")
    return run_dir, truths


def test_score_run_echo_identity(tmp_path):
    run_dir, truths = _echo_run(tmp_path, n=100)
    metrics, report = score_run(run_dir, truths)
    assert metrics.effective_n == 100
    assert metrics.excluded_n == 0
    assert not report.low_coverage_warning
    for m in metrics.per_nutrient.values():
        assert m.mse == 0 and m.mae == 0 and m.ccc == 1.0


def test_score_run_exclusions_eight_percent(tmp_path):
    run_dir, truths = _echo_run(tmp_path, n=100, corrupt=8)
    metrics, report = score_run(run_dir, truths)
    assert metrics.effective_n == 92
    assert metrics.excluded_n == 8
    assert report.by_reason in ({"non_numeric_field": 8}, {"extra_text": 8})
    assert sum(report.by_reason.values()) == report.excluded_n
    assert not report.low_coverage_warning
    exclusion_lines = (run_dir / "exclusions.jsonl").read_text().splitlines()
    assert len(exclusion_lines) == 8
    assert all(json.loads(l)["raw_text"] == "N/A" for l in exclusion_lines)


def test_score_run_twelve_percent_triggers_warning(tmp_path):
    run_dir, truths = _echo_run(tmp_path, n=100, corrupt=12)
    metrics, report = score_run(run_dir, truths)
    assert metrics.effective_n == 88
    assert report.low_coverage_warning  # 0.88 < 0.89
    assert MIN_VALID_FRACTION == 0.89


def test_score_run_missing_truth_is_error(tmp_path):
    run_dir, truths = _echo_run(tmp_path, n=5)
    truths.pop("P000")
    with pytest.raises(DataError):
        score_run(run_dir, truths)


def test_exclusion_reason_diversity(tmp_path):
    parsed = [parse_prediction(raw, f"P{i}") for i, raw in enumerate(
        ["1; 2; 3; 4; 5; 6", "", "kcal: 1; 2; 3; 4; 5; 6", "1; 2; 3", "N/A",
         "-1; 2; 3; 4; 5; 6"])]
    truths = {f"P{i}": GroundTruth(f"P{i}", vec(1, 2, 3, 4, 5, 6)) for i in range(6)}
    metrics, report = score_predictions(parsed, truths)
    assert metrics.effective_n == 1
    assert report.excluded_n == 5
    assert report.by_reason == {
        "empty_reply": 1, "extra_text": 1, "wrong_field_count": 1,
        "non_numeric_field": 1, "negative_value": 1}


# ---------------------------------------------------------------------------
# Bland-Altman
# ---------------------------------------------------------------------------


def test_bland_altman_zero_differences():
    pairs = [(const_vec(v), const_vec(v)) for v in (5, 10, 20)]
    summary = bland_altman(pairs)
    a = summary.per_nutrient["kcal"]
    assert a.mean_diff == 0 and a.sd_diff == 0
    assert a.loa_low == 0 and a.loa_high == 0
    assert len(a.points) == 3


def test_bland_altman_two_point_hand_case():
    summary = bland_altman(pairs_from_series([10, 20], [12, 18]))
    a = summary.per_nutrient["kcal"]
    assert a.mean_diff == pytest.approx(0.0, abs=1e-12)
    assert a.sd_diff == pytest.approx(2.8284271247, abs=1e-9)
    assert a.loa_high == pytest.approx(5.5437171645, abs=1e-9)
    assert a.loa_low == pytest.approx(-5.5437171645, abs=1e-9)
    assert a.points == ((11.0, 2.0), (19.0, -2.0))


def test_bland_altman_matches_reference():
    rng = np.random.default_rng(17)
    truth = rng.uniform(1000, 3000, size=400)
    pred = truth + rng.normal(0, 120, size=400)
    summary = bland_altman(pairs_from_series(truth, pred))
    a = summary.per_nutrient["kcal"]
    mean_ref, sd_ref, lo_ref, hi_ref = ref.ref_bland_altman(truth, pred)
    assert a.mean_diff == pytest.approx(mean_ref, rel=1e-9, abs=1e-9)
    assert a.sd_diff == pytest.approx(sd_ref, rel=1e-9)
    assert a.loa_low == pytest.approx(lo_ref, rel=1e-9)
    assert a.loa_high == pytest.approx(hi_ref, rel=1e-9)


def test_bland_altman_gaussian_coverage():
    rng = np.random.default_rng(99)
    n = 10_000
    truth = rng.uniform(1200, 2500, size=n)
    pred = truth + rng.normal(0, 150, size=n)
    summary = bland_altman(pairs_from_series(truth, pred))
    a = summary.per_nutrient["kcal"]
    inside = sum(1 for _, d in a.points if a.loa_low <= d <= a.loa_high)
    assert 0.94 <= inside / n <= 0.96


def test_bland_altman_requires_two_pairs():
    with pytest.raises(DataError):
        bland_altman([(const_vec(1), const_vec(1))])


# ---------------------------------------------------------------------------
# SVG rendering
# ---------------------------------------------------------------------------


def test_svg_element_counts_and_styles():
    summary = bland_altman(pairs_from_series([10, 20], [12, 18]))
    svg = render_bland_altman_svg(summary, "kcal")
    assert svg.count("<circle") == 2
    assert svg.count("<line") == 3
    red_lines = re.findall(r'<line[^>]*stroke="red"[^>]*/>', svg)
    green_lines = re.findall(r'<line[^>]*stroke="green"[^>]*/>', svg)
    assert len(red_lines) == 1 and "dasharray" not in red_lines[0]
    assert len(green_lines) == 2 and all("stroke-dasharray" in l for l in green_lines)
    assert "Energy (kcal)" in svg
    assert "Mean of prediction and truth (kcal)" in svg
    assert "Prediction - truth (kcal)" in svg


def test_svg_deterministic():
    summary = bland_altman(pairs_from_series([10, 20, 35], [12, 18, 36]))
    assert render_bland_altman_svg(summary, "fiber_g") == \
        render_bland_altman_svg(summary, "fiber_g")


def test_svg_point_count_matches_effective_n():
    pairs = pairs_from_series(range(2, 40), range(3, 41))
    summary = bland_altman(pairs)
    svg = render_bland_altman_svg(summary, "fat_g")
    assert svg.count("<circle") == len(pairs)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def test_report_layout_and_conventions(tmp_path):
    run_dir, truths = _echo_run(tmp_path, n=20, corrupt=2)
    metrics, report = score_run(run_dir, truths)
    table = format_metrics_table(metrics, report)
    first_line = table.splitlines()[0].split()
    assert first_line == ["metric", "kcal", "protein", "carb", "sugar", "fiber", "fat"]
    assert "MSE" in table and "Lin's CCC" in table and "T-test p-value" in table
    assert "effective_n  18" in table
    document = metrics_report_dict(metrics, report)
    assert document["conventions"]["r2"] == "coefficient_of_determination"
    assert document["conventions"]["mape"] == "zero_truth_pairs_excluded"
    assert document["conventions"]["ccc_moments"] == "population_divide_by_n"
    assert document["effective_n"] == 18
    assert set(document["per_nutrient"]) == set(NUTRIENT_FIELDS)
