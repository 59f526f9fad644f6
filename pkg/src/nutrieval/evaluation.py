"""Strict reply parsing, the validation-statistic suite, agreement summaries.

A reply is valid only if it is exactly six semicolon-separated non-negative
decimal numbers (surrounding whitespace and, unless strict, one trailing
period tolerated). Parse failures are categorized data, never exceptions.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

from .errors import DataError
from .inference import InferenceResult, load_run
from .recall_data import NUTRIENT_FIELDS, GroundTruth, NutrientVector
from .stats import student_t_two_sided_p

# Minimum fraction of replies that must pass the grammar before scoring
# proceeds without a coverage warning.
MIN_VALID_FRACTION = 0.89

LIMIT_MULTIPLIER = 1.96

EXCLUSIONS_NAME = "exclusions.jsonl"

NUTRIENT_LABELS = {
    "kcal": "Energy (kcal)",
    "protein_g": "Protein (g)",
    "carb_g": "Carbohydrate (g)",
    "sugar_g": "Sugars (g)",
    "fiber_g": "Fiber (g)",
    "fat_g": "Fat (g)",
}

NUTRIENT_UNITS = {name: ("kcal" if name == "kcal" else "g") for name in NUTRIENT_FIELDS}

# Conventions the report metadata advertises; results are only comparable
# across tools that share them.
CONVENTIONS = {
    "r2": "coefficient_of_determination",
    "mape": "zero_truth_pairs_excluded",
    "ccc_moments": "population_divide_by_n",
    "bland_altman_sd": "sample_divide_by_n_minus_1",
    "difference_orientation": "prediction_minus_truth",
}


class InvalidReason(str, Enum):
    WRONG_FIELD_COUNT = "wrong_field_count"
    NON_NUMERIC_FIELD = "non_numeric_field"
    EXTRA_TEXT = "extra_text"
    NEGATIVE_VALUE = "negative_value"
    EMPTY_REPLY = "empty_reply"


@dataclass(frozen=True)
class ParsedPrediction:
    """A validated six-value reply, or a categorized failure (never both)."""

    participant_id: str
    values: NutrientVector | None = None
    reason: InvalidReason | None = None

    @property
    def valid(self) -> bool:
        return self.values is not None


_NUMBER_TOKEN_RE = re.compile(r"-?(?:\d+(?:\.\d+)?|\.\d+)")


def parse_prediction(raw_text: str, participant_id: str = "",
                     strict: bool = False) -> ParsedPrediction:
    """Parse one raw model reply against the six-value grammar.

    Total: every input maps to a Valid vector or to the most specific
    InvalidReason, chosen in the order: empty reply; extra text (a field
    mixing digits with letters or stray symbols); non-numeric field; wrong
    field count; negative value.
    """
    text = raw_text.strip()
    if not text:
        return ParsedPrediction(participant_id, reason=InvalidReason.EMPTY_REPLY)
    if not strict and text.endswith("."):
        text = text[:-1].rstrip()
        if not text:
            return ParsedPrediction(participant_id, reason=InvalidReason.EMPTY_REPLY)
    fields = [field.strip() for field in text.split(";")]

    bad = [f for f in fields if f and not _NUMBER_TOKEN_RE.fullmatch(f)]
    for field in bad:
        has_digit = any(ch.isdigit() for ch in field)
        has_other = any(ch.isalpha() or ch not in "0123456789.- \t" for ch in field)
        if has_digit and has_other:
            return ParsedPrediction(participant_id, reason=InvalidReason.EXTRA_TEXT)
    if bad:
        return ParsedPrediction(participant_id, reason=InvalidReason.NON_NUMERIC_FIELD)
    if len(fields) != 6 or any(not f for f in fields):
        return ParsedPrediction(participant_id, reason=InvalidReason.WRONG_FIELD_COUNT)

    values = [float(f) for f in fields]
    if any(v < 0 for v in values):
        return ParsedPrediction(participant_id, reason=InvalidReason.NEGATIVE_VALUE)
    if any(not math.isfinite(v) for v in values):
        return ParsedPrediction(participant_id, reason=InvalidReason.NON_NUMERIC_FIELD)
    return ParsedPrediction(participant_id, values=NutrientVector(*values))


# ---------------------------------------------------------------------------
# Validation statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NutrientMetrics:
    mse: float
    mae: float
    mape: float
    rmse: float
    r2: float
    t_stat: float
    p_value: float
    ccc: float
    mape_excluded_n: int = 0
    degenerate_t: bool = False


@dataclass(frozen=True)
class MetricSet:
    per_nutrient: dict[str, NutrientMetrics]
    effective_n: int
    excluded_n: int = 0


def _nutrient_metrics(truth: Sequence[float], pred: Sequence[float]) -> NutrientMetrics:
    n = len(truth)
    diffs = [p - t for t, p in zip(truth, pred)]

    mse = math.fsum(d * d for d in diffs) / n
    mae = math.fsum(abs(d) for d in diffs) / n
    rmse = math.sqrt(mse)

    mape_terms = [abs(d) / t for t, d in zip(truth, diffs) if t > 0]
    mape_excluded = n - len(mape_terms)
    mape = math.fsum(mape_terms) / len(mape_terms) if mape_terms else float("nan")

    t_mean = math.fsum(truth) / n
    p_mean = math.fsum(pred) / n
    ss_res = math.fsum(d * d for d in diffs)
    ss_tot = math.fsum((t - t_mean) ** 2 for t in truth)
    if ss_tot > 0:
        r2 = 1.0 - ss_res / ss_tot
    else:
        r2 = 1.0 if ss_res == 0 else float("nan")

    # Lin's concordance with population (divide-by-n) moments
    var_t = ss_tot / n
    var_p = math.fsum((p - p_mean) ** 2 for p in pred) / n
    cov_tp = math.fsum((t - t_mean) * (p - p_mean) for t, p in zip(truth, pred)) / n
    shift_sq = (p_mean - t_mean) ** 2
    denom = var_t + var_p + shift_sq
    ccc = 2.0 * cov_tp / denom if denom > 0 else 1.0

    # paired two-sided t-test on prediction - truth
    d_mean = math.fsum(diffs) / n
    degenerate = False
    if n < 2:
        degenerate = True
        t_stat, p_value = (0.0, 1.0) if d_mean == 0 else (math.inf, 0.0)
    else:
        var_d = math.fsum((d - d_mean) ** 2 for d in diffs) / (n - 1)
        if var_d == 0:
            degenerate = True
            t_stat, p_value = (0.0, 1.0) if d_mean == 0 else (math.copysign(math.inf, d_mean), 0.0)
        else:
            t_stat = d_mean / math.sqrt(var_d / n)
            p_value = student_t_two_sided_p(t_stat, n - 1)

    return NutrientMetrics(mse=mse, mae=mae, mape=mape, rmse=rmse, r2=r2,
                           t_stat=t_stat, p_value=p_value, ccc=ccc,
                           mape_excluded_n=mape_excluded, degenerate_t=degenerate)


def compute_metrics(pairs: Sequence[tuple[NutrientVector, NutrientVector]]) -> MetricSet:
    """All seven statistics per nutrient over (truth, prediction) pairs."""
    if not pairs:
        raise DataError("cannot compute metrics over zero pairs")
    per_nutrient = {}
    for idx, name in enumerate(NUTRIENT_FIELDS):
        truth = [t.as_tuple()[idx] for t, _ in pairs]
        pred = [p.as_tuple()[idx] for _, p in pairs]
        per_nutrient[name] = _nutrient_metrics(truth, pred)
    return MetricSet(per_nutrient=per_nutrient, effective_n=len(pairs))


# ---------------------------------------------------------------------------
# Scoring persisted runs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExclusionReport:
    total_results: int
    effective_n: int
    excluded_n: int
    by_reason: dict[str, int]
    low_coverage_warning: bool
    min_valid_fraction: float = MIN_VALID_FRACTION


def score_predictions(parsed: Sequence[ParsedPrediction],
                      truths: Mapping[str, GroundTruth]) -> tuple[MetricSet, ExclusionReport]:
    """Join valid predictions to truths and compute the full metric set."""
    pairs = []
    by_reason: Counter[str] = Counter()
    for prediction in parsed:
        truth = truths.get(prediction.participant_id)
        if truth is None:
            raise DataError(
                f"ground truth missing for scored participant {prediction.participant_id!r}")
        if prediction.valid:
            pairs.append((truth.values, prediction.values))
        else:
            by_reason[prediction.reason.value] += 1
    total = len(parsed)
    excluded = total - len(pairs)
    metrics = replace(compute_metrics(pairs), excluded_n=excluded)
    report = ExclusionReport(
        total_results=total, effective_n=len(pairs), excluded_n=excluded,
        by_reason=dict(sorted(by_reason.items())),
        low_coverage_warning=bool(total) and len(pairs) / total < MIN_VALID_FRACTION)
    return metrics, report


def score_run(run_dir: str | Path, truths: Mapping[str, GroundTruth],
              strict: bool = False, allow_partial: bool = False,
              ) -> tuple[MetricSet, ExclusionReport]:
    """Parse and score a persisted run; writes exclusions.jsonl alongside it."""
    run_dir = Path(run_dir)
    _, results = load_run(run_dir, allow_partial=allow_partial)
    parsed = [parse_prediction(r.raw_text, r.participant_id, strict=strict)
              for r in results]
    metrics, report = score_predictions(parsed, truths)
    with (run_dir / EXCLUSIONS_NAME).open("w", encoding="utf-8", newline="\n") as fh:
        for prediction, result in zip(parsed, results):
            if not prediction.valid:
                fh.write(json.dumps(
                    {"participant_id": prediction.participant_id,
                     "reason": prediction.reason.value,
                     "raw_text": result.raw_text},
                    ensure_ascii=False) + "\n")
    return metrics, report


def valid_pairs_from_run(run_dir: str | Path, truths: Mapping[str, GroundTruth],
                         strict: bool = False, allow_partial: bool = False,
                         ) -> list[tuple[NutrientVector, NutrientVector]]:
    """(truth, prediction) pairs for the run's grammar-valid replies."""
    _, results = load_run(run_dir, allow_partial=allow_partial)
    pairs = []
    for result in results:
        prediction = parse_prediction(result.raw_text, result.participant_id, strict=strict)
        if prediction.valid:
            truth = truths.get(prediction.participant_id)
            if truth is None:
                raise DataError(
                    f"ground truth missing for scored participant {prediction.participant_id!r}")
            pairs.append((truth.values, prediction.values))
    return pairs


# ---------------------------------------------------------------------------
# Bland-Altman agreement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NutrientAgreement:
    mean_diff: float
    sd_diff: float
    loa_low: float
    loa_high: float
    points: tuple[tuple[float, float], ...]  # (average, difference)


@dataclass(frozen=True)
class BlandAltmanSummary:
    per_nutrient: dict[str, NutrientAgreement]

    @property
    def n_points(self) -> int:
        return len(next(iter(self.per_nutrient.values())).points)


def bland_altman(pairs: Sequence[tuple[NutrientVector, NutrientVector]]) -> BlandAltmanSummary:
    """Differences (prediction - truth) against averages, with 1.96-SD limits."""
    if len(pairs) < 2:
        raise DataError(f"Bland-Altman needs at least 2 pairs, got {len(pairs)}")
    per_nutrient = {}
    n = len(pairs)
    for idx, name in enumerate(NUTRIENT_FIELDS):
        truth = [t.as_tuple()[idx] for t, _ in pairs]
        pred = [p.as_tuple()[idx] for _, p in pairs]
        diffs = [p - t for t, p in zip(truth, pred)]
        averages = [(p + t) / 2.0 for t, p in zip(truth, pred)]
        mean_diff = math.fsum(diffs) / n
        sd_diff = math.sqrt(math.fsum((d - mean_diff) ** 2 for d in diffs) / (n - 1))
        per_nutrient[name] = NutrientAgreement(
            mean_diff=mean_diff, sd_diff=sd_diff,
            loa_low=mean_diff - LIMIT_MULTIPLIER * sd_diff,
            loa_high=mean_diff + LIMIT_MULTIPLIER * sd_diff,
            points=tuple(zip(averages, diffs)))
    return BlandAltmanSummary(per_nutrient=per_nutrient)


# ---------------------------------------------------------------------------
# SVG plot
# ---------------------------------------------------------------------------

_SVG_WIDTH = 640
_SVG_HEIGHT = 480
_MARGIN_LEFT = 72
_MARGIN_RIGHT = 24
_MARGIN_TOP = 40
_MARGIN_BOTTOM = 56


def _fmt(value: float) -> str:
    return f"{value:.2f}"


def _spread(lo: float, hi: float, pad_fraction: float = 0.06) -> tuple[float, float]:
    if hi <= lo:
        pad = 1.0 if lo == 0 else abs(lo) * pad_fraction + 1e-9
        return lo - pad, hi + pad
    pad = (hi - lo) * pad_fraction
    return lo - pad, hi + pad


def render_bland_altman_svg(summary: BlandAltmanSummary, nutrient: str) -> str:
    """Deterministic scatter of (average, difference) with mean and limit lines.

    Solid red mean-difference line, dotted green limits of agreement; the
    only <line> elements are those three, so element counts are stable.
    """
    agreement = summary.per_nutrient[nutrient]
    unit = NUTRIENT_UNITS[nutrient]
    label = NUTRIENT_LABELS[nutrient]

    xs = [p[0] for p in agreement.points]
    ys = [p[1] for p in agreement.points]
    x_lo, x_hi = _spread(min(xs), max(xs))
    y_values = ys + [agreement.loa_low, agreement.loa_high, agreement.mean_diff]
    y_lo, y_hi = _spread(min(y_values), max(y_values))

    plot_w = _SVG_WIDTH - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = _SVG_HEIGHT - _MARGIN_TOP - _MARGIN_BOTTOM

    def sx(x: float) -> float:
        return _MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y: float) -> float:
        return _MARGIN_TOP + (y_hi - y) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_WIDTH}" '
        f'height="{_SVG_HEIGHT}" viewBox="0 0 {_SVG_WIDTH} {_SVG_HEIGHT}">',
        f'<rect x="{_MARGIN_LEFT}" y="{_MARGIN_TOP}" width="{plot_w}" '
        f'height="{plot_h}" fill="white" stroke="black" stroke-width="1"/>',
        f'<text x="{_SVG_WIDTH / 2:.1f}" y="22" text-anchor="middle" '
        f'font-family="sans-serif" font-size="15">Bland-Altman: {label}</text>',
    ]

    def hline(y_value: float, color: str, dotted: bool) -> str:
        dash = ' stroke-dasharray="4 3"' if dotted else ""
        return (f'<line x1="{_fmt(_MARGIN_LEFT)}" y1="{_fmt(sy(y_value))}" '
                f'x2="{_fmt(_MARGIN_LEFT + plot_w)}" y2="{_fmt(sy(y_value))}" '
                f'stroke="{color}" stroke-width="1.5"{dash}/>')

    parts.append(hline(agreement.mean_diff, "red", dotted=False))
    parts.append(hline(agreement.loa_low, "green", dotted=True))
    parts.append(hline(agreement.loa_high, "green", dotted=True))

    for x, y in agreement.points:
        parts.append(f'<circle cx="{_fmt(sx(x))}" cy="{_fmt(sy(y))}" r="3" '
                     f'fill="steelblue" fill-opacity="0.55"/>')

    for frac in (0.0, 0.5, 1.0):
        x_value = x_lo + frac * (x_hi - x_lo)
        parts.append(f'<text x="{_fmt(sx(x_value))}" y="{_SVG_HEIGHT - _MARGIN_BOTTOM + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" font-size="11">'
                     f'{_fmt(x_value)}</text>')
        y_value = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<text x="{_MARGIN_LEFT - 8}" y="{_fmt(sy(y_value) + 4)}" '
                     f'text-anchor="end" font-family="sans-serif" font-size="11">'
                     f'{_fmt(y_value)}</text>')

    annotations = (
        (f"mean {_fmt(agreement.mean_diff)}", agreement.mean_diff),
        (f"+1.96 SD {_fmt(agreement.loa_high)}", agreement.loa_high),
        (f"-1.96 SD {_fmt(agreement.loa_low)}", agreement.loa_low),
    )
    for text, y_value in annotations:
        parts.append(f'<text x="{_MARGIN_LEFT + plot_w - 6}" y="{_fmt(sy(y_value) - 5)}" '
                     f'text-anchor="end" font-family="sans-serif" font-size="11">'
                     f'{text}</text>')

    parts.append(f'<text x="{_MARGIN_LEFT + plot_w / 2:.1f}" y="{_SVG_HEIGHT - 14}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13">'
                 f'Mean of prediction and truth ({unit})</text>')
    parts.append(f'<text x="18" y="{_MARGIN_TOP + plot_h / 2:.1f}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 18 {_MARGIN_TOP + plot_h / 2:.1f})">'
                 f'Prediction - truth ({unit})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

METRIC_ROWS = (
    ("MSE", "mse"),
    ("MAE", "mae"),
    ("MAPE", "mape"),
    ("RMSE", "rmse"),
    ("R2", "r2"),
    ("T-test p-value", "p_value"),
    ("Lin's CCC", "ccc"),
)

_COLUMN_LABELS = {
    "kcal": "kcal", "protein_g": "protein", "carb_g": "carb",
    "sugar_g": "sugar", "fiber_g": "fiber", "fat_g": "fat",
}


def metrics_report_dict(metrics: MetricSet, report: ExclusionReport,
                        strict_parser: bool = False) -> dict:
    """JSON-ready report including the convention metadata."""
    conventions = dict(CONVENTIONS)
    conventions["parser_tolerance"] = (
        "strict" if strict_parser else "whitespace_and_single_trailing_period")
    return {
        "conventions": conventions,
        "effective_n": metrics.effective_n,
        "excluded_n": metrics.excluded_n,
        "exclusions_by_reason": report.by_reason,
        "low_coverage_warning": report.low_coverage_warning,
        "min_valid_fraction": report.min_valid_fraction,
        "per_nutrient": {
            name: {
                "mse": m.mse, "mae": m.mae, "mape": m.mape, "rmse": m.rmse,
                "r2": m.r2, "t_stat": m.t_stat, "p_value": m.p_value,
                "ccc": m.ccc, "mape_excluded_n": m.mape_excluded_n,
                "degenerate_t": m.degenerate_t,
            }
            for name, m in metrics.per_nutrient.items()
        },
    }


def format_metrics_table(metrics: MetricSet, report: ExclusionReport) -> str:
    """Aligned text table: metric rows by nutrient columns, plus counts."""
    columns = [_COLUMN_LABELS[name] for name in NUTRIENT_FIELDS]
    header = ["metric"] + columns
    rows = [header]
    for label, attr in METRIC_ROWS:
        row = [label]
        for name in NUTRIENT_FIELDS:
            value = getattr(metrics.per_nutrient[name], attr)
            row.append("nan" if isinstance(value, float) and math.isnan(value)
                       else f"{value:.3f}")
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for row in rows:
        cells = [row[0].ljust(widths[0])]
        cells += [cell.rjust(widths[i]) for i, cell in enumerate(row[1:], start=1)]
        lines.append("  ".join(cells))
    lines.append("")
    lines.append(f"effective_n  {metrics.effective_n}")
    lines.append(f"excluded_n   {metrics.excluded_n}")
    if report.by_reason:
        reasons = ", ".join(f"{reason}={count}" for reason, count in report.by_reason.items())
        lines.append(f"exclusions   {reasons}")
    if report.low_coverage_warning:
        fraction = report.effective_n / report.total_results
        lines.append(
            f"WARNING: only {fraction:.1%} of replies parsed "
            f"(threshold {report.min_valid_fraction:.0%})")
    return "\n".join(lines) + "\n"
