"""Cohort ingestion, eligibility filtering, food-string grammar, partitioning.

Canonical inputs are three CSV files (participants, recall line items, ground
truth); the documented headers live in the README. Everything produced here
is immutable and safe to share across threads.
"""

from __future__ import annotations

import csv
import json
import math
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, GrammarError, SchemaError

NUTRIENT_FIELDS = ("kcal", "protein_g", "carb_g", "sugar_g", "fiber_g", "fat_g")

# Characters the food-string grammar reserves for itself.
RESERVED_CHARS = (";", "(", ")")

MIN_AGE_YEARS = 12
MAX_AGE_YEARS = 19

SEX_CODES = {"M": "male", "F": "female", "U": "unknown"}
QUALITIES = ("reliable", "unreliable")

PARTICIPANTS_HEADER = ["participant_id", "age_years", "sex", "breastfeeding", "recall_quality"]
RECALLS_HEADER = ["participant_id", "day", "seq", "food_code", "descriptor", "grams"]
TRUTH_HEADER = ["participant_id"] + list(NUTRIENT_FIELDS)

_DECIMAL_RE = re.compile(r"\d+(?:\.\d+)?|\.\d+")


def format_quantity(value: float) -> str:
    """Render a non-negative quantity in minimal decimal form, max 2 decimals.

    22.0 -> "22", 15.6 -> "15.6", 314.675 -> "314.68".
    """
    if not math.isfinite(value):
        raise ValueError(f"quantity must be finite, got {value!r}")
    if value < 0:
        raise ValueError(f"quantity must be non-negative, got {value!r}")
    if value == 0:
        return "0"
    return f"{value:.2f}".rstrip("0").rstrip(".")


@dataclass(frozen=True)
class NutrientVector:
    """Energy plus the five macronutrient totals, in a fixed serialization order."""

    kcal: float
    protein_g: float
    carb_g: float
    sugar_g: float
    fiber_g: float
    fat_g: float

    def __post_init__(self):
        for name, value in zip(NUTRIENT_FIELDS, self.as_tuple()):
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value!r}")

    def as_tuple(self) -> tuple[float, float, float, float, float, float]:
        return (self.kcal, self.protein_g, self.carb_g, self.sugar_g,
                self.fiber_g, self.fat_g)

    @classmethod
    def from_iterable(cls, values: Iterable[float]) -> "NutrientVector":
        vals = [float(v) for v in values]
        if len(vals) != len(NUTRIENT_FIELDS):
            raise ValueError(f"expected {len(NUTRIENT_FIELDS)} values, got {len(vals)}")
        return cls(*vals)


@dataclass(frozen=True)
class ParticipantRecord:
    participant_id: str
    age_years: int
    sex: str
    breastfeeding: bool
    recall_quality: str

    def __post_init__(self):
        if not self.participant_id:
            raise ValueError("participant_id must be non-empty")
        if self.age_years < 0:
            raise ValueError(f"age_years must be >= 0, got {self.age_years}")
        if self.sex not in SEX_CODES.values():
            raise ValueError(f"sex must be one of {sorted(SEX_CODES.values())}, got {self.sex!r}")
        if self.recall_quality not in QUALITIES:
            raise ValueError(f"recall_quality must be one of {QUALITIES}, got {self.recall_quality!r}")


@dataclass(frozen=True)
class FoodItem:
    """One consumed food with its quantity in grams."""

    food_code: str
    descriptor: str
    grams: float

    def __post_init__(self):
        if not self.descriptor:
            raise GrammarError("food descriptor must be non-empty")
        for ch in RESERVED_CHARS:
            if ch in self.descriptor:
                raise GrammarError(
                    f"descriptor contains reserved character {ch!r}: {self.descriptor!r}")
        if not math.isfinite(self.grams) or self.grams <= 0:
            raise ValueError(f"grams must be finite and positive, got {self.grams!r}")


@dataclass(frozen=True)
class DietaryRecall:
    """A participant-day's ordered food list; order is part of the value."""

    participant_id: str
    day: int
    items: tuple[FoodItem, ...]

    def __post_init__(self):
        if self.day not in (1, 2):
            raise ValueError(f"day must be 1 or 2, got {self.day}")
        if not self.items:
            raise ValueError("a dietary recall must contain at least one item")


@dataclass(frozen=True)
class GroundTruth:
    participant_id: str
    values: NutrientVector


@dataclass(frozen=True)
class Cohort:
    """Cross-linked participants, one evaluated-day recall each, and truths."""

    participants: dict[str, ParticipantRecord]
    recalls: dict[str, DietaryRecall]
    truths: dict[str, GroundTruth]
    day: int = 2

    @property
    def n_participants(self) -> int:
        return len(self.participants)

    @property
    def n_recalls(self) -> int:
        return len(self.recalls)

    @property
    def n_truths(self) -> int:
        return len(self.truths)


@dataclass(frozen=True)
class FilterReport:
    """Eligibility outcome; removals attribute to the first failing criterion."""

    n_loaded: int
    n_eligible: int
    removed_age: int
    removed_breastfeeding: int
    removed_quality: int


@dataclass(frozen=True)
class CohortPartition:
    subsets: tuple[tuple[str, ...], ...]
    seed: int

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.subsets]


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def _open_rows(path: Path, expected_header: list[str]) -> list[dict[str, str]]:
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != expected_header:
            raise SchemaError(
                f"expected header {','.join(expected_header)!r}, got "
                f"{','.join(reader.fieldnames or [])!r}",
                path=str(path))
        return list(reader)


def _parse_int(raw: str, *, path: Path, row: int, column: str) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"expected an integer, got {raw!r}",
                          path=str(path), row=row, column=column) from None


def _parse_float(raw: str, *, path: Path, row: int, column: str) -> float:
    try:
        value = float(raw)
    except (TypeError, ValueError):
        raise SchemaError(f"expected a number, got {raw!r}",
                          path=str(path), row=row, column=column) from None
    if not math.isfinite(value):
        raise SchemaError(f"expected a finite number, got {raw!r}",
                          path=str(path), row=row, column=column)
    return value


def load_cohort(participants_path: str | Path, recalls_path: str | Path,
                truth_path: str | Path, day: int = 2) -> Cohort:
    """Load and cross-link the three canonical CSV files.

    Only recall rows for the evaluated `day` enter the cohort. Errors name
    the offending file, 1-based data row, and column.
    """
    participants_path = Path(participants_path)
    recalls_path = Path(recalls_path)
    truth_path = Path(truth_path)
    if day not in (1, 2):
        raise DataError(f"evaluated day must be 1 or 2, got {day}")

    participants: dict[str, ParticipantRecord] = {}
    for row_no, row in enumerate(_open_rows(participants_path, PARTICIPANTS_HEADER), start=1):
        pid = (row["participant_id"] or "").strip()
        if not pid:
            raise SchemaError("participant_id must be non-empty",
                              path=str(participants_path), row=row_no, column="participant_id")
        if pid in participants:
            raise SchemaError(f"duplicate participant_id {pid!r}",
                              path=str(participants_path), row=row_no, column="participant_id")
        sex_code = (row["sex"] or "").strip()
        if sex_code not in SEX_CODES:
            raise SchemaError(f"sex must be one of M,F,U, got {row['sex']!r}",
                              path=str(participants_path), row=row_no, column="sex")
        bf_raw = (row["breastfeeding"] or "").strip()
        if bf_raw not in ("0", "1"):
            raise SchemaError(f"breastfeeding must be 0 or 1, got {row['breastfeeding']!r}",
                              path=str(participants_path), row=row_no, column="breastfeeding")
        quality = (row["recall_quality"] or "").strip()
        if quality not in QUALITIES:
            raise SchemaError(f"recall_quality must be one of {QUALITIES}, got {row['recall_quality']!r}",
                              path=str(participants_path), row=row_no, column="recall_quality")
        age = _parse_int(row["age_years"], path=participants_path, row=row_no, column="age_years")
        if age < 0:
            raise SchemaError(f"age_years must be >= 0, got {age}",
                              path=str(participants_path), row=row_no, column="age_years")
        participants[pid] = ParticipantRecord(
            participant_id=pid, age_years=age, sex=SEX_CODES[sex_code],
            breastfeeding=bf_raw == "1", recall_quality=quality)

    item_rows: dict[str, list[tuple[int, FoodItem]]] = {}
    for row_no, row in enumerate(_open_rows(recalls_path, RECALLS_HEADER), start=1):
        pid = (row["participant_id"] or "").strip()
        if pid not in participants:
            raise SchemaError(f"references unknown participant {pid!r}",
                              path=str(recalls_path), row=row_no, column="participant_id")
        row_day = _parse_int(row["day"], path=recalls_path, row=row_no, column="day")
        if row_day not in (1, 2):
            raise SchemaError(f"day must be 1 or 2, got {row_day}",
                              path=str(recalls_path), row=row_no, column="day")
        seq = _parse_int(row["seq"], path=recalls_path, row=row_no, column="seq")
        grams = _parse_float(row["grams"], path=recalls_path, row=row_no, column="grams")
        if grams <= 0:
            raise SchemaError(f"grams must be positive, got {grams}",
                              path=str(recalls_path), row=row_no, column="grams")
        descriptor = (row["descriptor"] or "").strip().upper()
        if row_day != day:
            continue
        try:
            item = FoodItem(food_code=(row["food_code"] or "").strip(),
                            descriptor=descriptor, grams=grams)
        except (GrammarError, ValueError) as exc:
            raise SchemaError(str(exc), path=str(recalls_path), row=row_no,
                              column="descriptor") from None
        item_rows.setdefault(pid, []).append((seq, item))

    recalls: dict[str, DietaryRecall] = {}
    for pid, rows in item_rows.items():
        # stable sort: seq orders the recall, file order breaks ties
        rows.sort(key=lambda pair: pair[0])
        recalls[pid] = DietaryRecall(participant_id=pid, day=day,
                                     items=tuple(item for _, item in rows))

    truths: dict[str, GroundTruth] = {}
    for row_no, row in enumerate(_open_rows(truth_path, TRUTH_HEADER), start=1):
        pid = (row["participant_id"] or "").strip()
        if pid not in participants:
            raise SchemaError(f"references unknown participant {pid!r}",
                              path=str(truth_path), row=row_no, column="participant_id")
        if pid in truths:
            raise SchemaError(f"duplicate ground truth for participant {pid!r}",
                              path=str(truth_path), row=row_no, column="participant_id")
        values = []
        for column in NUTRIENT_FIELDS:
            value = _parse_float(row[column], path=truth_path, row=row_no, column=column)
            if value < 0:
                raise SchemaError(f"{column} must be non-negative, got {value}",
                                  path=str(truth_path), row=row_no, column=column)
            values.append(value)
        truths[pid] = GroundTruth(participant_id=pid, values=NutrientVector(*values))

    return Cohort(participants=participants, recalls=recalls, truths=truths, day=day)


def filter_eligible(cohort: Cohort) -> tuple[Cohort, FilterReport]:
    """Retain participants aged 12-19 inclusive, not breastfeeding, reliable recalls.

    Removal counts attribute each dropped participant to the first failing
    criterion, checked in the order: age, breastfeeding, recall quality.
    """
    kept: dict[str, ParticipantRecord] = {}
    removed_age = removed_bf = removed_quality = 0
    for pid, record in cohort.participants.items():
        if not MIN_AGE_YEARS <= record.age_years <= MAX_AGE_YEARS:
            removed_age += 1
        elif record.breastfeeding:
            removed_bf += 1
        elif record.recall_quality != "reliable":
            removed_quality += 1
        else:
            kept[pid] = record
    filtered = Cohort(
        participants=kept,
        recalls={pid: r for pid, r in cohort.recalls.items() if pid in kept},
        truths={pid: t for pid, t in cohort.truths.items() if pid in kept},
        day=cohort.day)
    report = FilterReport(
        n_loaded=cohort.n_participants, n_eligible=len(kept),
        removed_age=removed_age, removed_breastfeeding=removed_bf,
        removed_quality=removed_quality)
    return filtered, report


# ---------------------------------------------------------------------------
# Food-string grammar
# ---------------------------------------------------------------------------


def render_food_string(recall: DietaryRecall) -> str:
    """Serialize a recall as "DESCRIPTOR (grams); DESCRIPTOR (grams); ..."."""
    return "; ".join(
        f"{item.descriptor} ({format_quantity(item.grams)})" for item in recall.items)


def parse_food_string(text: str) -> list[tuple[str, float]]:
    """Parse a rendered food string back into (descriptor, grams) pairs.

    Inverse of render_food_string on its image; grammar violations carry the
    character offset of the problem.
    """
    if not text.strip():
        raise GrammarError("empty food string", offset=0)
    items: list[tuple[str, float]] = []
    start = 0
    while start <= len(text):
        end = text.find(";", start)
        seg_end = len(text) if end == -1 else end
        segment = text[start:seg_end]
        items.append(_parse_food_segment(segment, start))
        if end == -1:
            break
        start = end + 1
    return items


def _parse_food_segment(segment: str, base: int) -> tuple[str, float]:
    stripped = segment.strip()
    if not stripped:
        raise GrammarError("empty food item", offset=base)
    lead = len(segment) - len(segment.lstrip())
    seg_start = base + lead
    open_idx = stripped.find("(")
    if open_idx == -1:
        raise GrammarError("missing '(' before grams", offset=seg_start + len(stripped))
    if not stripped.endswith(")"):
        if ")" in stripped:
            raise GrammarError("text after closing ')'",
                               offset=seg_start + stripped.rindex(")") + 1)
        raise GrammarError("unbalanced parentheses: missing ')'",
                           offset=seg_start + len(stripped))
    descriptor = stripped[:open_idx].rstrip()
    if not descriptor:
        raise GrammarError("empty descriptor", offset=seg_start)
    inner = stripped[open_idx + 1:-1].strip()
    if "(" in inner or ")" in inner:
        raise GrammarError("nested parentheses in grams",
                           offset=seg_start + open_idx + 1)
    if not _DECIMAL_RE.fullmatch(inner):
        raise GrammarError(f"non-numeric grams {inner!r}",
                           offset=seg_start + open_idx + 1)
    grams = float(inner)
    if grams <= 0:
        raise GrammarError(f"grams must be positive, got {inner!r}",
                           offset=seg_start + open_idx + 1)
    return descriptor, grams


# ---------------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------------


def partition_cohort(ids: Sequence[str], n_subsets: int, first_subset_extra: bool = True,
                     seed: int = 0, shuffle: bool = True) -> CohortPartition:
    """Deterministic seeded shuffle then contiguous slicing into n subsets.

    Remainder elements go one-per-subset to the leading subsets when
    first_subset_extra is true, to the trailing subsets otherwise. With
    shuffle=False the input order is kept (the seed is recorded but unused).
    """
    ids = list(ids)
    if n_subsets < 1:
        raise DataError(f"n_subsets must be >= 1, got {n_subsets}")
    if n_subsets > len(ids):
        raise DataError(f"cannot split {len(ids)} ids into {n_subsets} subsets")
    if len(set(ids)) != len(ids):
        raise DataError("participant ids must be unique")
    order = list(ids)
    if shuffle:
        random.Random(seed).shuffle(order)
    base, extra = divmod(len(order), n_subsets)
    if first_subset_extra:
        sizes = [base + 1] * extra + [base] * (n_subsets - extra)
    else:
        sizes = [base] * (n_subsets - extra) + [base + 1] * extra
    subsets = []
    cursor = 0
    for size in sizes:
        subsets.append(tuple(order[cursor:cursor + size]))
        cursor += size
    return CohortPartition(subsets=tuple(subsets), seed=seed)


def write_partition(partition: CohortPartition, path: str | Path) -> Path:
    """Persist a partition as the documented {seed, subsets} JSON document."""
    path = Path(path)
    document = {"seed": partition.seed,
                "subsets": [list(s) for s in partition.subsets]}
    path.write_text(json.dumps(document, indent=2) + "\n", encoding="utf-8")
    return path


def read_partition(path: str | Path) -> CohortPartition:
    path = Path(path)
    if not path.exists():
        raise DataError(f"partition file not found: {path}")
    document = json.loads(path.read_text(encoding="utf-8"))
    try:
        subsets = tuple(tuple(str(pid) for pid in subset) for subset in document["subsets"])
        seed = int(document["seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed partition file {path}: {exc}") from None
    return CohortPartition(subsets=subsets, seed=seed)
