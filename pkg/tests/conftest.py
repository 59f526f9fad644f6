"""Shared fixtures: synthetic cohorts, nutrient tables, CSV writers."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

# Observed distribution moments of the six outcomes (mean, SD); synthetic
# truths are drawn near these, truncated at zero, rounded to 2 decimals.
OUTCOME_MOMENTS = {
    "kcal": (1957.0, 946.29),
    "protein_g": (73.77, 40.99),
    "carb_g": (251.80, 127.48),
    "sugar_g": (114.38, 73.04),
    "fiber_g": (13.56, 8.49),
    "fat_g": (74.34, 43.46),
}

FOODS = [
    ("11111110", "MILK, LOW FAT", (42.0, 3.4, 5.0, 5.1, 0.0, 1.0)),
    ("51301010", "BREAD, WHITE", (266.0, 8.9, 50.6, 5.7, 2.4, 3.3)),
    ("61210220", "ORANGE, RAW", (47.0, 0.9, 11.8, 9.4, 2.4, 0.1)),
    ("91705010", "TAFFY", (400.0, 1.0, 90.0, 70.0, 0.0, 8.0)),
    ("24198710", "CHICKEN NUGGETS, FROM FROZEN", (296.0, 15.5, 14.0, 0.0, 1.2, 19.8)),
    ("71401030", "POTATO, FRENCH FRIES, FAST FOOD", (323.0, 3.8, 38.8, 0.3, 3.8, 17.0)),
    ("92410310", "SOFT DRINK, COLA", (41.0, 0.0, 10.6, 10.6, 0.0, 0.0)),
    ("63103010", "APPLE, RAW", (52.0, 0.3, 13.8, 10.4, 2.4, 0.2)),
]

NUTRIENT_TABLE_HEADER = ["descriptor", "kcal_100g", "protein_100g", "carb_100g",
                         "sugar_100g", "fiber_100g", "fat_100g"]


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_nutrient_table(path: Path, foods=FOODS) -> Path:
    rows = [[code_desc[1], *code_desc[2]] for code_desc in foods]
    return write_csv(path, NUTRIENT_TABLE_HEADER, rows)


def synth_truth_row(rng: np.random.Generator) -> list[float]:
    values = []
    for mean, sd in OUTCOME_MOMENTS.values():
        values.append(round(float(max(0.0, rng.normal(mean, sd))), 2))
    return values


def make_cohort_files(tmp_path: Path, n: int, seed: int = 7, day: int = 2,
                      prefix: str = "") -> dict[str, Path]:
    """Write an all-eligible synthetic cohort: participants, recalls, truth."""
    rng = np.random.default_rng(seed)
    width = len(str(n))
    pids = [f"{prefix}P{i:0{width}d}" for i in range(1, n + 1)]

    participant_rows = []
    recall_rows = []
    truth_rows = []
    for pid in pids:
        age = int(rng.integers(12, 20))
        sex = "M" if rng.random() < 0.5 else "F"
        participant_rows.append([pid, age, sex, 0, "reliable"])
        n_items = int(rng.integers(1, 4))
        picks = rng.choice(len(FOODS), size=n_items, replace=True)
        for seq, pick in enumerate(picks, start=1):
            code, descriptor, _ = FOODS[int(pick)]
            grams = round(float(rng.uniform(5, 600)), 2)
            recall_rows.append([pid, day, seq, code, descriptor, grams])
        truth_rows.append([pid, *synth_truth_row(rng)])

    from nutrieval.recall_data import PARTICIPANTS_HEADER, RECALLS_HEADER, TRUTH_HEADER
    return {
        "participants": write_csv(tmp_path / "participants.csv",
                                  PARTICIPANTS_HEADER, participant_rows),
        "recalls": write_csv(tmp_path / "recalls.csv", RECALLS_HEADER, recall_rows),
        "truth": write_csv(tmp_path / "truth.csv", TRUTH_HEADER, truth_rows),
    }


@pytest.fixture
def small_cohort_files(tmp_path):
    return make_cohort_files(tmp_path, n=10, seed=11)
