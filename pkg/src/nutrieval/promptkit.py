"""Ten-shot prompt fixture management, prompt rendering, fine-tune export.

The shipped fixture is a best-effort transcription of the published prompt,
typographical anomalies included; its committed checksum defines "verbatim"
for this artifact. A cleaned fidelity mode strips the extraction-artifact
tags and normalizes the one known label typo, nothing more.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, DataError
from .recall_data import Cohort, NutrientVector, format_quantity, render_food_string

PROMPT_FIXTURE_RESOURCE = "fixtures/ten_shot_prompt.txt"

# sha256 of the committed fixture file; tests and run manifests pin it.
PROMPT_FIXTURE_SHA256 = "b35a817cc5372947b4ac34b199ecdd2a0aba4ae0b35708b20e971732e6398e4f"

DIET_PLACEHOLDER = "{diet}"
EXPECTED_EXAMPLE_COUNT = 10
FIDELITY_MODES = ("verbatim", "cleaned")

_SECTION_RE = re.compile(r"^\[(SYSTEM|USER)\]\n", flags=re.M)
_TAG_RE = re.compile(r"</?(?:p|ol|ul|li)\b[^>]*>")
_TYPO_LABEL = "OutExpected Outputput:"
_EXAMPLE_RE = re.compile(
    r"Patient Input:\n\n24-hour dietary recall: (?P<input>[^\n]+)\n\n"
    r"(?:Expected Output|OutExpected Outputput): (?P<output>[^\n]+)")


@dataclass(frozen=True)
class FewShotExample:
    input_string: str
    expected: NutrientVector


@dataclass(frozen=True)
class PromptTemplate:
    system_text: str
    user_text: str
    fidelity: str = "verbatim"


@dataclass(frozen=True)
class PromptBundle:
    system_message: str
    user_message: str
    participant_id: str


def fixture_bytes() -> bytes:
    return resources.files("nutrieval").joinpath(PROMPT_FIXTURE_RESOURCE).read_bytes()


def fixture_checksum() -> str:
    """sha256 hex digest of the shipped prompt fixture."""
    return hashlib.sha256(fixture_bytes()).hexdigest()


def _split_sections(text: str) -> dict[str, str]:
    parts = _SECTION_RE.split(text)
    if len(parts) != 5 or parts[0].strip() or parts[1] != "SYSTEM" or parts[3] != "USER":
        raise ConfigError("prompt fixture must contain [SYSTEM] and [USER] sections")
    # section text keeps its interior bytes; only framing newlines are trimmed
    return {"SYSTEM": parts[2].strip("\n"), "USER": parts[4].strip("\n")}


def _clean(text: str) -> str:
    text = text.replace(_TYPO_LABEL, "Expected Output:")
    return _TAG_RE.sub("", text)


def load_template(fidelity: str = "verbatim") -> PromptTemplate:
    """Load the shipped ten-shot template at the requested fidelity."""
    if fidelity not in FIDELITY_MODES:
        raise ConfigError(f"fidelity must be one of {FIDELITY_MODES}, got {fidelity!r}")
    sections = _split_sections(fixture_bytes().decode("utf-8"))
    system_text, user_text = sections["SYSTEM"], sections["USER"]
    if fidelity == "cleaned":
        system_text = _clean(system_text)
        user_text = _clean(user_text)
    return PromptTemplate(system_text=system_text, user_text=user_text, fidelity=fidelity)


def few_shot_examples(template: PromptTemplate) -> list[FewShotExample]:
    """Extract the calibration pairs embedded in the template's system text."""
    examples = []
    for match in _EXAMPLE_RE.finditer(template.system_text):
        fields = [field.strip() for field in match.group("output").split(";")]
        examples.append(FewShotExample(
            input_string=match.group("input"),
            expected=NutrientVector.from_iterable(float(f) for f in fields)))
    if len(examples) != EXPECTED_EXAMPLE_COUNT:
        raise ConfigError(
            f"expected {EXPECTED_EXAMPLE_COUNT} calibration examples, found {len(examples)}")
    return examples


def render_prompt(template: PromptTemplate, food_string: str,
                  participant_id: str = "") -> PromptBundle:
    """Substitute the food string into the user message."""
    if not food_string:
        raise ValueError("food_string must be non-empty")
    count = template.user_text.count(DIET_PLACEHOLDER)
    if count != 1:
        raise ConfigError(
            f"template user text must contain exactly one {DIET_PLACEHOLDER} "
            f"placeholder, found {count}")
    user_message = template.user_text.replace(DIET_PLACEHOLDER, food_string)
    return PromptBundle(system_message=template.system_text,
                        user_message=user_message,
                        participant_id=participant_id)


def format_target(values: NutrientVector) -> str:
    """Six fields joined by '; ', minimal decimal form, fixed nutrient order."""
    return "; ".join(format_quantity(v) for v in values.as_tuple())


def export_finetune_dataset(cohort: Cohort, subset_ids: Sequence[str],
                            template: PromptTemplate, out_path: str | Path) -> Path:
    """Write one {system, user, assistant} JSON object per subset member.

    Lines are ordered by participant_id, UTF-8, LF-terminated; the assistant
    field is the formatted ground truth.
    """
    if not subset_ids:
        raise DataError("refusing to export an empty fine-tune subset")
    out_path = Path(out_path)
    lines = []
    for pid in sorted(subset_ids):
        recall = cohort.recalls.get(pid)
        if recall is None:
            raise DataError(f"no day-{cohort.day} recall for subset participant {pid!r}")
        truth = cohort.truths.get(pid)
        if truth is None:
            raise DataError(f"no ground truth for subset participant {pid!r}")
        bundle = render_prompt(template, render_food_string(recall), pid)
        lines.append(json.dumps(
            {"system": bundle.system_message,
             "user": bundle.user_message,
             "assistant": format_target(truth.values)},
            ensure_ascii=False))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with out_path.open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_path
