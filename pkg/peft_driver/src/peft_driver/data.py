"""Training-file loading, validation, and the byte-level tokenizer.

The driver accepts exactly the chat JSONL the evaluation harness exports:
one object per line with non-empty system/user/assistant strings, where the
assistant field is six semicolon-separated non-negative decimal numbers
(optional whitespace, at most one trailing period). Anything the driver
accepts therefore also passes the harness's strict reply parser.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import TrainingDataError

REQUIRED_FIELDS = ("system", "user", "assistant")

_DECIMAL = r"\d+(?:\.\d+)?"
ASSISTANT_GRAMMAR = re.compile(
    rf"\s*{_DECIMAL}(?:\s*;\s*{_DECIMAL}){{5}}\s*\.?\s*$")


@dataclass(frozen=True)
class ChatExample:
    system: str
    user: str
    assistant: str


def assistant_reply_ok(text: str) -> bool:
    """True iff the text matches the six-value reply grammar."""
    return bool(ASSISTANT_GRAMMAR.fullmatch(text))


def file_sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_training_file(path: str | Path) -> list[ChatExample]:
    """Parse and validate a chat JSONL file; errors carry the 1-based line."""
    path = Path(path)
    if not path.exists():
        raise TrainingDataError(f"training file not found: {path}")
    examples: list[ChatExample] = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrainingDataError(f"not valid JSON ({exc.msg})", line=line_no) from None
            if not isinstance(record, dict):
                raise TrainingDataError("expected a JSON object", line=line_no)
            for field in REQUIRED_FIELDS:
                if field not in record:
                    raise TrainingDataError(f"missing field {field!r}", line=line_no)
                if not isinstance(record[field], str) or not record[field]:
                    raise TrainingDataError(f"field {field!r} must be a non-empty string",
                                            line=line_no)
            if not assistant_reply_ok(record["assistant"]):
                raise TrainingDataError(
                    f"assistant field is not a six-value reply: {record['assistant']!r}",
                    line=line_no)
            examples.append(ChatExample(system=record["system"], user=record["user"],
                                        assistant=record["assistant"]))
    if not examples:
        raise TrainingDataError(f"training file is empty: {path}")
    return examples


class ByteTokenizer:
    """Raw UTF-8 bytes plus BOS/EOS/PAD specials; no vocabulary to fetch."""

    BOS = 256
    EOS = 257
    PAD = 258
    vocab_size = 259

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: list[int]) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


def encode_example(example: ChatExample, tokenizer, max_seq_len: int,
                   bos: int, eos: int) -> tuple[list[int], list[int]]:
    """(input_ids, labels) with loss restricted to the assistant span.

    Left-truncates to max_seq_len so the assistant tokens always survive.
    """
    prompt = f"{example.system}\n{example.user}\n"
    prompt_ids = [bos] + tokenizer.encode(prompt)
    answer_ids = tokenizer.encode(example.assistant) + [eos]
    input_ids = prompt_ids + answer_ids
    labels = [-100] * len(prompt_ids) + list(answer_ids)
    if len(input_ids) > max_seq_len:
        input_ids = input_ids[-max_seq_len:]
        labels = labels[-max_seq_len:]
    return input_ids, labels
