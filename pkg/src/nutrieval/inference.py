"""Prediction backends and batch inference with run persistence.

Three interchangeable backends: a remote chat-completion endpoint, a
deterministic per-100 g nutrient-table oracle, and a truth-echoing backend
used for end-to-end pipeline verification. Raw replies are stored exactly
as returned; backend failures become data, not crashes.
"""

from __future__ import annotations

import csv
import json
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Mapping, Sequence

import requests

from .errors import BackendError, ConfigError, DataError, PartialRunError, SchemaError, UnknownFoodError
from .promptkit import PromptBundle, format_target
from .recall_data import NUTRIENT_FIELDS, DietaryRecall, GroundTruth, NutrientVector

BACKEND_KINDS = ("http_chat", "table_oracle", "echo_truth")
API_TOKEN_ENV = "NUTRIEVAL_API_TOKEN"

NUTRIENT_TABLE_HEADER = ["descriptor", "kcal_100g", "protein_100g", "carb_100g",
                         "sugar_100g", "fiber_100g", "fat_100g"]

MANIFEST_NAME = "manifest.json"
RESULTS_NAME = "results.jsonl"

_RETRY_BACKOFF_S = 0.1


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "echo_truth"
    endpoint_url: str = ""
    model_name: str = ""
    temperature: float = 0.0
    max_output_tokens: int = 64
    request_timeout: float = 30.0
    max_retries: int = 2
    parallelism: int = 1

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_output_tokens <= 0:
            raise ConfigError(f"max_output_tokens must be > 0, got {self.max_output_tokens}")
        if self.max_retries < 0:
            raise ConfigError(f"max_retries must be >= 0, got {self.max_retries}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.kind == "http_chat" and not self.endpoint_url:
            raise ConfigError("http_chat backend requires endpoint_url")


@dataclass(frozen=True)
class InferenceResult:
    participant_id: str
    raw_text: str
    backend_id: str
    latency_ms: float
    attempt_count: int
    failure: str | None = None

    def to_json(self, include_latency: bool = True) -> str:
        record = asdict(self)
        if not include_latency:
            # canonical run artifacts are byte-identical across reruns;
            # wall-clock data belongs to the manifest
            del record["latency_ms"]
        return json.dumps(record, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "InferenceResult":
        record = json.loads(line)
        record.setdefault("latency_ms", 0.0)
        return cls(**record)


@dataclass(frozen=True)
class NutrientTable:
    """Per-100 g nutrient vectors keyed by uppercase descriptor."""

    per_100g: dict[str, NutrientVector]

    def __post_init__(self):
        for descriptor in self.per_100g:
            if not descriptor or descriptor != descriptor.upper():
                raise DataError(f"table descriptor must be non-empty uppercase: {descriptor!r}")
            if any(ch in descriptor for ch in (";", "(", ")")):
                raise DataError(f"table descriptor contains reserved character: {descriptor!r}")

    def lookup(self, descriptor: str) -> NutrientVector:
        try:
            return self.per_100g[descriptor]
        except KeyError:
            raise UnknownFoodError(f"descriptor not in nutrient table: {descriptor!r}") from None

    @classmethod
    def from_csv(cls, path: str | Path) -> "NutrientTable":
        path = Path(path)
        if not path.exists():
            raise DataError(f"nutrient table not found: {path}")
        per_100g: dict[str, NutrientVector] = {}
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != NUTRIENT_TABLE_HEADER:
                raise SchemaError(
                    f"expected header {','.join(NUTRIENT_TABLE_HEADER)!r}",
                    path=str(path))
            for row_no, row in enumerate(reader, start=1):
                descriptor = (row["descriptor"] or "").strip().upper()
                try:
                    values = NutrientVector.from_iterable(
                        float(row[col]) for col in NUTRIENT_TABLE_HEADER[1:])
                except ValueError as exc:
                    raise SchemaError(str(exc), path=str(path), row=row_no,
                                      column="") from None
                per_100g[descriptor] = values
        return cls(per_100g=per_100g)


def oracle_estimate(items: Sequence[tuple[str, float]], table: NutrientTable) -> NutrientVector:
    """Component-wise sum of per-100 g vectors scaled by grams/100.

    Exact (fsum) accumulation keeps the result identical under any item
    reordering.
    """
    components = []
    for idx in range(len(NUTRIENT_FIELDS)):
        terms = [table.lookup(descriptor).as_tuple()[idx] * grams / 100.0
                 for descriptor, grams in items]
        components.append(math.fsum(terms))
    return NutrientVector(*components)


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class _RequestFailure(Exception):
    """A retryable request failure; `connection` marks unreachable endpoints."""

    def __init__(self, reason: str, connection: bool = False):
        super().__init__(reason)
        self.reason = reason
        self.connection = connection


class EchoTruthBackend:
    """Replies with the formatted ground truth; exists for pipeline checks."""

    def __init__(self, truths: Mapping[str, GroundTruth]):
        self._truths = truths
        self.backend_id = "echo_truth"

    def predict(self, bundle: PromptBundle) -> str:
        truth = self._truths.get(bundle.participant_id)
        if truth is None:
            raise DataError(f"echo backend has no truth for participant {bundle.participant_id!r}")
        return format_target(truth.values)


class TableOracleBackend:
    """Deterministic lookup-and-scale estimator over a nutrient table."""

    def __init__(self, table: NutrientTable, recalls: Mapping[str, DietaryRecall]):
        self._table = table
        self._recalls = recalls
        self.backend_id = "table_oracle"

    def predict(self, bundle: PromptBundle) -> str:
        recall = self._recalls.get(bundle.participant_id)
        if recall is None:
            raise DataError(f"oracle backend has no recall for participant {bundle.participant_id!r}")
        items = [(item.descriptor, item.grams) for item in recall.items]
        return format_target(oracle_estimate(items, self._table))


class HttpChatBackend:
    """Minimal chat-completions client; the wire shape is an opaque contract."""

    def __init__(self, config: BackendConfig):
        self._config = config
        self.backend_id = f"http_chat:{config.model_name or 'unnamed'}"
        self._headers = {"Content-Type": "application/json"}
        token = os.environ.get(API_TOKEN_ENV, "")
        if token:
            self._headers["Authorization"] = f"Bearer {token}"

    def predict(self, bundle: PromptBundle) -> str:
        payload = {
            "model": self._config.model_name,
            "temperature": self._config.temperature,
            "max_tokens": self._config.max_output_tokens,
            "messages": [
                {"role": "system", "content": bundle.system_message},
                {"role": "user", "content": bundle.user_message},
            ],
        }
        try:
            response = requests.post(self._config.endpoint_url, json=payload,
                                     headers=self._headers,
                                     timeout=self._config.request_timeout)
        except requests.exceptions.ConnectionError as exc:
            raise _RequestFailure(f"connection_error: {exc}", connection=True) from None
        except requests.exceptions.RequestException as exc:
            raise _RequestFailure(f"request_error: {exc}") from None
        if response.status_code != 200:
            raise _RequestFailure(f"http_status_{response.status_code}")
        try:
            content = response.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise _RequestFailure(f"malformed_reply_envelope: {exc!r}") from None
        if not isinstance(content, str):
            raise _RequestFailure("malformed_reply_envelope: content is not a string")
        return content


def build_backend(config: BackendConfig, *,
                  truths: Mapping[str, GroundTruth] | None = None,
                  table: NutrientTable | None = None,
                  recalls: Mapping[str, DietaryRecall] | None = None):
    """Construct the backend named by the config, wiring in its data."""
    if config.kind == "http_chat":
        return HttpChatBackend(config)
    if config.kind == "echo_truth":
        if truths is None:
            raise ConfigError("echo_truth backend requires ground truths")
        return EchoTruthBackend(truths)
    if table is None or recalls is None:
        raise ConfigError("table_oracle backend requires a nutrient table and recalls")
    return TableOracleBackend(table, recalls)


# ---------------------------------------------------------------------------
# Batch execution
# ---------------------------------------------------------------------------


def run_inference(bundles: Sequence[PromptBundle], config: BackendConfig,
                  backend=None, live_log: IO[str] | None = None) -> list[InferenceResult]:
    """One InferenceResult per bundle, ordered by participant_id.

    Requests failing after max_retries extra attempts yield a result with an
    empty raw_text and the failure reason recorded. A connection-level
    failure on the very first request aborts the run instead (fail fast).
    Completed results are appended to `live_log` under a lock as they arrive.
    """
    if backend is None:
        if config.kind != "http_chat":
            raise ConfigError(f"{config.kind} backend must be constructed via build_backend")
        backend = HttpChatBackend(config)

    log_lock = threading.Lock()

    def record(result: InferenceResult) -> InferenceResult:
        if live_log is not None:
            with log_lock:
                live_log.write(result.to_json() + "\n")
                live_log.flush()
        return result

    def attempt(bundle: PromptBundle) -> InferenceResult:
        started = time.monotonic()
        failure: _RequestFailure | None = None
        attempts = 0
        for attempts in range(1, config.max_retries + 2):
            try:
                raw_text = backend.predict(bundle)
            except _RequestFailure as exc:
                failure = exc
                if attempts <= config.max_retries:
                    time.sleep(_RETRY_BACKOFF_S * attempts)
                continue
            latency = (time.monotonic() - started) * 1000.0
            return InferenceResult(
                participant_id=bundle.participant_id, raw_text=raw_text,
                backend_id=backend.backend_id, latency_ms=latency,
                attempt_count=attempts)
        latency = (time.monotonic() - started) * 1000.0
        return InferenceResult(
            participant_id=bundle.participant_id, raw_text="",
            backend_id=backend.backend_id, latency_ms=latency,
            attempt_count=attempts, failure=failure.reason if failure else "unknown")

    results: list[InferenceResult] = []
    remaining = list(bundles)
    if remaining:
        first = attempt(remaining[0])
        if first.failure and first.failure.startswith("connection_error"):
            raise BackendError(
                f"endpoint unreachable at start of run: {first.failure}")
        results.append(record(first))
        remaining = remaining[1:]

    if remaining:
        if config.parallelism > 1:
            with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
                for result in pool.map(attempt, remaining):
                    results.append(record(result))
        else:
            for bundle in remaining:
                results.append(record(attempt(bundle)))

    results.sort(key=lambda r: r.participant_id)
    return results


# ---------------------------------------------------------------------------
# Run persistence
# ---------------------------------------------------------------------------


def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def persist_run(results: Sequence[InferenceResult], metadata: dict,
                run_dir: str | Path) -> Path:
    """Write manifest.json and results.jsonl; the run then replays into scoring."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(results, key=lambda r: r.participant_id)
    with (run_dir / RESULTS_NAME).open("w", encoding="utf-8", newline="\n") as fh:
        for result in ordered:
            fh.write(result.to_json(include_latency=False) + "\n")
    manifest = dict(metadata)
    manifest["n_results"] = len(ordered)
    manifest["status"] = "complete"
    if ordered:
        latencies = [r.latency_ms for r in ordered]
        manifest["latency_ms"] = {
            "total": round(sum(latencies), 3),
            "mean": round(sum(latencies) / len(latencies), 3),
            "max": round(max(latencies), 3),
        }
    manifest.setdefault("finished_at", utc_now_iso())
    (run_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return run_dir


def write_running_manifest(metadata: dict, run_dir: str | Path) -> Path:
    """Mark a run as in progress so an interrupted run is detectable."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = dict(metadata)
    manifest["status"] = "running"
    (run_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return run_dir


def load_run(run_dir: str | Path, allow_partial: bool = False) -> tuple[dict, list[InferenceResult]]:
    """Read back a persisted run, refusing incomplete ones unless allowed."""
    run_dir = Path(run_dir)
    manifest_path = run_dir / MANIFEST_NAME
    results_path = run_dir / RESULTS_NAME
    if not results_path.exists():
        raise DataError(f"no results file in run directory: {results_path}")
    manifest: dict = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    results = []
    with results_path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                results.append(InferenceResult.from_json(line))
    complete = manifest.get("status") == "complete" and manifest.get("n_results") == len(results)
    if not complete and not allow_partial:
        raise PartialRunError(
            f"run at {run_dir} looks interrupted ({len(results)} results, "
            f"status {manifest.get('status', 'missing')!r}); rerun it or pass --allow-partial")
    return manifest, results
