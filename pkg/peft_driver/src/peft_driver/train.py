"""The training loop: frozen base, low-rank adapters, per-step loss log."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .data import encode_example, file_sha256, load_training_file
from .errors import DriverError
from .lora import DEFAULT_TARGET_MODULES, adapter_state, inject_lora, mark_only_adapters_trainable
from .models import load_base_model

ADAPTER_NAME = "adapter.pt"
LOSS_LOG_NAME = "loss_log.jsonl"
METADATA_NAME = "metadata.json"

# Pass-through knobs with their documented defaults; anything unreported by
# the experiment being reproduced stays configurable rather than hard-coded.
DEFAULT_OPTIONS = {
    "learning_rate": 5e-3,
    "batch_size": 1,
    "lora_rank": 8,
    "lora_alpha": 16.0,
    "lora_dropout": 0.0,
    "max_seq_len": 1024,
    "seed": 0,
    "target_modules": list(DEFAULT_TARGET_MODULES),
    "loss_smoothing": 0.5,  # EMA coefficient for the smoothed-loss column
}


@dataclass
class TrainSpec:
    base_model_id: str
    train_file: Path
    output_dir: Path
    epochs: int = 10
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        self.train_file = Path(self.train_file)
        self.output_dir = Path(self.output_dir)
        if self.epochs < 1:
            raise DriverError(f"epochs must be >= 1, got {self.epochs}")
        unknown = set(self.options) - set(DEFAULT_OPTIONS)
        if unknown:
            raise DriverError(f"unknown training options: {sorted(unknown)}")

    def resolved_options(self) -> dict:
        merged = dict(DEFAULT_OPTIONS)
        merged.update(self.options)
        return merged

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainSpec":
        path = Path(path)
        if not path.exists():
            raise DriverError(f"spec file not found: {path}")
        try:
            document = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DriverError(f"spec file {path} is not valid JSON: {exc}") from None
        try:
            return cls(
                base_model_id=document["base_model_id"],
                train_file=Path(document["train_file"]),
                output_dir=Path(document["output_dir"]),
                epochs=int(document.get("epochs", 10)),
                options=dict(document.get("options", {})),
            )
        except KeyError as exc:
            raise DriverError(f"spec file {path} is missing field {exc}") from None


@dataclass(frozen=True)
class TrainResult:
    adapter_path: Path
    loss_log_path: Path
    metadata_path: Path
    steps: int
    initial_smoothed_loss: float
    final_smoothed_loss: float


def _batches(encoded, batch_size, pad_id):
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start:start + batch_size]
        width = max(len(ids) for ids, _ in chunk)
        input_ids = torch.full((len(chunk), width), pad_id, dtype=torch.long)
        labels = torch.full((len(chunk), width), -100, dtype=torch.long)
        for row, (ids, labs) in enumerate(chunk):
            input_ids[row, :len(ids)] = torch.tensor(ids, dtype=torch.long)
            labels[row, :len(labs)] = torch.tensor(labs, dtype=torch.long)
        yield input_ids, labels


def train(spec: TrainSpec) -> TrainResult:
    """Run adapter training per the spec; emits adapter, loss log, metadata."""
    options = spec.resolved_options()
    examples = load_training_file(spec.train_file)
    train_checksum = file_sha256(spec.train_file)

    seed = int(options["seed"])
    random.seed(seed)
    torch.manual_seed(seed)

    loaded = load_base_model(spec.base_model_id, seed=seed)
    model = loaded.model
    n_adapters = inject_lora(model,
                             target_modules=tuple(options["target_modules"]),
                             rank=int(options["lora_rank"]),
                             alpha=float(options["lora_alpha"]),
                             dropout=float(options["lora_dropout"]))
    if n_adapters == 0:
        raise DriverError(
            f"no modules matched target_modules={options['target_modules']}")
    trainable, total = mark_only_adapters_trainable(model)

    encoded = [encode_example(example, loaded.tokenizer,
                              int(options["max_seq_len"]),
                              loaded.bos_id, loaded.eos_id)
               for example in examples]

    optimizer = torch.optim.Adam(
        (p for p in model.parameters() if p.requires_grad),
        lr=float(options["learning_rate"]))
    loss_fn = nn.CrossEntropyLoss(ignore_index=-100)
    smoothing = float(options["loss_smoothing"])

    spec.output_dir.mkdir(parents=True, exist_ok=True)
    loss_log_path = spec.output_dir / LOSS_LOG_NAME
    records = []
    smoothed = None
    step = 0
    model.train()
    with loss_log_path.open("w", encoding="utf-8", newline="\n") as log:
        for epoch in range(1, spec.epochs + 1):
            for input_ids, labels in _batches(encoded, int(options["batch_size"]),
                                              loaded.pad_id):
                step += 1
                optimizer.zero_grad()
                logits = model(input_ids)
                loss = loss_fn(logits[:, :-1].reshape(-1, logits.shape[-1]),
                               labels[:, 1:].reshape(-1))
                loss.backward()
                optimizer.step()
                value = float(loss.detach())
                smoothed = value if smoothed is None else (
                    smoothing * value + (1 - smoothing) * smoothed)
                record = {"step": step, "epoch": epoch, "loss": value,
                          "smoothed_loss": smoothed}
                records.append(record)
                log.write(json.dumps(record) + "\n")

    adapter_path = spec.output_dir / ADAPTER_NAME
    torch.save({"adapters": adapter_state(model),
                "base_model_id": spec.base_model_id,
                "target_modules": list(options["target_modules"])},
               adapter_path)

    metadata_path = spec.output_dir / METADATA_NAME
    metadata = {
        "base_model": loaded.description,
        "base_model_id": spec.base_model_id,
        "train_file": str(spec.train_file),
        "train_file_sha256": train_checksum,
        "n_examples": len(examples),
        "epochs": spec.epochs,
        "steps": step,
        "options": {k: options[k] for k in sorted(options)},
        "adapter_modules": n_adapters,
        "trainable_parameters": trainable,
        "total_parameters": total,
        "initial_smoothed_loss": records[0]["smoothed_loss"],
        "final_smoothed_loss": records[-1]["smoothed_loss"],
    }
    metadata_path.write_text(json.dumps(metadata, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    return TrainResult(adapter_path=adapter_path, loss_log_path=loss_log_path,
                       metadata_path=metadata_path, steps=step,
                       initial_smoothed_loss=records[0]["smoothed_loss"],
                       final_smoothed_loss=records[-1]["smoothed_loss"])
