"""Parameter-efficient fine-tuning driver for chat-style JSONL training files.

Consumes {system, user, assistant} JSONL produced by the evaluation harness,
trains low-rank adapters on a frozen base model, and emits adapter weights
plus a per-step loss log. Inputs and outputs are plain files on purpose:
nothing upstream ever links against this package.
"""

__version__ = "0.1.0"
