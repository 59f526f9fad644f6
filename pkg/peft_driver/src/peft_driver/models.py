"""Base models: built-in toy byte-level causal LMs, or a Hugging Face model.

Toy presets exist so the training loop can be exercised end to end on CPU in
seconds with no downloads; real runs point base_model_id at a hub model and
need the transformers stack (and a GPU for anything large).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import ByteTokenizer
from .errors import ModelLoadError

TOY_PRESETS = {
    "femto": dict(d_model=32, n_layers=1, n_heads=2, d_ff=64),
    "mini": dict(d_model=64, n_layers=2, n_heads=4, d_ff=128),
    "small": dict(d_model=128, n_layers=4, n_heads=4, d_ff=512),
}


@dataclass
class LoadedModel:
    model: nn.Module
    tokenizer: object
    bos_id: int
    eos_id: int
    pad_id: int
    description: str


class Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model, bias=False)
        self.k_proj = nn.Linear(d_model, d_model, bias=False)
        self.v_proj = nn.Linear(d_model, d_model, bias=False)
        self.o_proj = nn.Linear(d_model, d_model, bias=False)

    def forward(self, x):
        batch, seq, d_model = x.shape
        shape = (batch, seq, self.n_heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        out = nn.functional.scaled_dot_product_attention(q, k, v, is_causal=True)
        out = out.transpose(1, 2).reshape(batch, seq, d_model)
        return self.o_proj(out)


class MLP(nn.Module):
    def __init__(self, d_model: int, d_ff: int):
        super().__init__()
        self.up_proj = nn.Linear(d_model, d_ff, bias=False)
        self.down_proj = nn.Linear(d_ff, d_model, bias=False)

    def forward(self, x):
        return self.down_proj(nn.functional.gelu(self.up_proj(x)))


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = Attention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.mlp = MLP(d_model, d_ff)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))


class ToyByteLM(nn.Module):
    """A minimal decoder-only byte LM with conventionally named projections."""

    def __init__(self, d_model: int, n_layers: int, n_heads: int, d_ff: int,
                 vocab_size: int = ByteTokenizer.vocab_size, max_len: int = 2048):
        super().__init__()
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, d_model)
        self.pos_emb = nn.Embedding(max_len, d_model)
        self.blocks = nn.ModuleList(
            Block(d_model, n_heads, d_ff) for _ in range(n_layers))
        self.ln_f = nn.LayerNorm(d_model)
        self.lm_head = nn.Linear(d_model, vocab_size, bias=False)

    def forward(self, input_ids):
        seq = input_ids.shape[1]
        if seq > self.max_len:
            raise ValueError(f"sequence length {seq} exceeds model maximum {self.max_len}")
        positions = torch.arange(seq, device=input_ids.device)
        x = self.tok_emb(input_ids) + self.pos_emb(positions)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.ln_f(x))


def load_base_model(base_model_id: str, seed: int = 0) -> LoadedModel:
    """Resolve a base model id: "toy:<preset>" builds a local byte LM."""
    if base_model_id.startswith("toy:"):
        preset = base_model_id.split(":", 1)[1]
        if preset not in TOY_PRESETS:
            raise ModelLoadError(
                f"unknown toy preset {preset!r}; available: {sorted(TOY_PRESETS)}")
        torch.manual_seed(seed)
        model = ToyByteLM(**TOY_PRESETS[preset])
        tokenizer = ByteTokenizer()
        return LoadedModel(model=model, tokenizer=tokenizer,
                           bos_id=ByteTokenizer.BOS, eos_id=ByteTokenizer.EOS,
                           pad_id=ByteTokenizer.PAD,
                           description=f"toy byte LM ({preset})")
    return _load_hub_model(base_model_id)


def _load_hub_model(model_id: str) -> LoadedModel:
    try:
        from transformers import AutoModelForCausalLM, AutoTokenizer
    except ImportError as exc:
        raise ModelLoadError(
            f"loading {model_id!r} requires the transformers package: {exc}") from None
    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModelForCausalLM.from_pretrained(model_id)
    except Exception as exc:
        raise ModelLoadError(f"failed to load base model {model_id!r}: {exc}") from None

    class _HubTokenizer:
        def encode(self, text: str) -> list[int]:
            return tokenizer.encode(text, add_special_tokens=False)

    bos = tokenizer.bos_token_id if tokenizer.bos_token_id is not None else tokenizer.eos_token_id
    eos = tokenizer.eos_token_id
    pad = tokenizer.pad_token_id if tokenizer.pad_token_id is not None else eos

    class _HubModel(nn.Module):
        def __init__(self, inner):
            super().__init__()
            self.inner = inner

        def forward(self, input_ids):
            return self.inner(input_ids=input_ids).logits

    return LoadedModel(model=_HubModel(model), tokenizer=_HubTokenizer(),
                       bos_id=bos, eos_id=eos, pad_id=pad,
                       description=f"hub model {model_id}")
