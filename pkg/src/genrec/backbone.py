"""Causal transformer decoder with low-rank adapters on the attention projections."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

ADAPTER_SITES = ("query", "key", "value", "output")


@dataclass
class ModelConfig:
    vocab_size: int = 8192
    d_model: int = 256
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 1024
    max_len: int = 256
    dropout: float = 0.0
    adapter_rank: int = 8
    adapter_alpha: float = 16.0
    adapter_targets: tuple[str, ...] = ("query", "value")

    def __post_init__(self) -> None:
        self.adapter_targets = tuple(self.adapter_targets)
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.adapter_rank < 0:
            raise ValueError("adapter_rank must be >= 0")
        if self.adapter_alpha <= 0:
            raise ValueError("adapter_alpha must be > 0")
        unknown = set(self.adapter_targets) - set(ADAPTER_SITES)
        if unknown:
            raise ValueError(f"unknown adapter targets {sorted(unknown)}")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.d_ff) < 1:
            raise ValueError("sizes must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adapter_targets"] = list(self.adapter_targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class LoRALinear(nn.Module):
    """Bias-free linear map plus an optional ``(alpha / r) * B @ A`` update.

    ``B`` starts at zero, so a fresh adapter leaves the output untouched.
    """

    def __init__(self, d_in: int, d_out: int, rank: int = 0, alpha: float = 1.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.rank = rank
        self.scaling = alpha / rank if rank else 0.0
        self.enabled = rank > 0
        if rank:
            self.lora_A = nn.Parameter(torch.empty(rank, d_in))
            self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        else:
            self.register_parameter("lora_A", None)
            self.register_parameter("lora_B", None)
        self.reset_parameters()

    def reset_parameters(self) -> None:
        nn.init.normal_(self.weight, std=0.02)
        if self.rank:
            nn.init.kaiming_uniform_(self.lora_A, a=math.sqrt(5))
            nn.init.zeros_(self.lora_B)

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return (x @ self.lora_A.T) @ self.lora_B.T * self.scaling

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x @ self.weight.T
        if self.rank and self.enabled:
            out = out + self.delta(x)
        return out


class CausalSelfAttention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.d_head = cfg.d_model // cfg.n_heads
        for site in ADAPTER_SITES:
            rank = cfg.adapter_rank if site in cfg.adapter_targets else 0
            setattr(self, site, LoRALinear(cfg.d_model, cfg.d_model, rank, cfg.adapter_alpha))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        q = self.query(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        k = self.key(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        v = self.value(x).view(B, T, self.n_heads, self.d_head).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.d_head)
        future = torch.ones(T, T, dtype=torch.bool, device=x.device).triu(1)
        att = att.masked_fill(future, float("-inf")).softmax(dim=-1)
        y = self.drop(att) @ v
        return self.output(y.transpose(1, 2).reshape(B, T, C))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff_in = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff_out = nn.Linear(cfg.d_ff, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop(self.attn(self.ln1(x)))
        return x + self.drop(self.ff_out(F.gelu(self.ff_in(self.ln2(x)))))


class Decoder(nn.Module):
    """Pre-norm GPT-style decoder with learned positional embeddings."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.config = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=0.02)
                if getattr(m, "bias", None) is not None:
                    nn.init.zeros_(m.bias)

    def adapter_layers(self) -> list[LoRALinear]:
        return [m for m in self.modules() if isinstance(m, LoRALinear) and m.rank > 0]

    def set_adapters(self, enabled: bool) -> None:
        for m in self.adapter_layers():
            m.enabled = enabled

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        if token_ids.dim() != 2:
            raise ValueError(f"token_ids must be [batch, seq], got shape {tuple(token_ids.shape)}")
        T = token_ids.shape[1]
        if T > self.config.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        if T == 0:
            raise ValueError("empty sequence")
        if token_ids.min() < 0 or token_ids.max() >= self.config.vocab_size:
            raise ValueError("token id out of range")
        pos = torch.arange(T, device=token_ids.device)
        x = self.drop(self.tok_emb(token_ids) + self.pos_emb(pos))
        for block in self.blocks:
            x = block(x)
        return self.lm_head(self.ln_f(x))


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> Decoder:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        model = Decoder(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    return model.to(dtype)


def forward(model: Decoder, token_ids: torch.Tensor) -> torch.Tensor:
    return model(token_ids)


# --------------------------------------------------------------------------
# batches and loss


@dataclass
class Batch:
    token_ids: torch.Tensor
    loss_mask: torch.Tensor
    lengths: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.token_ids.shape != self.loss_mask.shape:
            raise ValueError("token_ids and loss_mask shapes differ")

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def num_targets(self) -> int:
        return int(self.loss_mask[:, 1:].sum())

    def split(self, sizes: Sequence[int]) -> list["Batch"]:
        out, start = [], 0
        for n in sizes:
            sl = slice(start, start + n)
            out.append(Batch(self.token_ids[sl], self.loss_mask[sl], self.lengths[sl]))
            start += n
        return out


def collate(sequences: Sequence[tuple[Sequence[int], int]], pad_id: int = 0) -> Batch:
    """Right-pad ``(token_ids, first_output_index)`` pairs to the longest one.

    The loss mask is 1 from ``first_output_index`` through the last real token.
    """
    if not sequences:
        raise ValueError("empty batch")
    width = max(len(ids) for ids, _ in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.long)
    for row, (toks, start) in enumerate(sequences):
        if not 1 <= start <= len(toks):
            raise ValueError(f"output start {start} outside sequence of length {len(toks)}")
        ids[row, : len(toks)] = torch.as_tensor(list(toks), dtype=torch.long)
        mask[row, start : len(toks)] = 1
    return Batch(ids, mask, [len(t) for t, _ in sequences])


def token_nll(model: Decoder, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-position next-token negative log-likelihood and the matching mask."""
    logits = model(batch.token_ids)[:, :-1]
    targets = batch.token_ids[:, 1:]
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    return nll.view(targets.shape), batch.loss_mask[:, 1:].to(nll.dtype)


def loss_sum(model: Decoder, batch: Batch) -> tuple[torch.Tensor, int]:
    nll, mask = token_nll(model, batch)
    return (nll * mask).sum(), int(mask.sum())


def loss(model: Decoder, batch: Batch) -> torch.Tensor:
    """Mean cross-entropy over masked (response + EOS) positions."""
    total, count = loss_sum(model, batch)
    if count == 0:
        raise ValueError("loss mask selects no positions")
    return total / count


# --------------------------------------------------------------------------
# parameter views


def is_adapter_name(name: str) -> bool:
    return name.endswith(".lora_A") or name.endswith(".lora_B")


def trainable_parameters(model: Decoder, adapters_only: bool = False) -> dict[str, nn.Parameter]:
    params = dict(model.named_parameters())
    if not adapters_only:
        return params
    adapters = {n: p for n, p in params.items() if is_adapter_name(n)}
    if not adapters:
        raise ValueError("adapters_only requested but the model has no adapters (adapter_rank = 0)")
    return adapters


def decays(name: str, param: torch.Tensor) -> bool:
    """Weight decay applies to base matrices only: not adapters, norms or biases."""
    return param.dim() >= 2 and not is_adapter_name(name)
