"""Training loop: warmup/decay schedule, AdamW updates, epochs, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import random
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from .backbone import Batch, Decoder, ModelConfig, build_model, collate, decays, loss_sum, trainable_parameters
from .checkpoint import load_model, read_tensors, save_model, write_tensors
from .ingest import Example, LeaveOneOutSplit
from .pipeline import encode_training_example, response_reserve
from .prompt import PromptTemplate, assign_templates, default_template_bank
from .tokenizer import BPETokenizer

log = logging.getLogger(__name__)

SCHEDULE_NAME = "linear warmup, then linear decay to 10% of peak at the final step"
FINAL_LR_FRACTION = 0.1

LossFn = Callable[[torch.nn.Module, object], tuple[torch.Tensor, int]]


class NumericalError(RuntimeError):
    """Raised when the loss or gradients stop being finite."""


@dataclass
class TrainConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 1000
    batch_size: int = 128
    micro_batch_size: int | None = None
    epochs: int = 5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    grad_clip_norm: float | None = 1.0
    seed: int = 0
    adapters_only: bool = False

    def __post_init__(self) -> None:
        self.betas = tuple(self.betas)
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.micro_batch_size is not None and self.micro_batch_size < 1:
            raise ValueError("micro_batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def steps_per_epoch(num_examples: int, batch_size: int) -> int:
    return math.ceil(num_examples / batch_size)


def lr_schedule(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate used for optimizer step ``step`` (1-based)."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if total_steps <= cfg.warmup_steps:
        return cfg.peak_lr
    frac = min(max((step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps), 0.0), 1.0)
    return cfg.peak_lr * (1.0 - (1.0 - FINAL_LR_FRACTION) * frac)


# --------------------------------------------------------------------------
# optimizer state and a single step


@dataclass
class TrainState:
    optimizer: torch.optim.AdamW
    params: dict[str, torch.nn.Parameter]
    total_steps: int
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    rng: random.Random = field(default_factory=random.Random)

    def moments(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        out = {}
        for name, p in self.params.items():
            st = self.optimizer.state.get(p)
            if st:
                out[name] = (st["exp_avg"], st["exp_avg_sq"])
        return out


def init_state(model: torch.nn.Module, cfg: TrainConfig, total_steps: int, adapters_only: bool | None = None) -> TrainState:
    """Freeze whatever is not trained and build AdamW with decay on base matrices only."""
    adapters_only = cfg.adapters_only if adapters_only is None else adapters_only
    if isinstance(model, Decoder):
        params = trainable_parameters(model, adapters_only)
    else:
        params = dict(model.named_parameters())
    for name, p in model.named_parameters():
        p.requires_grad_(name in params)
    decay = [p for n, p in params.items() if decays(n, p)]
    plain = [p for n, p in params.items() if not decays(n, p)]
    groups = [g for g in ({"params": decay, "weight_decay": cfg.weight_decay}, {"params": plain, "weight_decay": 0.0}) if g["params"]]
    opt = torch.optim.AdamW(groups, lr=0.0, betas=cfg.betas, eps=cfg.eps)
    return TrainState(opt, params, total_steps, rng=random.Random(cfg.seed))


def accumulate_gradients(model: torch.nn.Module, micro_batches: Sequence, loss_fn: LossFn = loss_sum) -> tuple[float, int]:
    """Backpropagate the token-weighted mean loss over several micro-batches.

    Gradients of the per-micro-batch sums are added and divided once by the
    total target count, so any split of a batch gives the single-batch gradient.
    """
    total, count = 0.0, 0
    for mb in micro_batches:
        s, n = loss_fn(model, mb)
        if n:
            s.backward()
            total += float(s.detach())
            count += n
    if count == 0:
        raise ValueError("loss mask selects no positions")
    for p in model.parameters():
        if p.grad is not None:
            p.grad.div_(count)
    return total / count, count


def train_step(
    model: torch.nn.Module,
    state: TrainState,
    batch,
    cfg: TrainConfig,
    loss_fn: LossFn = loss_sum,
    lr: float | None = None,
) -> tuple[torch.nn.Module, TrainState, float]:
    step = state.step + 1
    lr = lr_schedule(cfg, step, state.total_steps) if lr is None else lr
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    if isinstance(batch, Batch) and cfg.micro_batch_size and cfg.micro_batch_size < len(batch):
        sizes = [cfg.micro_batch_size] * (len(batch) // cfg.micro_batch_size)
        if len(batch) % cfg.micro_batch_size:
            sizes.append(len(batch) % cfg.micro_batch_size)
        parts = batch.split(sizes)
    else:
        parts = [batch]
    value, _ = accumulate_gradients(model, parts, loss_fn)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {step} (lr={lr:.3g})")
    if cfg.grad_clip_norm:
        norm = torch.nn.utils.clip_grad_norm_(list(state.params.values()), cfg.grad_clip_norm)
        if not torch.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at step {step} (loss={value:.4g}, lr={lr:.3g})")
    state.optimizer.step()
    state.step = step
    return model, state, value


# --------------------------------------------------------------------------
# state persistence (for resume)


def save_state(path: Path, state: TrainState) -> None:
    tensors = {}
    for name, (m, v) in state.moments().items():
        tensors[f"exp_avg.{name}"] = m
        tensors[f"exp_avg_sq.{name}"] = v
    tensors["torch_rng"] = torch.random.get_rng_state().to(torch.int64)
    version, internal, gauss = state.rng.getstate()
    meta = {
        "step": state.step,
        "epoch": state.epoch,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "total_steps": state.total_steps,
        "py_rng": [version, list(internal), gauss],
    }
    write_tensors(path, tensors, {"train_state": meta})


def load_state(path: Path, state: TrainState) -> TrainState:
    header, tensors = read_tensors(path)
    meta = header["train_state"]
    for name, p in state.params.items():
        if f"exp_avg.{name}" in tensors:
            st = state.optimizer.state[p]
            st["step"] = torch.tensor(float(meta["step"]))
            st["exp_avg"] = tensors[f"exp_avg.{name}"].to(p.dtype)
            st["exp_avg_sq"] = tensors[f"exp_avg_sq.{name}"].to(p.dtype)
    torch.random.set_rng_state(tensors["torch_rng"].to(torch.uint8))
    version, internal, gauss = meta["py_rng"]
    state.rng.setstate((version, tuple(internal), gauss))
    state.step = meta["step"]
    state.epoch = meta["epoch"]
    state.best_val = math.inf if meta["best_val"] is None else meta["best_val"]
    state.total_steps = meta["total_steps"]
    return state


# --------------------------------------------------------------------------
# full run


def encode_split(
    examples: Sequence[Example],
    catalog: Mapping[str, str],
    tokenizer: BPETokenizer,
    max_len: int,
    bank: Sequence[PromptTemplate] | None,
    seed: int,
) -> list[tuple[list[int], int]]:
    """Tokenize examples.  With a bank, templates are drawn per example; without, template 0 is used."""
    bank = list(bank) if bank else [default_template_bank()[0]]
    formatted = assign_templates([(e.user_id, e.history, e.target) for e in examples], bank, seed, catalog)
    by_id = {t.template_id: t for t in bank}
    reserve = response_reserve(tokenizer, catalog)
    return [
        encode_training_example(e.history, e.target, catalog, by_id[f.template_id], tokenizer, max_len, reserve)
        for e, f in zip(examples, formatted)
    ]


@torch.no_grad()
def evaluate_loss(model: Decoder, encoded: Sequence[tuple[list[int], int]], batch_size: int) -> float:
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(encoded), batch_size):
        s, n = loss_sum(model, collate(encoded[i : i + batch_size]))
        total += float(s)
        count += n
    model.train(was_training)
    return total / count if count else math.nan


class _Log:
    def __init__(self, path: Path, append: bool):
        self.fh = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


EpochCallback = Callable[[int, Decoder, dict], bool]


def fit(
    split: LeaveOneOutSplit,
    catalog: Mapping[str, str],
    tokenizer: BPETokenizer,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    out_dir: str | Path,
    *,
    resume: bool = False,
    init_model: Decoder | None = None,
    bank: Sequence[PromptTemplate] | None = None,
    eval_template: PromptTemplate | None = None,
    on_epoch_end: EpochCallback | None = None,
    dtype: torch.dtype = torch.float32,
) -> Path:
    """Train on ``split.train``, validate each epoch, write ``best.ckpt`` / ``last.ckpt``.

    ``on_epoch_end(epoch, model, record)`` may return True to stop early.
    Returns the path of the best checkpoint.
    """
    if not split.train:
        raise ValueError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path, last_path, state_path = out / "best.ckpt", out / "last.ckpt", out / "last.state"
    bank = list(bank) if bank else default_template_bank()[:4]
    eval_template = eval_template or bank[0]

    if model_cfg.vocab_size != tokenizer.vocab_size:
        raise ValueError(f"model vocab_size {model_cfg.vocab_size} != tokenizer vocab_size {tokenizer.vocab_size}")
    train_enc = encode_split(split.train, catalog, tokenizer, model_cfg.max_len, bank, train_cfg.seed)
    valid_enc = encode_split(split.valid, catalog, tokenizer, model_cfg.max_len, [eval_template], train_cfg.seed)

    total = train_cfg.epochs * steps_per_epoch(len(train_enc), train_cfg.batch_size)
    resuming = resume and last_path.exists() and state_path.exists()
    if resuming:
        model, _ = load_model(last_path)
        model = model.to(dtype)
    else:
        torch.manual_seed(train_cfg.seed)
        model = init_model if init_model is not None else build_model(model_cfg, seed=train_cfg.seed, dtype=dtype)
    state = init_state(model, train_cfg, total)
    if resuming:
        load_state(state_path, state)
        log.info("resumed from %s at step %d (epoch %d)", last_path, state.step, state.epoch)

    logf = _Log(out / "train_log.jsonl", append=resuming)
    if not resuming:
        logf.write({
            "event": "header",
            "schedule": SCHEDULE_NAME,
            "model_config": model_cfg.to_dict(),
            "train_config": train_cfg.to_dict(),
            "num_train": len(train_enc),
            "num_valid": len(valid_enc),
            "total_steps": total,
            "seed": train_cfg.seed,
        })
    meta = {"seed": train_cfg.seed, "train_config": train_cfg.to_dict()}
    start = time.perf_counter()
    model.train()
    try:
        while state.epoch < train_cfg.epochs:
            order = list(range(len(train_enc)))
            state.rng.shuffle(order)
            for i in range(0, len(order), train_cfg.batch_size):
                batch = collate([train_enc[j] for j in order[i : i + train_cfg.batch_size]])
                lr = lr_schedule(train_cfg, state.step + 1, total)
                _, _, value = train_step(model, state, batch, train_cfg)
                logf.write({"event": "step", "step": state.step, "epoch": state.epoch + 1, "lr": lr, "loss": value,
                            "wall_time": round(time.perf_counter() - start, 4)})
            state.epoch += 1
            val = evaluate_loss(model, valid_enc, train_cfg.batch_size) if valid_enc else math.nan
            record = {"event": "epoch", "epoch": state.epoch, "step": state.step, "val_loss": val,
                      "wall_time": round(time.perf_counter() - start, 4)}
            improved = not math.isnan(val) and val < state.best_val
            if improved or not best_path.exists():
                state.best_val = val if improved else state.best_val
                save_model(best_path, model, {**meta, "epoch": state.epoch, "val_loss": val})
            save_model(last_path, model, {**meta, "epoch": state.epoch, "val_loss": val})
            save_state(state_path, state)
            stop = bool(on_epoch_end and on_epoch_end(state.epoch, model, record))
            logf.write(record)
            if stop:
                break
    finally:
        logf.close()
    model.eval()
    return best_path
