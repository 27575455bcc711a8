import json
import math

import pytest
import torch

from genrec.backbone import build_model, collate, loss_sum
from genrec.checkpoint import load_model
from genrec.ingest import Catalog, Example, LeaveOneOutSplit
from genrec.tokenizer import BPETokenizer
from genrec.train import (
    NumericalError,
    TrainConfig,
    accumulate_gradients,
    encode_split,
    fit,
    init_state,
    lr_schedule,
    steps_per_epoch,
    train_step,
)

from conftest import tiny_config


def test_schedule_constants():
    cfg = TrainConfig()
    total = 10_000
    assert lr_schedule(cfg, 1000, total) == 3e-4
    assert lr_schedule(cfg, 500, total) == pytest.approx(1.5e-4, rel=1e-12)
    assert lr_schedule(cfg, total, total) == pytest.approx(3e-5, rel=1e-12)
    assert lr_schedule(cfg, 0, total) == 0.0


def test_schedule_continuous_and_non_negative():
    cfg = TrainConfig(warmup_steps=100)
    total = 1000
    lrs = [lr_schedule(cfg, s, total) for s in range(0, total + 50)]
    assert min(lrs) >= 0
    assert abs(lr_schedule(cfg, 99, total) - lr_schedule(cfg, 100, total)) <= cfg.peak_lr / 100 + 1e-15
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= cfg.peak_lr / 100 + 1e-15


def test_steps_per_epoch():
    assert 5 * steps_per_epoch(640, 128) == 25
    assert steps_per_epoch(641, 128) == 6


def _batch(seed=0, n=4, T=12, vocab=50):
    g = torch.Generator().manual_seed(seed)
    return collate([(torch.randint(3, vocab, (T,), generator=g).tolist(), 5) for _ in range(n)])


def test_zero_lr_leaves_parameters_unchanged():
    model = build_model(tiny_config(), seed=0)
    before = {n: p.detach().clone() for n, p in model.named_parameters()}
    cfg = TrainConfig(warmup_steps=0)
    state = init_state(model, cfg, 10)
    train_step(model, state, _batch(), cfg, lr=0.0)
    assert state.step == 1
    for n, p in model.named_parameters():
        assert torch.equal(p, before[n]), n


def test_ten_steps_are_deterministic():
    def run():
        torch.manual_seed(0)
        model = build_model(tiny_config(dropout=0.1), seed=3)
        cfg = TrainConfig(warmup_steps=2, peak_lr=1e-2)
        state = init_state(model, cfg, 10)
        for s in range(10):
            train_step(model, state, _batch(s), cfg)
        return b"".join(p.detach().numpy().tobytes() for p in model.parameters())

    assert run() == run()


def test_quadratic_toy_reaches_minimizer():
    c = torch.tensor([1.0, 0.25, -1.5], dtype=torch.float64)

    class Quadratic(torch.nn.Module):
        def __init__(self):
            super().__init__()
            self.x = torch.nn.Parameter(torch.tensor([3.0, -2.0, 0.5], dtype=torch.float64))

    model = Quadratic()
    cfg = TrainConfig(peak_lr=0.1, warmup_steps=0, weight_decay=0.0, grad_clip_norm=None)
    state = init_state(model, cfg, 200)
    for _ in range(200):
        train_step(model, state, None, cfg, loss_fn=lambda m, _: (((m.x - c) ** 2).sum(), 1))
    assert (model.x.detach() - c).abs().max().item() < 1e-3


def test_split_batch_gives_the_same_gradient():
    model = build_model(tiny_config(), seed=0)
    g = torch.Generator().manual_seed(0)
    seqs = [(torch.randint(3, 50, (int(torch.randint(6, 20, (1,), generator=g)),), generator=g).tolist(), 4)
            for _ in range(128)]
    batch = collate(seqs)

    def grads(parts):
        model.zero_grad()
        accumulate_gradients(model, parts)
        return torch.cat([p.grad.flatten() for p in model.parameters() if p.grad is not None])

    whole = grads([batch])
    halves = grads(batch.split([64, 64]))
    assert ((whole - halves).norm() / whole.norm()).item() < 1e-6

    # the same holds for a full optimizer step with micro-batching
    def step(micro):
        m = build_model(tiny_config(), seed=0)
        cfg = TrainConfig(warmup_steps=0, peak_lr=1e-3, micro_batch_size=micro)
        st = init_state(m, cfg, 1)
        train_step(m, st, batch, cfg)
        return torch.cat([p.detach().flatten() for p in m.parameters()]), torch.cat([p.detach().flatten() for p in build_model(tiny_config(), seed=0).parameters()])

    (one, start), (two, _) = step(None), step(64)
    assert ((one - two).norm() / (one - start).norm()).item() < 1e-6


def test_non_finite_loss_raises():
    model = build_model(tiny_config(), seed=0)
    cfg = TrainConfig(warmup_steps=0)
    state = init_state(model, cfg, 1)

    def nan_loss(m, batch):
        s, n = loss_sum(m, batch)
        return s * float("nan"), n

    with pytest.raises(NumericalError, match="non-finite"):
        train_step(model, state, _batch(), cfg, loss_fn=nan_loss)


# -- fit on a small synthetic split -------------------------------------------------

TITLES = ["Alpha (1990)", "Beta (1991)", "Gamma (1992)", "Delta (1993)", "Epsilon (1994)"]


@pytest.fixture(scope="module")
def small_task():
    catalog = Catalog([(str(i), t) for i, t in enumerate(TITLES)])
    train = [Example(f"u{j}", (str(j % 5),), str((j + 1) % 5)) for j in range(640)]
    valid = [Example(f"u{j}", (str(j % 5), str((j + 1) % 5)), str((j + 2) % 5)) for j in range(10)]
    split = LeaveOneOutSplit(train, valid, [])
    from genrec.prompt import default_template_bank

    tok = BPETokenizer.train(TITLES * 3 + [t.instruction_text for t in default_template_bank()] * 3, 700)
    return split, catalog, tok


def _fit(small_task, out, **train_kw):
    split, catalog, tok = small_task
    mcfg = tiny_config(vocab_size=tok.vocab_size, max_len=128)
    tcfg = TrainConfig(**{"epochs": 5, "batch_size": 128, "warmup_steps": 5, "peak_lr": 1e-3, **train_kw})
    return fit(split, catalog, tok, mcfg, tcfg, out)


def _log(out):
    return [json.loads(line) for line in (out / "train_log.jsonl").read_text().splitlines()]


def test_fit_step_count_and_log(small_task, tmp_path):
    best = _fit(small_task, tmp_path)
    log = _log(tmp_path)
    assert log[0]["event"] == "header" and "10%" in log[0]["schedule"]
    steps = [r for r in log if r["event"] == "step"]
    epochs = [r for r in log if r["event"] == "epoch"]
    assert len(steps) == 25 and steps[-1]["step"] == 25
    assert len(epochs) == 5 and all(math.isfinite(r["val_loss"]) for r in epochs)
    assert {"step", "lr", "loss", "wall_time"} <= set(steps[0])
    assert best.exists() and (tmp_path / "last.ckpt").exists()
    model, meta = load_model(best)
    assert meta["val_loss"] == min(r["val_loss"] for r in epochs)


def test_adapters_only_keeps_base_weights(small_task, tmp_path):
    split, catalog, tok = small_task
    mcfg = tiny_config(vocab_size=tok.vocab_size, max_len=128)
    init = build_model(mcfg, seed=0)
    before = {n: p.detach().clone() for n, p in init.named_parameters()}
    tcfg = TrainConfig(epochs=1, batch_size=128, warmup_steps=0, peak_lr=1e-2, adapters_only=True)
    fit(split, catalog, tok, mcfg, tcfg, tmp_path, init_model=init)
    after, _ = load_model(tmp_path / "last.ckpt")
    changed = set()
    for n, p in after.named_parameters():
        if not torch.equal(p, before[n]):
            changed.add(n)
    assert changed and all(n.endswith(("lora_A", "lora_B")) for n in changed)


def test_resume_matches_uninterrupted_run(small_task, tmp_path):
    split, catalog, tok = small_task
    mcfg = tiny_config(vocab_size=tok.vocab_size, max_len=128, dropout=0.1)
    tcfg = TrainConfig(epochs=4, batch_size=128, warmup_steps=3, peak_lr=1e-3)
    fit(split, catalog, tok, mcfg, tcfg, tmp_path / "full")
    fit(split, catalog, tok, mcfg, tcfg, tmp_path / "cut", on_epoch_end=lambda ep, m, r: ep == 2)
    fit(split, catalog, tok, mcfg, tcfg, tmp_path / "cut", resume=True)
    a, _ = load_model(tmp_path / "full" / "last.ckpt")
    b, _ = load_model(tmp_path / "cut" / "last.ckpt")
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q), n
    epochs = [r["epoch"] for r in _log(tmp_path / "cut") if r["event"] == "epoch"]
    assert epochs == [1, 2, 3, 4]


def test_encoded_examples_fit_max_len(small_task):
    split, catalog, tok = small_task
    long = [Example("u", tuple(str(i % 5) for i in range(40)), "1")]
    (ids, start), = encode_split(long, catalog, tok, 128, None, 0)
    assert len(ids) <= 128
    assert tok.decode(ids[start:-1]) == catalog["1"]


def test_memorization_loss_on_toy50():
    """Small model on the toy50 fixture: training loss falls below 0.05 and the first epochs trend down."""
    import dataclasses
    import tempfile

    from genrec.cli import template_bank, tokenizer_corpus
    from genrec.config import load_config
    from genrec.ingest import build_sequences, load_raw, split_leave_one_out
    from genrec.toydata import bundled_path

    cfg = load_config(bundled_path("toy50") / "memorize.ini")
    parsed = load_raw(cfg.kind, cfg.inputs)
    split = split_leave_one_out(build_sequences(parsed.interactions), cfg.sliding_windows)
    bank = template_bank(cfg, cfg.kind)
    tok = BPETokenizer.train(tokenizer_corpus(parsed.catalog, split, bank), cfg.model.vocab_size)
    mcfg = dataclasses.replace(cfg.model, vocab_size=tok.vocab_size, d_model=128, n_layers=2, d_ff=512)
    tcfg = dataclasses.replace(cfg.train, peak_lr=1e-3)
    epoch_loss = {}

    with tempfile.TemporaryDirectory() as d:
        # per-epoch mean training loss, from the step records in the log
        def on_epoch(epoch, model, record):
            steps = [json.loads(line) for line in open(f"{d}/train_log.jsonl")]
            losses = [r["loss"] for r in steps if r.get("event") == "step" and r["epoch"] == epoch]
            epoch_loss[epoch] = sum(losses) / len(losses)
            return epoch >= 5 and epoch_loss[epoch] < 0.05

        fit(split, parsed.catalog, tok, mcfg, tcfg, d, bank=bank, on_epoch_end=on_epoch)
    first = [epoch_loss[e] for e in range(1, 6)]
    rises = sum(b >= a for a, b in zip(first, first[1:]))
    assert rises <= 1, first
    assert min(epoch_loss.values()) < 0.05 and max(epoch_loss) <= 200
