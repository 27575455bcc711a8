"""Acceptance criteria, one test each.

Run ``pytest tests/test_acceptance.py`` for a PASS/FAIL line per criterion at
the end of the report.  Criterion 12 needs the official data:
``GENREC_ML25M=/path/to/ml-25m`` (ratings.csv, movies.csv) and optionally
``GENREC_AMAZON_TOYS=/path/to/dir`` (reviews.jsonl, metadata.jsonl).
"""

import dataclasses
import math
import os
import random
import tempfile
import time
from pathlib import Path

import pytest
import torch

from genrec.backbone import build_model
from genrec.cli import template_bank, tokenizer_corpus
from genrec.config import load_config
from genrec.decode import build_trie, exhaustive_ranking, recommend_topk
from genrec.evaluate import compare_reports, evaluate_split, ndcg_at_k
from genrec.ingest import (
    Catalog,
    Example,
    LeaveOneOutSplit,
    UserSequence,
    build_sequences,
    compute_stats,
    load_raw,
    split_leave_one_out,
    train_popularity,
)
from genrec.pipeline import inference_prompt, response_reserve
from genrec.prompt import default_template_bank
from genrec.tokenizer import BPETokenizer
from genrec.toydata import bundled_path
from genrec.train import TrainConfig, fit, lr_schedule

from conftest import tiny_config
from oracles import brute_hr, brute_ndcg
from test_backbone import gradient_check
from test_evaluate import random_fixture, table2_reports


@pytest.mark.acceptance(1, "metric oracle equivalence on 200 random fixtures, < 5 s")
def test_metric_oracle_equivalence():
    t0 = time.perf_counter()
    rng = random.Random(2024)
    for _ in range(200):
        test, preds = random_fixture(rng)
        report = evaluate_split(preds, test, (1, 5, 10, 20))
        ranked = dict(preds)
        for k in report.ks:
            assert report.hr[k] == sum(brute_hr(ranked[e.user_id], e.target, k) for e in test) / len(test)
            oracle = sum(brute_ndcg(ranked[e.user_id], e.target, k) for e in test) / len(test)
            assert abs(report.ndcg[k] - oracle) < 1e-12
    assert time.perf_counter() - t0 < 5


@pytest.mark.acceptance(2, "NDCG spot values")
def test_ndcg_spot_values():
    assert ndcg_at_k(["t", "a"], "t", 5) == 1.0
    assert ndcg_at_k(["a", "b", "t"], "t", 5) == 0.5
    assert abs(ndcg_at_k(["a", "t"], "t", 10) - 1 / math.log2(3)) < 1e-9


@pytest.mark.acceptance(3, "leave-one-out protocol on 1,000 synthetic users, < 1 s")
def test_split_protocol():
    rng = random.Random(3)
    users = [UserSequence(f"u{u}", tuple(f"i{rng.randrange(500)}" for _ in range(rng.randrange(3, 30))))
             for u in range(1000)]
    t0 = time.perf_counter()
    split = split_leave_one_out(users)
    elapsed = time.perf_counter() - t0
    train = {ex.user_id: ex for ex in split.train}
    assert len(split.valid) == len(split.test) == 1000
    for u, valid, test in zip(users, split.valid, split.test):
        n = len(u.items)
        assert test.user_id == valid.user_id == u.user_id
        assert test.target == u.items[-1] and test.history == u.items[:-1]
        assert valid.target == u.items[-2] and valid.history == u.items[:-2]
        assert valid.history + (valid.target, test.target) == u.items
        if n >= 4:
            ex = train[u.user_id]
            assert ex.history == u.items[: n - 3] and ex.target == u.items[n - 3]
        else:
            assert u.user_id not in train
    # no training history reaches the valid or test positions
    for ex in split.train:
        assert len(ex.history) + 1 <= len(next(u for u in users if u.user_id == ex.user_id).items) - 2
    assert elapsed < 1


@pytest.fixture(scope="module")
def toy100_catalog():
    d = bundled_path("toy100")
    res = load_raw("movielens", [d / "ratings.csv", d / "movies.csv"])
    tok = BPETokenizer.train(list(res.catalog.values()) * 2, 400)
    return res.catalog, tok


@pytest.mark.acceptance(4, "constrained decoding: 1,000 random prompts give valid, distinct ids")
def test_decoding_validity(toy100_catalog):
    catalog, tok = toy100_catalog
    trie = build_trie(catalog, tok)
    model = build_model(tiny_config(vocab_size=tok.vocab_size, max_len=64), seed=11)
    rng = random.Random(4)
    alphabet = "abcdefghij ,()0123456789éÉ"
    for _ in range(1000):
        prompt = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 20)))
        ids = recommend_topk(model, tok, trie, prompt, 10).item_ids()
        assert len(ids) == 10 and len(set(ids)) == 10
        assert all(i in catalog for i in ids)


@pytest.mark.acceptance(5, "beam search equals exhaustive ranking on a 5-title catalog, 50 instances")
def test_decoding_oracle():
    catalog = Catalog({"1": "Heat", "2": "Help", "3": "Hello", "4": "Up", "5": "Upside"})
    tok = BPETokenizer.train(list(catalog.values()) * 2, 262)
    trie = build_trie(catalog, tok)
    rng = random.Random(5)
    for inst in range(50):
        model = build_model(tiny_config(vocab_size=tok.vocab_size, max_len=40), seed=1000 + inst, dtype=torch.float64)
        prompt = "".join(rng.choice("HeUpslo ") for _ in range(rng.randrange(1, 12)))
        for width in (5, 8):
            beam = recommend_topk(model, tok, trie, prompt, 5, width).item_ids()
            assert beam == [s.item_id for s in exhaustive_ranking(model, tok, trie, prompt)]


@pytest.mark.acceptance(6, "finite-difference gradients, rel. err < 1e-4 at float64, < 2 min")
def test_gradient_check():
    from genrec.backbone import collate

    t0 = time.perf_counter()
    model = build_model(tiny_config(max_len=8), seed=6, dtype=torch.float64)
    torch.manual_seed(6)
    for layer in model.adapter_layers():
        torch.nn.init.normal_(layer.lora_B, std=0.1)
    g = torch.Generator().manual_seed(6)
    batch = collate([(torch.randint(0, 50, (8,), generator=g).tolist(), 2) for _ in range(4)])
    errors = gradient_check(model, batch, samples_per_tensor=10)
    kinds = ("tok_emb", "pos_emb", "attn.query.weight", "attn.output", "ff_in", "ff_out", "lora_A", "lora_B")
    assert all(any(k in n for n in errors) for k in kinds)
    assert max(errors.values()) < 1e-4, max(errors.items(), key=lambda kv: kv[1])
    assert time.perf_counter() - t0 < 120


@pytest.mark.acceptance(7, "adapters with zero B leave logits exactly unchanged")
def test_adapter_noop():
    model = build_model(tiny_config(adapter_targets=("query", "key", "value", "output")), seed=7)
    ids = torch.randint(0, 50, (4, 16), generator=torch.Generator().manual_seed(7))
    on = model(ids)
    model.set_adapters(False)
    off = model(ids)
    assert torch.equal(on, off)


@pytest.mark.acceptance(8, "schedule constants: lr(1000) = 3e-4; 640 examples x 5 epochs / 128 = 25 steps")
def test_schedule_constants():
    assert lr_schedule(TrainConfig(), 1000, 5000) == 3e-4
    catalog = Catalog({"1": "Heat (1995)", "2": "Up (2009)"})
    train = [Example(f"u{j}", ("1",), "2") for j in range(640)]
    split = LeaveOneOutSplit(train, [Example("v", ("2",), "1")], [])
    corpus = ["Heat (1995)", "Up (2009)"] + [t.instruction_text for t in default_template_bank()]
    tok = BPETokenizer.train(corpus * 2, 600)
    with tempfile.TemporaryDirectory() as d:
        fit(split, catalog, tok, tiny_config(vocab_size=tok.vocab_size, max_len=128),
            TrainConfig(epochs=5, batch_size=128), d)
        steps = [line for line in (Path(d) / "train_log.jsonl").read_text().splitlines() if '"event": "step"' in line]
    assert len(steps) == 25


@pytest.mark.acceptance(9, "toy50 memorization: HR@1 = 1.0 on validation within 200 epochs, < 10 min")
def test_memorization():
    t0 = time.perf_counter()
    cfg = load_config(bundled_path("toy50") / "memorize.ini")
    parsed = load_raw(cfg.kind, cfg.inputs)
    split = split_leave_one_out(build_sequences(parsed.interactions, cfg.min_length), cfg.sliding_windows)
    assert len(split.valid) == 50
    catalog = parsed.catalog
    bank = template_bank(cfg, cfg.kind)
    tok = BPETokenizer.train(tokenizer_corpus(catalog, split, bank), cfg.model.vocab_size)
    model_cfg = dataclasses.replace(cfg.model, vocab_size=tok.vocab_size)
    assert (model_cfg.d_model, model_cfg.n_layers) == (256, 4)  # the default desk-scale size
    trie = build_trie(catalog, tok, train_popularity(split))
    reserve = response_reserve(tok, catalog)
    history = []

    def validation_hr1(epoch, model, record):
        if epoch % 5:
            return False
        hits = 0
        for ex in split.valid:
            prompt = inference_prompt(ex.history, catalog, bank[0], tok, model_cfg.max_len, reserve)
            hits += recommend_topk(model, tok, trie, prompt, 1, cfg.beam_width).item_ids() == [ex.target]
        history.append((epoch, hits / len(split.valid)))
        return hits == len(split.valid)

    with tempfile.TemporaryDirectory() as d:
        fit(split, catalog, tok, model_cfg, cfg.train, d, bank=bank, eval_template=bank[0], on_epoch_end=validation_hr1)
    elapsed = time.perf_counter() - t0
    epoch, hr1 = history[-1]
    assert hr1 == 1.0, history
    assert epoch <= 200 and elapsed < 600, (epoch, elapsed)


@pytest.mark.acceptance(10, "tokenizer round trip: 10,000 random UTF-8 strings and every bundled title")
def test_tokenizer_round_trip():
    titles = []
    for name, kind, files in (("toy50", "movielens", ("ratings.csv", "movies.csv")),
                              ("toy100", "movielens", ("ratings.csv", "movies.csv")),
                              ("toy_amazon", "amazon", ("reviews.jsonl", "metadata.jsonl"))):
        d = bundled_path(name)
        titles += list(load_raw(kind, [d / f for f in files]).catalog.values())
    tok = BPETokenizer.train(titles, 1000)
    rng = random.Random(10)
    for title in titles:
        assert tok.decode(tok.encode(title)) == title
    for _ in range(10_000):
        chars = []
        for _ in range(rng.randrange(0, 30)):
            cp = rng.randrange(0x110000)
            while 0xD800 <= cp <= 0xDFFF:  # surrogates are not encodable
                cp = rng.randrange(0x110000)
            chars.append(chr(cp) if rng.random() < 0.3 else chr(rng.randrange(32, 127)))
        s = "".join(chars)
        assert tok.decode(tok.encode(s)) == s


@pytest.mark.acceptance(11, "published Table 2 values: GenRec best on MovieLens, P5 best on Amazon Toys")
def test_table2_rendering():
    table = compare_reports(table2_reports())
    for col in table.columns:
        expected = ["GenRec"] if col.startswith("MovieLens") else ["P5"]
        assert table.best[col] == expected, col
    assert len(table.best) == 8


@pytest.mark.acceptance(12, "official MovieLens-25M ingest reproduces the dataset statistics (optional)")
def test_full_scale_statistics():
    root = os.environ.get("GENREC_ML25M")
    if not root:
        pytest.skip("set GENREC_ML25M to the ml-25m directory to run")
    res = load_raw("movielens", [Path(root) / "ratings.csv", Path(root) / "movies.csv"])
    stats = compute_stats(build_sequences(res.interactions), res.catalog)
    assert (stats.num_users, stats.num_catalog_items, stats.num_interactions) == (162_541, 62_423, 25_000_095)
    toys = os.environ.get("GENREC_AMAZON_TOYS")
    if toys:
        res = load_raw("amazon", [Path(toys) / "reviews.jsonl", Path(toys) / "metadata.jsonl"])
        users = compute_stats(build_sequences(res.interactions)).num_users
        assert 0.1 < users / 19_412 < 10  # order of magnitude only
