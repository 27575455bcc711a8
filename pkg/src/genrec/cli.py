"""``genrec`` command line: ingest, split, tokenize, train, recommend, evaluate, compare.

Every command writes only into ``--out`` and leaves a ``manifest.json`` there
recording the effective configuration, the sha256 of each input file and the
package versions.  Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Sequence

import torch

from . import __version__
from .checkpoint import CheckpointError, load_model
from .config import RunConfig, _coerce, load_config
from .decode import build_trie, default_beam_width, recommend_topk, write_predictions
from .evaluate import MetricsReport, compare_reports, evaluate_split, read_predictions
from .ingest import (
    Catalog,
    DataError,
    LeaveOneOutSplit,
    build_sequences,
    compute_stats,
    load_raw,
    read_catalog,
    read_sequences,
    read_split,
    split_leave_one_out,
    train_popularity,
    write_bundle,
    write_split,
)
from .pipeline import PromptTooLong, inference_prompt, response_reserve
from .prompt import PromptTemplate, TITLE_JOINER, assign_templates, default_template_bank, render_prompt, write_formatted
from .tokenizer import BPETokenizer, TokenizerError
from .train import NumericalError, fit

log = logging.getLogger("genrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DOMAIN_FOR_KIND = {"movielens": "movie", "amazon": "generic"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits with 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: Sequence[Path], extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "config": cfg.snapshot(),
        "inputs": {str(p): _sha256(p) for p in inputs},
        "seed": cfg.seed,
        "versions": {"genrec": __version__, "torch": torch.__version__.split("+")[0], "python": platform.python_version()},
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError("file not found", str(path))
    return path


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def template_bank(cfg: RunConfig, kind: str) -> list[PromptTemplate]:
    """Templates selected by id in the config, else every template of the dataset's domain."""
    bank = default_template_bank()
    if cfg.templates is None:
        return [t for t in bank if t.domain == DOMAIN_FOR_KIND[kind]]
    by_id = {t.template_id: t for t in bank}
    missing = [i for i in cfg.templates if i not in by_id]
    if missing or not cfg.templates:
        raise UsageError(f"unknown template ids {missing}; the bank has ids 0-{len(bank) - 1}")
    return [by_id[i] for i in cfg.templates]


class DataDir:
    """A directory produced by ``ingest`` or ``split``: catalog, split and dataset kind."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.catalog_path = _require(self.path / "catalog.jsonl")
        self.split_path = _require(self.path / "split.jsonl")
        self.meta_path = _require(self.path / "dataset.json")
        self.meta = json.loads(self.meta_path.read_text(encoding="utf-8"))
        self.kind = self.meta["kind"]
        self.catalog: Catalog = read_catalog(self.catalog_path)
        self.split: LeaveOneOutSplit = read_split(self.split_path)

    @property
    def inputs(self) -> list[Path]:
        return [self.catalog_path, self.split_path, self.meta_path]


def tokenizer_corpus(catalog: Catalog, split: LeaveOneOutSplit, bank: Sequence[PromptTemplate]) -> list[str]:
    corpus = [t.instruction_text for t in bank] + list(catalog.values())
    corpus += [render_prompt(bank[0].instruction_text, TITLE_JOINER.join(catalog[i] for i in ex.history))
               for ex in split.valid]
    return corpus


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> None:
    cfg.validate(require_inputs=True)
    inputs = [Path(p) for p in cfg.inputs]
    parsed = load_raw(cfg.kind, inputs, strict=cfg.strict)
    counts = parsed.counts
    sequences = build_sequences(parsed.interactions, cfg.min_length, counts)
    split = split_leave_one_out(sequences, sliding_windows=False)
    out = _out_dir(cfg)
    write_bundle(out, parsed.catalog, sequences, split)
    stats = compute_stats(sequences, parsed.catalog)
    _write_json(out / "dataset.json", {
        "kind": cfg.kind,
        "stats": dataclasses.asdict(stats),
        "dropped": dict(sorted(counts.items())),
        "title_collisions": len(parsed.catalog.collisions),
        "seed": cfg.seed,
    })
    write_manifest(out, "ingest", cfg, inputs)
    print(f"{stats.num_users} users, {stats.num_catalog_items} items, {stats.num_interactions} interactions -> {out}")


def cmd_split(args: argparse.Namespace, cfg: RunConfig) -> None:
    src = Path(args.data)
    catalog_path = _require(src / "catalog.jsonl")
    seq_path = _require(src / "sequences.jsonl")
    meta_path = _require(src / "dataset.json")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    catalog = read_catalog(catalog_path)
    split = split_leave_one_out(read_sequences(seq_path), sliding_windows=cfg.sliding_windows)
    out = _out_dir(cfg)
    if out.resolve() != src.resolve():
        (out / "catalog.jsonl").write_bytes(catalog_path.read_bytes())
    write_split(out / "split.jsonl", split)
    bank = template_bank(cfg, meta["kind"])
    formatted = assign_templates([(e.user_id, e.history, e.target) for e in split.train], bank, cfg.seed, catalog)
    write_formatted(out / "prompts.jsonl", formatted)
    _write_json(out / "dataset.json", {**meta, "sliding_windows": cfg.sliding_windows, "seed": cfg.seed})
    write_manifest(out, "split", cfg, [catalog_path, seq_path, meta_path])
    print(f"{len(split.train)} train / {len(split.valid)} valid / {len(split.test)} test examples -> {out}")


def _train_tokenizer(cfg: RunConfig, data: DataDir) -> BPETokenizer:
    return BPETokenizer.train(tokenizer_corpus(data.catalog, data.split, template_bank(cfg, data.kind)),
                              cfg.model.vocab_size)


def cmd_tokenize(args: argparse.Namespace, cfg: RunConfig) -> None:
    data = DataDir(args.data)
    tok = _train_tokenizer(cfg, data)
    out = _out_dir(cfg)
    tok.save(out / "tokenizer.json")
    write_manifest(out, "tokenize", cfg, data.inputs)
    print(f"vocabulary of {tok.vocab_size} tokens -> {out / 'tokenizer.json'}")


def cmd_train(args: argparse.Namespace, cfg: RunConfig) -> None:
    data = DataDir(args.data)
    out = _out_dir(cfg)
    inputs = list(data.inputs)
    if args.tokenizer:
        tok = BPETokenizer.load(_require(Path(args.tokenizer)))
        inputs.append(Path(args.tokenizer))
    else:
        tok = _train_tokenizer(cfg, data)
    tok.save(out / "tokenizer.json")
    init_model = None
    if args.init_from:
        init_model, _ = load_model(_require(Path(args.init_from)))
        inputs.append(Path(args.init_from))
        model_cfg = init_model.config
    else:
        model_cfg = dataclasses.replace(cfg.model, vocab_size=tok.vocab_size)
    if model_cfg.vocab_size != tok.vocab_size:
        raise UsageError(f"--init-from model has vocab_size {model_cfg.vocab_size}, tokenizer has {tok.vocab_size}")
    train_cfg = dataclasses.replace(cfg.train, seed=cfg.seed, adapters_only=cfg.train.adapters_only or args.adapters_only)
    bank = template_bank(cfg, data.kind)
    best = fit(data.split, data.catalog, tok, model_cfg, train_cfg, out, resume=args.resume,
               init_model=init_model, bank=bank, eval_template=bank[0])
    _write_json(out / "model.json", {"model_config": model_cfg.to_dict(), "kind": data.kind,
                                     "templates": [t.template_id for t in bank], "seed": cfg.seed})
    write_manifest(out, "train", dataclasses.replace(cfg, model=model_cfg, train=train_cfg), inputs)
    print(f"best checkpoint -> {best}")


def cmd_recommend(args: argparse.Namespace, cfg: RunConfig) -> None:
    data = DataDir(args.data)
    model_dir = Path(args.model)
    ckpt = _require(model_dir / args.checkpoint)
    tok_path = _require(model_dir / "tokenizer.json")
    tok = BPETokenizer.load(tok_path)
    model, _ = load_model(ckpt)
    bank = template_bank(cfg, data.kind)
    trie = build_trie(data.catalog, tok, train_popularity(data.split))
    reserve = response_reserve(tok, data.catalog)
    beam = cfg.beam_width if cfg.beam_width is not None else default_beam_width(cfg.k)
    results = []
    for ex in getattr(data.split, args.role):
        prompt = inference_prompt(ex.history, data.catalog, bank[0], tok, model.config.max_len, reserve)
        results.append((ex.user_id, recommend_topk(model, tok, trie, prompt, cfg.k, beam)))
    out = _out_dir(cfg)
    write_predictions(out / "predictions.jsonl", results)
    write_manifest(out, "recommend", cfg, data.inputs + [ckpt, tok_path], {"role": args.role})
    print(f"{len(results)} ranked lists (k={cfg.k}, beam={beam}) -> {out / 'predictions.jsonl'}")


def cmd_evaluate(args: argparse.Namespace, cfg: RunConfig) -> None:
    split_path = _require(Path(args.split) if args.split else Path(args.data) / "split.jsonl")
    pred_path = _require(Path(args.predictions))
    examples = getattr(read_split(split_path), args.role)
    dataset = args.dataset
    if not dataset and args.data and (Path(args.data) / "dataset.json").exists():
        dataset = json.loads((Path(args.data) / "dataset.json").read_text(encoding="utf-8")).get("kind", "")
    report = evaluate_split(read_predictions(pred_path), examples, cfg.ks, dataset, args.model_name)
    out = _out_dir(cfg)
    report.save(out / "report.json")
    lines = [f"{args.model_name} on {dataset or 'dataset'} ({report.num_users} users)"]
    lines += [f"HR@{k} {report.hr[k]:.4f}  NDCG@{k} {report.ndcg[k]:.4f}" for k in report.ks]
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_manifest(out, "evaluate", cfg, [split_path, pred_path], {"role": args.role})
    print("\n".join(lines))


def cmd_compare(args: argparse.Namespace, cfg: RunConfig) -> None:
    paths = [_require(Path(p)) for p in args.reports]
    table = compare_reports([MetricsReport.load(p) for p in paths])
    out = _out_dir(cfg)
    text = table.render()
    (out / "comparison.txt").write_text(text, encoding="utf-8")
    _write_json(out / "comparison.json", table.to_dict())
    write_manifest(out, "compare", cfg, paths)
    print(text, end="")


COMMANDS = {
    "ingest": cmd_ingest,
    "split": cmd_split,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "recommend": cmd_recommend,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    # Global flags are accepted before or after the command name.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=argparse.SUPPRESS,
                        help="override one config value, e.g. train.epochs=3")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="genrec", description="Generative next-item recommendation.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", parents=[common], help="parse raw MovieLens / Amazon files into a bundle")
    s.add_argument("--kind", choices=["movielens", "amazon"])
    s.add_argument("--inputs", nargs=2, metavar=("INTERACTIONS", "ITEMS"))
    s.add_argument("--min-length", type=int)
    s.add_argument("--lenient", action="store_true", help="skip malformed rows instead of failing")

    s = sub.add_parser("split", parents=[common], help="leave-one-out split and training prompts")
    s.add_argument("--data", required=True, help="ingest output directory")
    s.add_argument("--sliding-windows", action="store_true", default=None)

    s = sub.add_parser("tokenize", parents=[common], help="train the byte-level BPE tokenizer")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab-size", type=int)

    s = sub.add_parser("train", parents=[common], help="train the decoder")
    s.add_argument("--data", required=True, help="ingest or split output directory")
    s.add_argument("--tokenizer", help="existing tokenizer.json (default: train one)")
    s.add_argument("--resume", action="store_true", help="continue from last.ckpt in --out")
    s.add_argument("--init-from", help="checkpoint to start from")
    s.add_argument("--adapters-only", action="store_true", help="freeze base weights, train adapters")
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)

    s = sub.add_parser("recommend", parents=[common], help="constrained beam search over catalog titles")
    s.add_argument("--data", required=True)
    s.add_argument("--model", required=True, help="train output directory")
    s.add_argument("--checkpoint", default="best.ckpt")
    s.add_argument("--role", choices=["test", "valid"], default="test")
    s.add_argument("--k", type=int)
    s.add_argument("--beam-width", type=int)

    s = sub.add_parser("evaluate", parents=[common], help="HR@k / NDCG@k of a predictions file")
    s.add_argument("--data", help="directory holding split.jsonl")
    s.add_argument("--split", help="split.jsonl path (overrides --data)")
    s.add_argument("--predictions", required=True)
    s.add_argument("--role", choices=["test", "valid"], default="test")
    s.add_argument("--ks", help="comma-separated cutoffs, e.g. 5,10")
    s.add_argument("--dataset", default="", help="defaults to the kind recorded in --data")
    s.add_argument("--model-name", default="GenRec")

    s = sub.add_parser("compare", parents=[common], help="side-by-side table of metric reports")
    s.add_argument("reports", nargs="+")
    return p


def _apply_set(cfg: RunConfig, item: str) -> RunConfig:
    key, sep, value = item.partition("=")
    section, _, name = key.strip().rpartition(".")
    if not sep or not name:
        raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
    if section in ("model", "train"):
        target = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields:
            raise UsageError(f"unknown key {name!r} in [{section}]")
        return dataclasses.replace(cfg, **{section: dataclasses.replace(target, **{name: _coerce(value, fields[name].type)})})
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    if section not in ("", "data", "decode", "run") or name not in fields or name in ("model", "train"):
        raise UsageError(f"unknown config key {key!r}")
    if name == "inputs":
        return dataclasses.replace(cfg, inputs=[p.strip() for p in value.split(",") if p.strip()])
    return dataclasses.replace(cfg, **{name: _coerce(value, fields[name].type)})


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then ``--set`` overrides, then dedicated flags."""
    cfg = load_config(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        cfg = _apply_set(cfg, item)
    updates: dict = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    for flag, name in (("kind", "kind"), ("min_length", "min_length"), ("sliding_windows", "sliding_windows"),
                       ("k", "k"), ("beam_width", "beam_width")):
        if getattr(args, flag, None) is not None:
            updates[name] = getattr(args, flag)
    if getattr(args, "inputs", None):
        updates["inputs"] = list(args.inputs)
    if getattr(args, "lenient", False):
        updates["strict"] = False
    if getattr(args, "ks", None):
        updates["ks"] = _coerce(args.ks, "tuple[int, ...]")
    cfg = dataclasses.replace(cfg, **updates)
    train_updates = {"seed": cfg.seed}
    if getattr(args, "epochs", None) is not None:
        train_updates["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        train_updates["peak_lr"] = args.lr
    cfg.train = dataclasses.replace(cfg.train, **train_updates)
    if getattr(args, "vocab_size", None) is not None:
        cfg.model = dataclasses.replace(cfg.model, vocab_size=args.vocab_size)
    if cfg.k < 1 or (cfg.beam_width is not None and cfg.beam_width < cfg.k):
        raise UsageError(f"need 1 <= k <= beam_width, got k={cfg.k}, beam_width={cfg.beam_width}")
    cfg.validate()
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except NumericalError as exc:
        print(f"genrec: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PromptTooLong, TokenizerError, CheckpointError, json.JSONDecodeError, OSError, KeyError) as exc:
        print(f"genrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (UsageError, ValueError, configparser.Error) as exc:
        print(f"genrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
