"""Run configuration: an INI file with [data], [model], [train] and [decode] sections.

Example::

    [data]
    kind = movielens
    inputs = ratings.csv, movies.csv
    min_length = 3
    sliding_windows = false
    templates = 0, 1, 2, 3   ; template ids; empty means the dataset's domain bank

    [model]
    vocab_size = 8192        ; tokenizer target; the model uses the trained size
    d_model = 256
    n_layers = 4
    adapter_targets = query, value

    [train]
    peak_lr = 3e-4
    warmup_steps = 1000
    batch_size = 128
    epochs = 5

    [decode]
    k = 10
    beam_width = 20
    ks = 5, 10

    seed = 0                 ; may also sit in a [run] section

Keys map one-to-one onto :class:`ModelConfig` / :class:`TrainConfig` fields.
Relative ``inputs`` are resolved against the config file's directory.
"""

from __future__ import annotations

import configparser
import re
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .backbone import ModelConfig
from .train import TrainConfig


@dataclass
class RunConfig:
    kind: str = "movielens"
    inputs: list[str] = field(default_factory=list)
    out: str = "."
    min_length: int = 3
    sliding_windows: bool = False
    strict: bool = True
    templates: tuple[int, ...] | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    k: int = 10
    beam_width: int | None = None
    ks: tuple[int, ...] = (5, 10)
    seed: int = 0

    def validate(self, require_inputs: bool = False) -> None:
        if self.kind not in ("movielens", "amazon"):
            raise ValueError(f"dataset kind must be movielens or amazon, got {self.kind!r}")
        if require_inputs:
            if len(self.inputs) != 2:
                raise ValueError("two input files are required")
            for p in self.inputs:
                if not Path(p).exists():
                    raise FileNotFoundError(p)

    def snapshot(self) -> dict:
        return {
            "kind": self.kind,
            "inputs": list(self.inputs),
            "min_length": self.min_length,
            "sliding_windows": self.sliding_windows,
            "strict": self.strict,
            "templates": list(self.templates) if self.templates is not None else None,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "k": self.k,
            "beam_width": self.beam_width,
            "ks": list(self.ks),
            "seed": self.seed,
        }


_RUN_KEYS = frozenset({"kind", "min_length", "sliding_windows", "strict", "templates", "k", "beam_width", "ks", "seed"})


def _coerce(value: str, annotation: Any) -> Any:
    """Parse an INI value according to a dataclass field's (string) annotation."""
    t = str(annotation).replace(" ", "")
    v = value.strip()
    if t.endswith("|None"):
        if v.lower() in ("", "none"):
            return None
        t = t[: -len("|None")]
    if t.startswith(("tuple", "list")):
        conv = float if "float" in t else int if "int" in t else str
        return tuple(conv(p.strip()) for p in v.split(",") if p.strip())
    if t == "bool":
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if t == "int":
        return int(v)
    if t == "float":
        return float(v)
    return v


def _apply(obj: Any, section: configparser.SectionProxy, where: str) -> dict:
    fields = {f.name: f for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key not in fields:
            raise ValueError(f"unknown key {key!r} in [{where}]")
        f = fields[key]
        updates[key] = _coerce(raw, f.type)
    return updates


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), default_section="__defaults__")
    text = Path(path).read_text(encoding="utf-8")
    if not re.search(r"^\s*\[", text, re.MULTILINE):
        text = "[run]\n" + text  # a bare key = value file
    parser.read_string(text, source=str(path))
    for name in parser.sections():
        sec = parser[name]
        if name == "model":
            cfg.model = ModelConfig(**{**cfg.model.to_dict(), **_apply(cfg.model, sec, name)})
        elif name == "train":
            cfg.train = TrainConfig(**{**cfg.train.to_dict(), **_apply(cfg.train, sec, name)})
        elif name in ("data", "decode", "run"):
            updates = {}
            for key, raw in sec.items():
                if key == "inputs":
                    updates["inputs"] = [p.strip() for p in raw.split(",") if p.strip()]
                    continue
                if key not in _RUN_KEYS:
                    raise ValueError(f"unknown key {key!r} in [{name}]")
                f = next(f for f in dataclasses.fields(cfg) if f.name == key)
                updates[key] = _coerce(raw, f.type)
            cfg = dataclasses.replace(cfg, **updates)
        else:
            raise ValueError(f"unknown section [{name}] in {path}")
    # relative input paths are taken relative to the config file
    base = Path(path).parent
    cfg.inputs = [p if Path(p).is_absolute() else str(base / p) for p in cfg.inputs]
    if "seed" not in {k for s in parser.sections() if s != "train" for k in parser[s]}:
        cfg.seed = cfg.train.seed
    cfg.train.seed = cfg.seed
    return cfg
