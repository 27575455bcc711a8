"""HR@k / NDCG@k over the held-out test items, and side-by-side reports."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import DataError, Example

log = logging.getLogger(__name__)

DEFAULT_KS = (5, 10)


def _rank(ranked: Sequence[str], target: str) -> int | None:
    try:
        return ranked.index(target) + 1
    except ValueError:
        return None


def hr_at_k(ranked: Sequence[str], target: str, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(list(ranked[:k]), target)
    return 1 if r is not None else 0


def ndcg_at_k(ranked: Sequence[str], target: str, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1 and NDCG = 1 / log2(1 + rank)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(list(ranked[:k]), target)
    return 1.0 / math.log2(1 + r) if r is not None else 0.0


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    num_users: int
    dataset: str = ""
    model: str = ""
    missing_users: int = field(default=0, compare=False)

    @property
    def ks(self) -> tuple[int, ...]:
        return tuple(sorted(self.hr))

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "num_users": self.num_users,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            hr={int(k): float(v) for k, v in d["hr"].items()},
            ndcg={int(k): float(v) for k, v in d["ndcg"].items()},
            num_users=int(d.get("num_users", 0)),
            dataset=d.get("dataset", ""),
            model=d.get("model", ""),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataError(f"bad metrics report: {exc}", str(path)) from None


def evaluate_split(
    predictions: Iterable[tuple[str, Sequence[str]]],
    test: Sequence[Example],
    ks: Sequence[int] = DEFAULT_KS,
    dataset: str = "",
    model: str = "",
) -> MetricsReport:
    """Mean HR/NDCG over the test users.

    Users without a prediction count as misses.  A user listed twice is an error.
    """
    by_user: dict[str, list[str]] = {}
    for user_id, ranked in predictions:
        if user_id in by_user:
            raise ValueError(f"duplicate prediction entry for user {user_id!r}")
        ranked = list(ranked)
        if len(set(ranked)) != len(ranked):
            raise ValueError(f"ranked list for user {user_id!r} repeats an item")
        by_user[user_id] = ranked
    ks = sorted(set(ks))
    hr_terms: dict[int, list[float]] = {k: [] for k in ks}
    ndcg_terms: dict[int, list[float]] = {k: [] for k in ks}
    missing = 0
    for ex in test:
        ranked = by_user.get(ex.user_id)
        if ranked is None:
            missing += 1
            ranked = []
        for k in ks:
            hr_terms[k].append(hr_at_k(ranked, ex.target, k))
            ndcg_terms[k].append(ndcg_at_k(ranked, ex.target, k))
    if missing:
        log.warning("%d test users have no prediction; scored as misses", missing)
    n = len(test)
    # fsum is exactly rounded, so the result does not depend on user order.
    hr = {k: math.fsum(hr_terms[k]) / n if n else 0.0 for k in ks}
    ndcg = {k: math.fsum(ndcg_terms[k]) / n if n else 0.0 for k in ks}
    return MetricsReport(hr, ndcg, n, dataset, model, missing)


def read_predictions(path: str | Path) -> list[tuple[str, list[str]]]:
    """Load ``{"user_id", "items": [{"item_id", "score"}, ...]}`` JSON-lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append((str(obj["user_id"]), [str(it["item_id"]) for it in obj["items"]]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"bad prediction record: {exc}", str(path), n) from None
    return out


# --------------------------------------------------------------------------
# comparison table


@dataclass
class Comparison:
    columns: list[str]
    rows: list[tuple[str, list[float | None]]]
    best: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {
            "columns": self.columns,
            "rows": [{"model": m, "values": dict(zip(self.columns, vals))} for m, vals in self.rows],
            "best": self.best,
        }

    def render(self) -> str:
        header = ["model"] + self.columns
        body = []
        for model, vals in self.rows:
            cells = [model]
            for col, v in zip(self.columns, vals):
                if v is None:
                    cells.append("-")
                else:
                    cells.append(f"{v:.4f}" + ("*" if model in self.best.get(col, ()) else " "))
            body.append(cells)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
                 for r in [header] + body]
        lines.insert(1, "  ".join("-" * w for w in widths))
        if self.best:
            lines.append("* best in column")
        return "\n".join(lines) + "\n"


def compare_reports(reports: Sequence[MetricsReport]) -> Comparison:
    """Models as rows, dataset x metric as columns; the best value per column is marked.

    A column is only marked when at least two models report it.
    """
    if not reports:
        raise ValueError("need at least one report")
    ks = reports[0].ks
    for r in reports:
        if r.ks != ks or tuple(sorted(r.ndcg)) != ks:
            raise ValueError(f"reports use different k sets: {list(ks)} vs {list(r.ks)}")
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    models = list(dict.fromkeys(r.model for r in reports))
    columns, cells = [], {}
    for ds in datasets:
        for k in ks:
            for metric in ("HR", "NDCG"):
                col = f"{ds} {metric}@{k}".strip()
                columns.append(col)
                for r in reports:
                    if r.dataset == ds:
                        key = (r.model, col)
                        if key in cells:
                            raise ValueError(f"two reports for model {r.model!r} on {ds!r}")
                        cells[key] = (r.hr if metric == "HR" else r.ndcg)[k]
    rows = [(m, [cells.get((m, c)) for c in columns]) for m in models]
    best = {}
    for c in columns:
        vals = {m: cells[(m, c)] for m in models if (m, c) in cells}
        if len(vals) >= 2:
            top = max(vals.values())
            best[c] = [m for m, v in vals.items() if v == top]
    return Comparison(columns, rows, best)
