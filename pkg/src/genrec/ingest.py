"""Raw interaction parsing, per-user sequences and the leave-one-out split.

Two raw formats are understood: MovieLens CSV (``ratings.csv`` + ``movies.csv``)
and Amazon review dumps (reviews and metadata as JSON-lines).  Both produce a
:class:`Catalog` of item titles and a flat list of :class:`Interaction` rows,
which :func:`build_sequences` groups into chronological user histories.
"""

from __future__ import annotations

import csv
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, Iterator, Mapping, NamedTuple, Sequence

log = logging.getLogger(__name__)

DEFAULT_MIN_LENGTH = 3

_WS = re.compile(r"\s+")


class DataError(ValueError):
    """Malformed input data.  Carries the offending source and line when known."""

    def __init__(self, message: str, source: str | None = None, line: int | None = None):
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + message)
        self.source = source
        self.line = line


def normalize_title(title: str) -> str:
    """Trim and collapse internal whitespace.  Case is preserved."""
    return _WS.sub(" ", title).strip()


@dataclass(frozen=True, slots=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None

    def __post_init__(self) -> None:
        if not self.user_id or not self.item_id:
            raise ValueError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")


class Catalog(Mapping[str, str]):
    """Immutable item_id -> title map.

    Titles are whitespace-normalized on construction.  Distinct ids that share
    a title are all kept; :attr:`collisions` lists them per title.
    """

    def __init__(self, entries: Mapping[str, str] | Iterable[tuple[str, str]]):
        items = entries.items() if isinstance(entries, Mapping) else entries
        data: dict[str, str] = {}
        for item_id, title in items:
            if not item_id:
                raise ValueError("empty item id in catalog")
            if item_id in data:
                raise ValueError(f"duplicate item id {item_id!r} in catalog")
            norm = normalize_title(title)
            if not norm:
                raise ValueError(f"empty title for item {item_id!r}")
            data[item_id] = norm
        self._data = data
        by_title: dict[str, list[str]] = {}
        for item_id, title in data.items():
            by_title.setdefault(title, []).append(item_id)
        self._by_title = {t: tuple(sorted(ids)) for t, ids in by_title.items()}
        self.collisions = {t: ids for t, ids in self._by_title.items() if len(ids) > 1}
        if self.collisions:
            log.info("catalog: %d titles shared by several item ids", len(self.collisions))

    def __getitem__(self, item_id: str) -> str:
        return self._data[item_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"Catalog({len(self)} items)"

    def ids_for_title(self, title: str) -> tuple[str, ...]:
        return self._by_title.get(normalize_title(title), ())

    def titles(self) -> list[str]:
        """Distinct titles in first-seen order."""
        return list(self._by_title)

    def resolve_title(self, title: str, popularity: Mapping[str, int] | None = None) -> str:
        """Map a title to one item id: most popular first, then smallest id."""
        ids = self.ids_for_title(title)
        if not ids:
            raise KeyError(title)
        pop = popularity or {}
        return min(ids, key=lambda i: (-pop.get(i, 0), i))


class ParseResult(NamedTuple):
    catalog: Catalog
    interactions: list[Interaction]
    counts: Counter


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...] = field(default=(), compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.items)


class Example(NamedTuple):
    user_id: str
    history: tuple[str, ...]
    target: str


@dataclass
class LeaveOneOutSplit:
    train: list[Example] = field(default_factory=list)
    valid: list[Example] = field(default_factory=list)
    test: list[Example] = field(default_factory=list)

    def roles(self) -> Iterator[tuple[str, Example]]:
        """Yield (role, example) grouped by user, roles in train/valid/test order."""
        by_user: dict[str, list[tuple[str, Example]]] = {}
        for role in ("train", "valid", "test"):
            for ex in getattr(self, role):
                by_user.setdefault(ex.user_id, []).append((role, ex))
        for entries in by_user.values():
            yield from entries


@dataclass(frozen=True)
class DatasetStats:
    num_users: int
    num_items: int
    num_interactions: int
    num_catalog_items: int = 0


# --------------------------------------------------------------------------
# parsing


def _row_error(strict: bool, counts: Counter, message: str, source: str, line: int) -> None:
    if strict:
        raise DataError(message, source, line)
    counts["malformed"] += 1
    log.debug("%s:%d: skipped: %s", source, line, message)


def _source_name(stream: IO[str], default: str) -> str:
    return getattr(stream, "name", default) if isinstance(getattr(stream, "name", None), str) else default


def parse_movielens(ratings_file: IO[str], movies_file: IO[str], *, strict: bool = True) -> ParseResult:
    """Parse MovieLens ``ratings.csv`` / ``movies.csv`` streams.

    Every rating row becomes an implicit interaction regardless of its value.
    Ratings on movies missing from the movies file are dropped and counted under
    ``counts["unknown_item"]``.  In lenient mode (``strict=False``) malformed rows
    are skipped and counted under ``counts["malformed"]``.
    """
    counts: Counter = Counter()
    msrc = _source_name(movies_file, "movies.csv")
    rsrc = _source_name(ratings_file, "ratings.csv")

    reader = csv.reader(movies_file)
    header = next(reader, None)
    if header is None or [h.strip() for h in header[:2]] != ["movieId", "title"]:
        raise DataError("missing header 'movieId,title,genres'", msrc, 1)
    titles: dict[str, str] = {}
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != len(header):
            _row_error(strict, counts, f"expected {len(header)} fields, got {len(row)}", msrc, line)
            continue
        movie_id, title = row[0].strip(), normalize_title(row[1])
        if not movie_id or not title:
            _row_error(strict, counts, "empty movieId or title", msrc, line)
            continue
        if movie_id in titles:
            _row_error(strict, counts, f"duplicate movieId {movie_id}", msrc, line)
            continue
        titles[movie_id] = title
    catalog = Catalog(titles)

    reader = csv.reader(ratings_file)
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["userId", "movieId", "rating", "timestamp"]:
        raise DataError("missing header 'userId,movieId,rating,timestamp'", rsrc, 1)
    interactions: list[Interaction] = []
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 4:
            _row_error(strict, counts, f"expected 4 fields, got {len(row)}", rsrc, line)
            continue
        user, movie, rating, ts = (c.strip() for c in row)
        try:
            inter = Interaction(user, movie, int(ts), float(rating))
        except ValueError as exc:
            _row_error(strict, counts, str(exc), rsrc, line)
            continue
        if movie not in titles:
            counts["unknown_item"] += 1
            continue
        interactions.append(inter)
    return ParseResult(catalog, interactions, counts)


def _json_lines(stream: IO[str], source: str, strict: bool, counts: Counter) -> Iterator[tuple[int, dict]]:
    for line_no, raw in enumerate(stream, start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            _row_error(strict, counts, f"invalid JSON: {exc.msg}", source, line_no)
            continue
        if not isinstance(obj, dict):
            _row_error(strict, counts, "expected a JSON object", source, line_no)
            continue
        yield line_no, obj


def parse_amazon(reviews_file: IO[str], metadata_file: IO[str], *, strict: bool = True) -> ParseResult:
    """Parse Amazon review + metadata JSON-lines streams.

    Products without a usable title are left out of the catalog; their reviews
    are dropped and counted under ``counts["unknown_item"]``.
    """
    counts: Counter = Counter()
    msrc = _source_name(metadata_file, "metadata.jsonl")
    rsrc = _source_name(reviews_file, "reviews.jsonl")

    titles: dict[str, str] = {}
    for line, obj in _json_lines(metadata_file, msrc, strict, counts):
        asin = obj.get("asin")
        if not isinstance(asin, str) or not asin:
            _row_error(strict, counts, "missing asin", msrc, line)
            continue
        title = obj.get("title")
        title = normalize_title(title) if isinstance(title, str) else ""
        if not title:
            counts["untitled"] += 1
            continue
        if asin in titles:
            counts["duplicate_metadata"] += 1
            continue
        titles[asin] = title
    catalog = Catalog(titles)

    interactions: list[Interaction] = []
    for line, obj in _json_lines(reviews_file, rsrc, strict, counts):
        try:
            user, asin = obj["reviewerID"], obj["asin"]
            ts = obj["unixReviewTime"]
            if isinstance(ts, bool) or not isinstance(ts, (int, str)):
                raise ValueError(f"bad unixReviewTime {ts!r}")
            overall = obj.get("overall")
            inter = Interaction(str(user), str(asin), int(ts), None if overall is None else float(overall))
        except (KeyError, TypeError, ValueError) as exc:
            _row_error(strict, counts, f"bad review record: {exc}", rsrc, line)
            continue
        if inter.item_id not in titles:
            counts["unknown_item"] += 1
            continue
        interactions.append(inter)
    return ParseResult(catalog, interactions, counts)


def load_raw(kind: str, paths: Sequence[str | Path], *, strict: bool = True) -> ParseResult:
    """Open the two raw files for ``kind`` (``movielens`` or ``amazon``) and parse them."""
    if len(paths) != 2:
        raise ValueError(f"{kind} needs two input files, got {len(paths)}")
    parser = {"movielens": parse_movielens, "amazon": parse_amazon}.get(kind)
    if parser is None:
        raise ValueError(f"unknown dataset kind {kind!r}")
    first, second = (Path(p) for p in paths)
    with open(first, encoding="utf-8", newline="") as f1, open(second, encoding="utf-8", newline="") as f2:
        return parser(f1, f2, strict=strict)


# --------------------------------------------------------------------------
# sequences and split


def build_sequences(
    interactions: Iterable[Interaction], min_length: int = DEFAULT_MIN_LENGTH, counts: Counter | None = None
) -> list[UserSequence]:
    """Group interactions per user, ordered by timestamp (stable on input order).

    Users are emitted in order of first appearance.  Users with fewer than
    ``min_length`` interactions are discarded and counted in ``counts["short_user"]``.
    """
    if min_length < 3:
        raise ValueError(f"min_length must be >= 3, got {min_length}")
    per_user: dict[str, list[Interaction]] = {}
    for inter in interactions:
        per_user.setdefault(inter.user_id, []).append(inter)
    out = []
    for user, rows in per_user.items():
        if len(rows) < min_length:
            if counts is not None:
                counts["short_user"] += 1
            continue
        rows.sort(key=lambda r: r.timestamp)  # list.sort is stable
        out.append(UserSequence(user, tuple(r.item_id for r in rows), tuple(r.timestamp for r in rows)))
    return out


def split_leave_one_out(sequences: Iterable[UserSequence], sliding_windows: bool = False) -> LeaveOneOutSplit:
    """Hold out the last item for test and the second-last for validation.

    Training gets one example per user (target = third-last item) when the user
    has at least four items.  With ``sliding_windows`` every earlier position is
    also used as a target, with its prefix as history.
    """
    split = LeaveOneOutSplit()
    for seq in sequences:
        items = tuple(seq.items)
        n = len(items)
        if n < 3:
            raise ValueError(f"user {seq.user_id!r} has {n} items; leave-one-out needs >= 3")
        first = 1 if sliding_windows else n - 3
        for t in range(max(first, 1), n - 2):
            split.train.append(Example(seq.user_id, items[:t], items[t]))
        split.valid.append(Example(seq.user_id, items[: n - 2], items[n - 2]))
        split.test.append(Example(seq.user_id, items[: n - 1], items[n - 1]))
    return split


def compute_stats(sequences: Sequence[UserSequence], catalog: Catalog | None = None) -> DatasetStats:
    users = sum(1 for s in sequences if len(s) > 0)
    items = {i for s in sequences for i in s.items}
    return DatasetStats(
        num_users=users,
        num_items=len(items),
        num_interactions=sum(len(s) for s in sequences),
        num_catalog_items=len(catalog) if catalog is not None else 0,
    )


def train_popularity(split: LeaveOneOutSplit) -> Counter:
    """Interaction counts over the training-visible part of each user's sequence."""
    pop: Counter = Counter()
    for ex in split.valid:
        pop.update(ex.history)
    return pop


# --------------------------------------------------------------------------
# canonical bundle: catalog.jsonl, sequences.jsonl, split.jsonl


def _dump(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(", ", ": ")) + "\n"


def _write_lines(path: Path, lines: Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)


def write_bundle(out_dir: str | Path, catalog: Catalog, sequences: Sequence[UserSequence], split: LeaveOneOutSplit) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {name: out / f"{name}.jsonl" for name in ("catalog", "sequences", "split")}
    _write_lines(paths["catalog"], (_dump({"item_id": i, "title": t}) for i, t in catalog.items()))
    _write_lines(paths["sequences"], (_dump({"user_id": s.user_id, "items": list(s.items)}) for s in sequences))
    write_split(paths["split"], split)
    return paths


def write_split(path: str | Path, split: LeaveOneOutSplit) -> None:
    _write_lines(
        Path(path),
        (
            _dump({"user_id": ex.user_id, "role": role, "history": list(ex.history), "target": ex.target})
            for role, ex in split.roles()
        ),
    )


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    yield n, json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"invalid JSON: {exc.msg}", str(path), n) from None


def read_catalog(path: str | Path) -> Catalog:
    path = Path(path)
    try:
        return Catalog([(obj["item_id"], obj["title"]) for _, obj in _read_jsonl(path)])
    except (KeyError, TypeError) as exc:
        raise DataError(f"bad catalog record: {exc}", str(path)) from None


def read_sequences(path: str | Path) -> list[UserSequence]:
    path = Path(path)
    out = []
    for n, obj in _read_jsonl(path):
        try:
            out.append(UserSequence(str(obj["user_id"]), tuple(obj["items"])))
        except (KeyError, TypeError) as exc:
            raise DataError(f"bad sequence record: {exc}", str(path), n) from None
    return out


def read_split(path: str | Path) -> LeaveOneOutSplit:
    path = Path(path)
    split = LeaveOneOutSplit()
    for n, obj in _read_jsonl(path):
        role = obj.get("role")
        if role not in ("train", "valid", "test"):
            raise DataError(f"bad role {role!r}", str(path), n)
        try:
            getattr(split, role).append(Example(str(obj["user_id"]), tuple(obj["history"]), obj["target"]))
        except (KeyError, TypeError) as exc:
            raise DataError(f"bad split record: {exc}", str(path), n) from None
    return split
