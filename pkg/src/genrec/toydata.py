"""Generators for the small datasets shipped in ``genrec/data``.

``toy50``  -- 50 users walking a fixed 20-title cycle, so the next item is a
             deterministic function of the previous one (memorization check).
``toy100`` -- 100 users from a seeded genre-biased Markov chain over 40 titles,
             MovieLens format (end-to-end smoke runs).
``toy_amazon`` -- 30 reviewers in Amazon JSON-lines format.

Regenerate with ``python -m genrec.toydata --out src/genrec/data``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import random
from importlib import resources
from pathlib import Path

_WORDS_A = ["Harbor", "Silent", "Crimson", "Paper", "Northern", "Glass", "Hollow", "Velvet", "Broken", "Golden",
            "Midnight", "Iron", "Summer", "Distant", "Electric", "Quiet", "Wild", "Last", "Amber", "Winter"]
_WORDS_B = ["Lights", "River", "Garden", "Station", "Letters", "Empire", "Road", "Hearts", "Signal", "Harvest",
            "Orchard", "Frontier", "Tide", "Parade", "Mirror", "Voyage", "Circus", "Shadows", "Bridge", "Canyon"]
_GENRES = ["Drama", "Comedy", "Thriller", "Animation"]


def _titles(n: int, rng: random.Random) -> list[str]:
    seen, out = set(), []
    while len(out) < n:
        t = f"{rng.choice(_WORDS_A)} {rng.choice(_WORDS_B)} ({rng.randrange(1930, 2020)})"
        if t not in seen:
            seen.add(t)
            out.append(t)
    return out


def _movielens_csv(titles: dict[str, tuple[str, str]], ratings: list[tuple[str, str, float, int]]) -> tuple[str, str]:
    movies = io.StringIO(newline="")
    w = csv.writer(movies, lineterminator="\n")
    w.writerow(["movieId", "title", "genres"])
    for mid, (title, genre) in titles.items():
        w.writerow([mid, title, genre])
    rat = io.StringIO(newline="")
    w = csv.writer(rat, lineterminator="\n")
    w.writerow(["userId", "movieId", "rating", "timestamp"])
    for row in ratings:
        w.writerow(row)
    return rat.getvalue(), movies.getvalue()


def toy50() -> tuple[str, str]:
    """(ratings.csv, movies.csv) text for the 50-user deterministic-successor dataset."""
    rng = random.Random(50)
    names = _titles(20, rng)
    titles = {str(i + 1): (names[i], _GENRES[i % 4]) for i in range(20)}
    ratings = []
    for u in range(50):
        # every validation transition also occurs as some user's training transition
        start = (3 * u) % 20
        n = 4 + (u // 7) % 4
        for j in range(n):
            ratings.append((str(u + 1), str((start + j) % 20 + 1), 4.0, 1_000_000 + 1000 * u + 10 * j))
    return _movielens_csv(titles, ratings)


def toy100() -> tuple[str, str]:
    rng = random.Random(100)
    names = _titles(38, rng)
    names += ["Le Café Bleu (1998)", names[3]]  # one non-ASCII title, one duplicate title
    titles = {str(10 * (i + 1)): (names[i], _GENRES[i % 4]) for i in range(len(names))}
    ids = list(titles)
    by_genre = {g: [m for m in ids if titles[m][1] == g] for g in _GENRES}
    ratings = []
    for u in range(100):
        genre = _GENRES[u % 4]
        n = rng.randrange(4, 12)
        ts = 1_500_000_000 + rng.randrange(10_000)
        cur = rng.choice(by_genre[genre])
        for _ in range(n):
            ratings.append((str(u + 1), cur, float(rng.choice([2.5, 3.0, 3.5, 4.0, 4.5, 5.0])), ts))
            ts += rng.choice([0, 60, 3600])
            pool = by_genre[genre] if rng.random() < 0.8 else ids
            cur = rng.choice(pool)
    rng.shuffle(ratings)
    return _movielens_csv(titles, ratings)


def toy_amazon() -> tuple[str, str]:
    rng = random.Random(7)
    products = [f"B00{n:05d}" for n in range(25)]
    meta = []
    for i, asin in enumerate(products):
        rec = {"asin": asin, "title": f"{rng.choice(_WORDS_A)} {rng.choice(['Puzzle', 'Robot', 'Blocks', 'Kite', 'Train Set'])} #{i}"}
        if i == 24:
            rec = {"asin": asin}  # no title: its reviews are dropped
        meta.append(json.dumps(rec, sort_keys=True))
    reviews = []
    for u in range(30):
        t = 1_400_000_000 + u * 100_000
        for _ in range(rng.randrange(3, 8)):
            t += rng.randrange(1, 5000)
            reviews.append(json.dumps({"asin": rng.choice(products), "overall": float(rng.randrange(1, 6)),
                                       "reviewerID": f"A{u:04d}", "unixReviewTime": t}, sort_keys=True))
    return "\n".join(reviews) + "\n", "\n".join(meta) + "\n"


def bundled_path(name: str) -> Path:
    """Directory of a shipped dataset (``toy50``, ``toy100`` or ``toy_amazon``)."""
    return Path(str(resources.files("genrec") / "data" / name))


def write_all(out: Path) -> None:
    for name, fn, files in (("toy50", toy50, ("ratings.csv", "movies.csv")),
                            ("toy100", toy100, ("ratings.csv", "movies.csv")),
                            ("toy_amazon", toy_amazon, ("reviews.jsonl", "metadata.jsonl"))):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        for fname, text in zip(files, fn()):
            (d / fname).write_bytes(text.encode("utf-8"))


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    write_all(ap.parse_args().out)
