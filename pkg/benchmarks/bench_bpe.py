"""Compare the compiled and pure-Python BPE kernels on merge learning and encoding.

    python benchmarks/bench_bpe.py [--lines 4000] [--vocab 4096] [--repeat 3]
"""

from __future__ import annotations

import argparse
import random
import time

from genrec.tokenizer import BPETokenizer, _kernels_py
from genrec.toydata import _WORDS_A, _WORDS_B

try:
    from genrec.tokenizer import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


_SYLLABLES = [c + v for c in "bcdfghklmnprstvz" for v in "aeiou"] + ["qu", "th", "sch", "é", "ñ"]


def corpus(lines: int, seed: int = 0) -> list[str]:
    """Title-list lines over a large made-up vocabulary, so merge learning runs to the full size."""
    rng = random.Random(seed)
    words = ["".join(rng.choice(_SYLLABLES) for _ in range(rng.randrange(1, 5))).capitalize() for _ in range(6000)]
    words += _WORDS_A + _WORDS_B
    titles = [f"{' '.join(rng.choice(words) for _ in range(rng.randrange(1, 4)))} ({rng.randrange(1930, 2020)})"
              for _ in range(5000)]
    return [", ".join(rng.choice(titles) for _ in range(rng.randrange(3, 20))) for _ in range(lines)]


def best_of(repeat: int, fn) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lines", type=int, default=4000)
    ap.add_argument("--vocab", type=int, default=4096)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    text = corpus(args.lines)
    backends = [("python", _kernels_py)] + ([("cython", _kernels_c)] if _kernels_c else [])
    results = {}
    for name, kernels in backends:
        tok = BPETokenizer.train(text, args.vocab, kernels=kernels)
        t_train = best_of(args.repeat, lambda: BPETokenizer.train(text, args.vocab, kernels=kernels))

        def encode_all():
            fresh = BPETokenizer(tok.merges, kernels=kernels)  # empty chunk cache
            for line in text:
                fresh.encode(line)

        t_enc = best_of(args.repeat, encode_all)
        results[name] = (t_train, t_enc, tok.merges)
        print(f"{name:7s} train {t_train * 1e3:9.1f} ms   encode {t_enc * 1e3:9.1f} ms   vocab {tok.vocab_size}")
    if len(results) == 2:
        (tp, ep, mp), (tc, ec, mc) = results["python"], results["cython"]
        print(f"speedup train x{tp / tc:.2f}   encode x{ep / ec:.2f}   identical merges: {mp == mc}")
    else:
        print("compiled kernels not built; only the Python backend was timed")


if __name__ == "__main__":
    main()
