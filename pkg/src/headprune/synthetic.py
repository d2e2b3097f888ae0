"""Seeded text8-style corpus (lowercase a-z and spaces) for desk-scale runs.

Words are built from syllables, drawn with Zipfian frequencies and chained
by a sparse word-bigram table, so the text has structure both inside words
and across them.

    python -m headprune.synthetic corpus.txt --chars 1000000 --seed 0
"""

from __future__ import annotations

import argparse

import numpy as np

ONSETS = ["", "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "th", "st", "ch", "tr"]
NUCLEI = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]
CODAS = ["", "", "n", "r", "s", "t", "l", "nd", "ng"]


def make_words(rng: np.random.Generator, n_words: int) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n_words:
        n_syl = rng.choice([1, 1, 2, 2, 2, 3])
        w = "".join(rng.choice(ONSETS) + rng.choice(NUCLEI) + rng.choice(CODAS) for _ in range(n_syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def synthetic_text8(n_chars: int = 1_000_000, seed: int = 0, n_words: int = 400, branching: int = 6) -> str:
    rng = np.random.default_rng(seed)
    words = make_words(rng, n_words)
    zipf = 1.0 / np.arange(1, n_words + 1)
    zipf /= zipf.sum()
    succ = [rng.choice(n_words, size=branching, replace=False, p=zipf) for _ in range(n_words)]
    out: list[str] = []
    size = 0
    w = 0
    while size < n_chars:
        # mostly follow the bigram table, sometimes jump by unigram frequency
        if rng.random() < 0.75:
            w = int(succ[w][min(int(rng.geometric(0.45)) - 1, branching - 1)])
        else:
            w = int(rng.choice(n_words, p=zipf))
        out.append(words[w])
        size += len(words[w]) + 1
    return " ".join(out)[:n_chars]


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--chars", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(synthetic_text8(args.chars, args.seed))


if __name__ == "__main__":
    main()
