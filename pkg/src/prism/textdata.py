"""Bundled training text, byte-level tokenization and batch sampling.

The bundled corpus is generated deterministically at first use from a
seeded word-level generator (Zipf-weighted vocabulary, simple sentence
templates), so the repository ships no binary blob and every install sees
identical bytes.  Any UTF-8 text file can be substituted via config.
"""

from __future__ import annotations

import functools
from pathlib import Path

import numpy as np

__all__ = [
    "corpus_text",
    "load_tokens",
    "train_val_split",
    "BatchSampler",
    "val_windows",
]

_CORPUS_SEED = 20240911
_CORPUS_MIN_BYTES = 1_000_000

# a small working vocabulary; Zipf weighting below supplies the skew that
# makes byte-level modeling learnable
_VOCAB = (
    "the of and a to in is was that it he for on with as his at by had not "
    "be her from she this but they which or an were we their been has will "
    "when who more no if out so said what up its about into than them can "
    "only other time new some could these two may then do first any my now "
    "such like our over man me even most made after also did many before "
    "must through years where much your way well down should because each "
    "just those people how too little state good very make world still own "
    "see men work long here get both between life being under never day "
    "same another know while last might us great old year off come since "
    "against go came right used take three house himself few million light "
    "water room mother machine never place course different small large "
    "company group country problem fact hand part child eye woman guards "
    "point government week member night question story example family "
    "river stone mountain window answer music paper letter wind garden "
    "winter summer morning evening silence distance memory shadow village "
    "harbor engine signal number system record circuit valley meadow"
).split()

_SENTENCE_LEN_LO = 4
_SENTENCE_LEN_HI = 15
_PARA_LO = 3
_PARA_HI = 8


@functools.lru_cache(maxsize=2)
def corpus_text(min_bytes: int = _CORPUS_MIN_BYTES, seed: int = _CORPUS_SEED) -> str:
    """Deterministic synthetic English-like text of at least min_bytes."""
    rng = np.random.default_rng(seed)
    ranks = np.arange(1, len(_VOCAB) + 1, dtype=np.float64)
    pmf = ranks**-1.1
    pmf /= pmf.sum()

    out: list[str] = []
    size = 0
    while size < min_bytes:
        # draw a block of word indices at once; assemble sentences from it
        words = rng.choice(len(_VOCAB), size=4096, p=pmf)
        pos = 0
        while pos + _SENTENCE_LEN_HI < len(words) and size < min_bytes:
            para_sents = int(rng.integers(_PARA_LO, _PARA_HI + 1))
            para: list[str] = []
            for _ in range(para_sents):
                n = int(rng.integers(_SENTENCE_LEN_LO, _SENTENCE_LEN_HI + 1))
                if pos + n > len(words):
                    break
                toks = [_VOCAB[i] for i in words[pos : pos + n]]
                pos += n
                if n >= 8 and rng.random() < 0.35:
                    toks[n // 2] = toks[n // 2] + ","
                sent = " ".join(toks)
                para.append(sent[0].upper() + sent[1:] + ".")
            text = " ".join(para) + "\n\n"
            out.append(text)
            size += len(text)
    return "".join(out)


def load_tokens(path: str | Path | None = None) -> np.ndarray:
    """Byte-level tokens of the given file, or of the bundled corpus."""
    if path is None:
        data = corpus_text().encode("utf-8")
    else:
        data = Path(path).read_bytes()
    if not data:
        raise ValueError("empty training text")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int32)


def train_val_split(tokens: np.ndarray, val_frac: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Held-out split from the tail of the stream."""
    if not 0.0 < val_frac < 1.0:
        raise ValueError("val_frac must be in (0, 1)")
    n_val = max(1, int(len(tokens) * val_frac))
    return tokens[:-n_val], tokens[-n_val:]


def _window_starts(n_tokens: int, seq_len: int) -> np.ndarray:
    # windows of seq_len + 1 bytes (inputs plus shifted targets), stride seq_len
    n = n_tokens - seq_len - 1
    if n < 0:
        raise ValueError(f"need at least {seq_len + 2} tokens, have {n_tokens}")
    return np.arange(0, n + 1, seq_len)


class BatchSampler:
    """Deterministic strided micro-batch sampler over a seed-shuffled index.

    Rank k at step t reads batch rows ``(t * n_ranks + k) * batch ...``
    of the shuffled window order, modulo the window count, so the schedule
    is a pure function of the seed and never depends on fault activity.
    """

    def __init__(self, tokens: np.ndarray, seq_len: int, rng: np.random.Generator):
        self.tokens = tokens
        self.seq_len = seq_len
        self.starts = _window_starts(len(tokens), seq_len)
        self.order = rng.permutation(len(self.starts))

    def batch(self, step: int, rank: int, n_ranks: int, batch: int) -> tuple[np.ndarray, np.ndarray]:
        base = (step * n_ranks + rank) * batch
        idx = (base + np.arange(batch)) % len(self.order)
        s = self.starts[self.order[idx]]
        win = self.tokens[s[:, None] + np.arange(self.seq_len + 1)]
        return win[:, :-1], win[:, 1:]


def val_windows(tokens: np.ndarray, seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """All non-overlapping evaluation windows of the validation split."""
    s = _window_starts(len(tokens), seq_len)
    win = tokens[s[:, None] + np.arange(seq_len + 1)]
    return win[:, :-1], win[:, 1:]
