"""Byte-level BPE with subword-cluster annotation and frequency classes.

Id layout: 0 is the reserved padding id, 1..256 are the raw bytes, and
learned merges follow.  Text is pre-split into words (an optional leading
space plus a run of letters or digits) and single punctuation marks; the
BPE pieces of one pre-split word form a subword cluster.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Mapping

import numpy as np

PAD_ID = 0
N_BASE = 257  # pad + 256 bytes

WORD_RE = re.compile(r" ?[^\W\d_]+| ?\d+| ?_+| ?[^\s\w]|\s+(?!\S)|\s+")


class ClusterPos(IntEnum):
    SINGLETON = 0
    FIRST = 1
    INTERIOR = 2


def pretokenize(text: str) -> list[str]:
    return WORD_RE.findall(text)


@dataclass
class Vocab:
    merges: list[tuple[int, int]]
    tokens: list[bytes]
    pad_id: int = PAD_ID
    token_to_id: dict = field(init=False, repr=False)
    _ranks: dict = field(init=False, repr=False)
    _cache: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {}
        for i, tok in enumerate(self.tokens):
            if i == self.pad_id:
                continue
            if tok in self.token_to_id:
                raise ValueError(f"token {tok!r} appears twice in the vocabulary")
            self.token_to_id[tok] = i
        self._ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache = {}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    def id_to_token(self, i: int) -> bytes:
        return self.tokens[i]

    def digest(self) -> str:
        return hashlib.sha256(dumps_vocab(self).encode("utf-8")).hexdigest()

    def _encode_word(self, word: str) -> list[int]:
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        ids = [b + 1 for b in word.encode("utf-8")]
        ranks = self._ranks
        while len(ids) > 1:
            best, best_rank = None, None
            for pair in zip(ids, ids[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            new_id = self.token_to_id[self.tokens[best[0]] + self.tokens[best[1]]]
            merged, i = [], 0
            while i < len(ids):
                if i + 1 < len(ids) and (ids[i], ids[i + 1]) == best:
                    merged.append(new_id)
                    i += 2
                else:
                    merged.append(ids[i])
                    i += 1
            ids = merged
        self._cache[word] = ids
        return ids


@dataclass
class TokenSequence:
    ids: np.ndarray
    cluster_pos: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_ids(cls, ids) -> "TokenSequence":
        """Wrap raw ids; every token is treated as a one-piece word."""
        ids = np.asarray(ids, dtype=np.int64)
        return cls(ids, np.zeros(len(ids), dtype=np.int8))


def _pair_counts(words, freqs):
    counts = Counter()
    where = defaultdict(set)
    for w, (syms, f) in enumerate(zip(words, freqs)):
        for pair in zip(syms, syms[1:]):
            counts[pair] += f
            where[pair].add(w)
    return counts, where


def train_bpe(corpus, vocab_size: int) -> Vocab:
    """Learn merges until the vocabulary holds ``vocab_size`` types.

    ``corpus`` is an iterable of documents or strings.  Among equally
    frequent pairs the lexicographically smallest (by byte content) wins.
    """
    if vocab_size < N_BASE:
        raise ValueError(f"vocab_size must be >= {N_BASE} (pad + 256 bytes), got {vocab_size}")
    word_freq = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        word_freq.update(pretokenize(getattr(doc, "text", doc)))
    if not n_docs:
        raise ValueError("cannot train on an empty corpus")

    tokens = [b""] + [bytes([b]) for b in range(256)]
    token_to_id = {t: i for i, t in enumerate(tokens) if i != PAD_ID}
    merges: list[tuple[int, int]] = []
    items = sorted(word_freq.items())
    words = [[b + 1 for b in w.encode("utf-8")] for w, _ in items]
    freqs = [f for _, f in items]
    counts, where = _pair_counts(words, freqs)

    while len(tokens) < vocab_size:
        live = [(c, p) for p, c in counts.items() if c > 0]
        if not live:
            raise ValueError(
                f"corpus supports only {len(tokens)} types; cannot reach vocab_size {vocab_size}"
            )
        top = max(c for c, _ in live)
        best = min((p for c, p in live if c == top), key=lambda p: (tokens[p[0]], tokens[p[1]]))
        merged_bytes = tokens[best[0]] + tokens[best[1]]
        new_id = token_to_id.get(merged_bytes)
        if new_id is None:
            new_id = len(tokens)
            tokens.append(merged_bytes)
            token_to_id[merged_bytes] = new_id
        merges.append(best)

        for w in sorted(where.pop(best, ())):
            syms, f = words[w], freqs[w]
            for pair in zip(syms, syms[1:]):
                counts[pair] -= f
            out, i = [], 0
            while i < len(syms):
                if i + 1 < len(syms) and (syms[i], syms[i + 1]) == best:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(syms[i])
                    i += 1
            words[w] = out
            for pair in zip(out, out[1:]):
                counts[pair] += f
                where[pair].add(w)
        counts.pop(best, None)
    return Vocab(merges, tokens)


def encode(vocab: Vocab, text: str) -> TokenSequence:
    ids: list[int] = []
    flags: list[int] = []
    for word in pretokenize(text):
        pieces = vocab._encode_word(word)
        ids.extend(pieces)
        if len(pieces) == 1:
            flags.append(ClusterPos.SINGLETON)
        else:
            flags.append(ClusterPos.FIRST)
            flags.extend([ClusterPos.INTERIOR] * (len(pieces) - 1))
    return TokenSequence(np.asarray(ids, dtype=np.int64), np.asarray(flags, dtype=np.int8))


def decode(vocab: Vocab, ids) -> str:
    """Inverse of ``encode``; padding ids decode to nothing."""
    out = []
    n = vocab.vocab_size
    for i in getattr(ids, "ids", ids):
        i = int(i)
        if not 0 <= i < n:
            raise ValueError(f"unknown token id {i}")
        out.append(vocab.tokens[i])
    return b"".join(out).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class FrequencyTable:
    counts: np.ndarray
    frequent_set: frozenset

    def is_frequent(self, token_id: int) -> bool:
        return int(token_id) in self.frequent_set


def frequent_count(vocab_size: int) -> int:
    """ceil(0.10 * vocab_size), computed in integers."""
    return -(-vocab_size // 10)


def frequency_table(corpus_tokens, vocab) -> FrequencyTable:
    """Occurrence counts over the token stream; the top 10% of ids by count are frequent.

    Ties at the cut go to the lower id; the padding id is never ranked.
    """
    if isinstance(corpus_tokens, Mapping):
        corpus_tokens = [corpus_tokens[k] for k in sorted(corpus_tokens)]
    counts = np.zeros(vocab.vocab_size, dtype=np.int64)
    seen = False
    for seq in corpus_tokens:
        ids = np.asarray(getattr(seq, "ids", seq), dtype=np.int64)
        counts += np.bincount(ids, minlength=vocab.vocab_size)
        seen = True
    if not seen:
        raise ValueError("frequency_table needs at least one sequence")
    pad = getattr(vocab, "pad_id", None)
    candidates = [i for i in range(vocab.vocab_size) if i != pad]
    # stable sort on -count keeps lower ids first among ties
    ranked = sorted(candidates, key=lambda i: -counts[i])
    return FrequencyTable(counts, frozenset(ranked[: frequent_count(vocab.vocab_size)]))


# -- serialization ----------------------------------------------------------
#
#   longctx-bpe 1
#   pad_id <id>
#   merges <K>
#   <left_id> <right_id>            K lines, in merge order
#   tokens <V>
#   <id> <hex of token bytes>       V lines, ids ascending; the pad line reads "<id> -"

HEADER = "longctx-bpe 1"


def dumps_vocab(vocab: Vocab) -> str:
    lines = [HEADER, f"pad_id {vocab.pad_id}", f"merges {len(vocab.merges)}"]
    lines += [f"{a} {b}" for a, b in vocab.merges]
    lines.append(f"tokens {vocab.vocab_size}")
    for i, tok in enumerate(vocab.tokens):
        lines.append(f"{i} {'-' if i == vocab.pad_id else tok.hex()}")
    return "\n".join(lines) + "\n"


def loads_vocab(text: str) -> Vocab:
    lines = text.splitlines()
    try:
        if lines[0] != HEADER:
            raise ValueError(f"bad header {lines[0]!r}")
        pad_id = int(lines[1].split()[1])
        n_merges = int(lines[2].split()[1])
        merges = [tuple(int(x) for x in ln.split()) for ln in lines[3 : 3 + n_merges]]
        tag, n_tok = lines[3 + n_merges].split()
        if tag != "tokens":
            raise ValueError("missing tokens section")
        tokens = []
        for expect, ln in enumerate(lines[4 + n_merges : 4 + n_merges + int(n_tok)]):
            idx, hexed = ln.split()
            if int(idx) != expect:
                raise ValueError(f"token ids out of order at {idx}")
            tokens.append(b"" if hexed == "-" else bytes.fromhex(hexed))
    except (IndexError, ValueError) as e:
        raise ValueError(f"malformed vocab file: {e}") from None
    if len(tokens) != int(n_tok):
        raise ValueError("malformed vocab file: truncated tokens section")
    return Vocab(merges, tokens, pad_id)


def save_vocab(vocab: Vocab, path) -> None:
    Path(path).write_text(dumps_vocab(vocab), encoding="utf-8")


def load_vocab(path) -> Vocab:
    return loads_vocab(Path(path).read_text(encoding="utf-8"))
