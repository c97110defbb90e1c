"""Byte-level BPE with reserved special tokens.

Text is normalised (lowercased, whitespace collapsed) before encoding, so
``decode(encode(x)) == normalize(x)``. Words are split on spaces; every word
after the first carries its leading space byte, and merges never cross word
boundaries.
"""

from __future__ import annotations

import codecs
import hashlib
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PAD, BOS, EOS, SEP, LATENT = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>", "<latent>")
N_SPECIAL = len(SPECIAL_TOKENS)
N_BYTES = 256
BASE_SIZE = N_SPECIAL + N_BYTES

_HEADER = "#latentdialog-vocab v1"
_MERGES = "#merges"


class VocabError(ValueError):
    pass


def normalize(text):
    return " ".join(text.lower().split())


def _words(text):
    norm = normalize(text)
    if not norm:
        return []
    parts = norm.split(" ")
    return [parts[0]] + [" " + w for w in parts[1:]]


def _byte_ids(word):
    return [N_SPECIAL + b for b in word.encode("utf-8")]


@dataclass
class Vocab:
    merges: list = field(default_factory=list)  # [(left_id, right_id)], new id = BASE_SIZE + rank

    def __post_init__(self):
        self.tokens = [s.encode() for s in SPECIAL_TOKENS] + [bytes([b]) for b in range(N_BYTES)]
        self.ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            if not (0 <= a < len(self.tokens) and 0 <= b < len(self.tokens)) or a < N_SPECIAL or b < N_SPECIAL:
                raise VocabError(f"merge {rank} refers to an invalid id pair ({a}, {b})")
            self.ranks[(a, b)] = rank
            self.tokens.append(self.tokens[a] + self.tokens[b])
        self._cache = {}

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens)

    # -- encoding ---------------------------------------------------------
    def _encode_word(self, word):
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        ids = _byte_ids(word)
        ranks = self.ranks
        while len(ids) > 1:
            best, best_rank = -1, None
            for i in range(len(ids) - 1):
                r = ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best < 0:
                break
            new_id = BASE_SIZE + best_rank
            a, b = self.merges[best_rank]
            out = []
            i = 0
            while i < len(ids):
                if i + 1 < len(ids) and ids[i] == a and ids[i + 1] == b:
                    out.append(new_id)
                    i += 2
                else:
                    out.append(ids[i])
                    i += 1
            ids = out
        result = tuple(ids)
        if len(self._cache) < 100_000:
            self._cache[word] = result
        return result

    def encode(self, text):
        out = []
        for w in _words(text):
            out.extend(self._encode_word(w))
        return out

    def decode(self, ids):
        chunks = []
        n = len(self.tokens)
        for i in ids:
            i = int(i)
            if not 0 <= i < n:
                raise IndexError(f"token id {i} outside vocabulary of size {n}")
            if i < N_SPECIAL:
                if i == SEP:
                    chunks.append(b" ")
                continue
            chunks.append(self.tokens[i])
        return normalize(b"".join(chunks).decode("utf-8", errors="replace"))

    def token_string(self, i):
        return self.tokens[i].decode("utf-8", errors="backslashreplace")

    # -- persistence ------------------------------------------------------
    def to_text(self):
        lines = [_HEADER]
        for tok in self.tokens:
            lines.append(codecs.escape_encode(tok)[0].decode("ascii"))
        lines.append(_MERGES)
        lines.extend(f"{a} {b}" for a, b in self.merges)
        return "\n".join(lines) + "\n"

    def save(self, path):
        with open(path, "w", encoding="ascii") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text):
        lines = text.split("\n")
        if not lines or lines[0] != _HEADER:
            raise VocabError("not a vocab file (bad header)")
        try:
            split = lines.index(_MERGES)
        except ValueError:
            raise VocabError("vocab file has no merge section") from None
        merges = []
        for line in lines[split + 1:]:
            if line.strip():
                a, b = line.split()
                merges.append((int(a), int(b)))
        vocab = cls(merges)
        listed = [codecs.escape_decode(line.encode("ascii"))[0] for line in lines[1:split]]
        if listed != vocab.tokens:
            raise VocabError("token list does not match the merge rules")
        return vocab

    @classmethod
    def load(cls, path):
        with open(path, encoding="ascii") as fh:
            return cls.from_text(fh.read())

    def fingerprint(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _count_pairs(ids, offsets, freqs):
    """Weighted counts of adjacent in-word pairs, keyed ``left * 2**32 + right``."""
    if len(ids) < 2:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    word_of = np.repeat(np.arange(len(freqs)), np.diff(offsets))
    same = word_of[:-1] == word_of[1:]
    keys = (ids[:-1].astype(np.int64) << 32) | ids[1:].astype(np.int64)
    keys = keys[same]
    weights = freqs[word_of[:-1][same]]
    uniq, inv = np.unique(keys, return_inverse=True)
    counts = np.bincount(inv, weights=weights).astype(np.int64)
    return uniq, counts


def train_bpe(texts, target_vocab_size):
    """Learn merges until ``target_vocab_size`` tokens exist or no pair repeats.

    Ties between equally frequent pairs go to the smallest ``(left, right)``.
    """
    if target_vocab_size <= BASE_SIZE:
        raise VocabError(f"target vocab size must exceed {BASE_SIZE} (specials + byte alphabet), got {target_vocab_size}")
    counter = Counter()
    for t in texts:
        counter.update(_words(t))
    if not counter:
        raise VocabError("cannot train a tokenizer on an empty corpus")
    words = sorted(counter)
    freqs = np.array([counter[w] for w in words], dtype=np.int64)
    pieces = [_byte_ids(w) for w in words]
    ids = np.array([i for p in pieces for i in p], dtype=np.int32)
    offsets = np.zeros(len(pieces) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(p) for p in pieces])

    merges = []
    while BASE_SIZE + len(merges) < target_vocab_size:
        keys, counts = _count_pairs(ids, offsets, freqs)
        if len(keys) == 0 or counts.max() < 2:
            break
        best = int(keys[np.flatnonzero(counts == counts.max())[0]])  # keys are sorted ascending
        left, right = best >> 32, best & 0xFFFFFFFF
        new_id = BASE_SIZE + len(merges)
        merges.append((left, right))
        ids, offsets = kernels.merge_pair(ids, offsets, left, right, new_id)
    return Vocab(merges)
