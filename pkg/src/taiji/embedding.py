"""Deterministic feature-hashing text embedder.

Token n-grams are hashed (seeded BLAKE2b) into a fixed number of signed
buckets, weighted by term frequency, and the vector is L2-normalised. No
model download, stable across runs and platforms.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


class HashingEmbedder:
    def __init__(self, dim: int = 256, ngram: tuple[int, int] = (1, 2), seed: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        lo, hi = ngram
        if not 1 <= lo <= hi:
            raise ValueError("bad n-gram range")
        self.dim = dim
        self.ngram = (lo, hi)
        self.seed = seed
        self._key = seed.to_bytes(8, "little", signed=True)
        self._cache: dict[str, tuple[int, float]] = {}

    def _bucket(self, gram: str) -> tuple[int, float]:
        hit = self._cache.get(gram)
        if hit is None:
            d = hashlib.blake2b(gram.encode(), digest_size=8, key=self._key).digest()
            v = int.from_bytes(d, "little")
            hit = (v % self.dim, 1.0 if (v >> 63) & 1 else -1.0)
            if len(self._cache) < 200_000:
                self._cache[gram] = hit
        return hit

    def grams(self, tokens: Sequence[str]) -> Iterable[str]:
        lo, hi = self.ngram
        for n in range(lo, hi + 1):
            for i in range(len(tokens) - n + 1):
                yield " ".join(tokens[i:i + n])

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram, tf in Counter(self.grams(tokenize(text))).items():
            b, sign = self._bucket(gram)
            vec[b] += sign * tf
        norm = np.linalg.norm(vec)
        return vec / norm if norm > 0 else vec

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim))
        return np.vstack([self.embed(t) for t in texts])

    def config(self) -> dict:
        return {"kind": "hashing", "dim": self.dim, "ngram": list(self.ngram), "seed": self.seed}


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))
