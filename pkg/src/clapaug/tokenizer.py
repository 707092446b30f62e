"""Hashing tokenizer: lowercase, split on non-alphanumerics, FNV-1a-64 mod V."""

import re
from functools import lru_cache

from clapaug import kernels
from clapaug.errors import TokenizeError

_TOKEN_RE = re.compile(r"[^\W_]+")

STOPWORDS = frozenset(
    "a an the and or of in on at to for with by from as is are was were be been "
    "it its this that these those into over under while then than s".split()
)


def words(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def content_words(text: str) -> set[str]:
    return {w for w in words(text) if w not in STOPWORDS}


def bucket(token: str, vocab_buckets: int) -> int:
    return kernels.fnv1a64(token.encode("utf-8")) % vocab_buckets


@lru_cache(maxsize=65536)
def tokenize(text: str, vocab_buckets: int = 32768) -> tuple[int, ...]:
    """Bucket ids for ``text``. Raises TokenizeError if it has no alphanumerics."""
    if vocab_buckets < 1:
        raise ValueError("vocab_buckets must be >= 1")
    ids = tuple(bucket(w, vocab_buckets) for w in words(text))
    if not ids:
        raise TokenizeError(f"caption has no alphanumeric tokens: {text!r}")
    return ids
