"""Word embedding tables with a deterministic fallback for unknown tokens."""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError, ParseError

# Characters stripped from sentences before whitespace tokenization.
_PUNCT = '.,!?;:"\'()'
_STRIP = str.maketrans("", "", _PUNCT)


def tokenize(sentence):
    """Lowercase, drop punctuation and split on whitespace.

    Tokens that become empty after stripping (e.g. "...") are dropped.
    """
    return [t for t in sentence.lower().translate(_STRIP).split() if t]


class EmbeddingTable:
    """Token -> vector table of a fixed dimension, frozen after construction.

    Tokens missing from the table map to a pseudo-random unit-norm vector
    derived only from (token, fallback_seed), so lookups never fail and are
    reproducible across processes. Vectors are inputs, never trained.
    """

    def __init__(self, dim, entries=None, fallback_seed=0):
        if dim < 1:
            raise ConfigError(f"embedding dim must be positive, got {dim}")
        self.dim = int(dim)
        self.entries = {} if entries is None else dict(entries)
        self.fallback_seed = int(fallback_seed)

    def lookup(self, token):
        """Return the vector for `token`, synthesizing one if it is unknown."""
        if not token:
            raise InputError("cannot look up an empty token")
        vec = self.entries.get(token)
        if vec is None:
            return self._fallback(token)
        return vec

    def __contains__(self, token):
        return token in self.entries

    def __len__(self):
        return len(self.entries)

    def _fallback(self, token):
        # Keyed hash rather than Python's hash(): stable across processes.
        key = (self.fallback_seed & (2**64 - 1)).to_bytes(8, "little")
        digest = hashlib.blake2b(token.encode("utf-8"), key=key, digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        vec = rng.standard_normal(self.dim)
        norm = np.linalg.norm(vec)
        while norm < 1e-12:  # vanishing draws are essentially impossible; keep the contract anyway
            vec = rng.standard_normal(self.dim)
            norm = np.linalg.norm(vec)
        return vec / norm


def load_embeddings(path, dim, fallback_seed=0):
    """Parse a text table with one `token v1 .. vD` line per entry.

    The first data line fixes the file's column count. A requested `dim`
    that disagrees with it raises ConfigError; a later line whose arity
    deviates from the file's own width, or that holds a non-numeric or
    non-finite value, raises ParseError naming the line. Duplicate tokens
    keep their first occurrence.
    """
    entries = {}
    file_dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            token, values = fields[0], fields[1:]
            if file_dim is None:
                file_dim = len(values)
                if file_dim != dim:
                    raise ConfigError(
                        f"{path}: file provides {file_dim}-dimensional vectors, expected {dim}"
                    )
            if len(values) != file_dim:
                raise ParseError(
                    f"expected {file_dim} values after the token, got {len(values)}", line=lineno
                )
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise ParseError("non-numeric embedding value", line=lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ParseError("non-finite embedding value", line=lineno)
            if token not in entries:
                entries[token] = vec
    if file_dim is None:
        raise ParseError("embedding file has no entries", line=1)
    return EmbeddingTable(dim, entries, fallback_seed)


@dataclass(frozen=True)
class EmbeddingConfig:
    """How to obtain a table: a file path, or fallback-only when path is None."""

    dim: int
    path: str | None = None
    fallback_seed: int = 0


def build_table(cfg):
    if cfg.path:
        return load_embeddings(cfg.path, cfg.dim, cfg.fallback_seed)
    return EmbeddingTable(cfg.dim, fallback_seed=cfg.fallback_seed)
