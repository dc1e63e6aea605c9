"""Random permutation keys over the model dimension.

A key is stored as an index vector ``map`` where ``map[j]`` is the source
column placed at position ``j``; applying it to a matrix is the gather
``m[:, map]``, equivalent to right-multiplying by the 0/1 matrix returned
from :func:`to_matrix`.

Seeded keys come from a Fisher-Yates shuffle driven by the raw 64-bit
output of numpy's ``PCG64`` bit generator (seeded through ``SeedSequence``).
Only raw outputs are consumed, and bounded draws use rejection sampling, so
the key for a given seed does not depend on numpy's ``Generator`` methods.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator

import numpy as np

from kvshield.errors import InvalidDimensionError, ShapeError

_TWO64 = 1 << 64


class _RawStream:
    def __init__(self, seed: int):
        if seed < 0:
            raise InvalidDimensionError(f"seed must be non-negative, got {seed}")
        self._bits = np.random.PCG64(seed)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        limit = _TWO64 - (_TWO64 % n)
        while True:
            r = int(self._bits.random_raw())
            if r < limit:
                return r % n


def _fisher_yates(stream: _RawStream, n: int) -> list[int]:
    items = list(range(n))
    for i in range(n - 1, 0, -1):
        j = stream.below(i + 1)
        items[i], items[j] = items[j], items[i]
    return items


@dataclass(frozen=True)
class PermutationKey:
    """A bijection on ``range(dim)``; optionally marked head-aligned."""

    map: tuple[int, ...]
    head_layout: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "map", tuple(int(i) for i in self.map))
        d = len(self.map)
        if d == 0:
            raise InvalidDimensionError("permutation key must have dim >= 1")
        if sorted(self.map) != list(range(d)):
            raise InvalidDimensionError("map is not a bijection on 0..dim-1")
        if self.head_layout is not None:
            num_heads, head_dim = (int(v) for v in self.head_layout)
            object.__setattr__(self, "head_layout", (num_heads, head_dim))
            if num_heads * head_dim != d:
                raise InvalidDimensionError(f"head layout {num_heads}x{head_dim} does not cover dim {d}")
            if not is_head_aligned(self, num_heads, head_dim):
                raise InvalidDimensionError("key marked head-aligned does not map heads onto heads")

    @property
    def dim(self) -> int:
        return len(self.map)

    @cached_property
    def index(self) -> np.ndarray:
        idx = np.array(self.map, dtype=np.intp)
        idx.setflags(write=False)
        return idx

    def is_identity(self) -> bool:
        return self.map == tuple(range(self.dim))

    def __repr__(self):
        shown = self.map if self.dim <= 12 else self.map[:12] + ("...",)
        return f"PermutationKey(dim={self.dim}, map={shown}, head_layout={self.head_layout})"


def identity_key(dim: int, head_layout: tuple[int, int] | None = None) -> PermutationKey:
    return PermutationKey(tuple(range(dim)), head_layout)


def generate_key(seed: int, dim: int) -> PermutationKey:
    """Uniformly random key on ``range(dim)``, reproducible from ``seed``."""
    if dim < 1:
        raise InvalidDimensionError(f"dim must be >= 1, got {dim}")
    return PermutationKey(tuple(_fisher_yates(_RawStream(seed), dim)))


def generate_head_aligned_key(seed: int, num_heads: int, head_dim: int) -> PermutationKey:
    """Random key that moves whole heads and shuffles within each head.

    Output block ``j`` is filled from source head ``head_order[j]``, reordered
    by its own inner permutation. With one head this draws exactly the same
    numbers as ``generate_key(seed, head_dim)``.
    """
    if num_heads < 1 or head_dim < 1:
        raise InvalidDimensionError(f"need num_heads >= 1 and head_dim >= 1, got {num_heads}, {head_dim}")
    stream = _RawStream(seed)
    head_order = _fisher_yates(stream, num_heads)
    mapping: list[int] = []
    for src in head_order:
        inner = _fisher_yates(stream, head_dim)
        mapping.extend(src * head_dim + t for t in inner)
    return PermutationKey(tuple(mapping), (num_heads, head_dim))


def is_head_aligned(key: PermutationKey, num_heads: int, head_dim: int) -> bool:
    """True if every output head block is filled from a single source head block."""
    if num_heads * head_dim != key.dim:
        return False
    seen = set()
    for j in range(num_heads):
        block = key.map[j * head_dim:(j + 1) * head_dim]
        sources = {i // head_dim for i in block}
        if len(sources) != 1:
            return False
        seen |= sources
    return len(seen) == num_heads


def to_matrix(key: PermutationKey, dtype=np.float64) -> np.ndarray:
    """0/1 matrix ``M`` with ``x @ M == apply_columns(x, key)``."""
    m = np.zeros((key.dim, key.dim), dtype=dtype)
    m[key.index, np.arange(key.dim)] = 1
    return m


def apply_columns(m: np.ndarray, key: PermutationKey) -> np.ndarray:
    """Reorder the columns of ``m`` by gather; no arithmetic is performed."""
    if m.ndim != 2 or m.shape[1] != key.dim:
        raise ShapeError(f"cannot permute columns of shape {m.shape} with a dim-{key.dim} key")
    return np.ascontiguousarray(m[:, key.index])


def invert(key: PermutationKey) -> PermutationKey:
    inv = [0] * key.dim
    for j, src in enumerate(key.map):
        inv[src] = j
    # the inverse of a head-aligned key is head-aligned with the same layout
    return PermutationKey(tuple(inv), key.head_layout)


def compose(a: PermutationKey, b: PermutationKey) -> PermutationKey:
    """Key equivalent to applying ``a`` first and then ``b``."""
    if a.dim != b.dim:
        raise ShapeError(f"cannot compose keys of dim {a.dim} and {b.dim}")
    layout = a.head_layout if a.head_layout == b.head_layout else None
    return PermutationKey(tuple(a.map[i] for i in b.map), layout)


def all_keys(dim: int) -> Iterator[PermutationKey]:
    """Every key on ``range(dim)`` in lexicographic order of ``map``."""
    for perm in itertools.permutations(range(dim)):
        yield PermutationKey(perm)
