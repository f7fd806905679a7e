"""Mixed-radix item indices and the hash-set verifier.

A semantic ID ``(t_1, ..., t_L)`` maps to a single integer with the first
position as the least significant digit::

    index = t_1 + t_2 * T_1 + t_3 * T_1 * T_2 + ...

so ``(243, 129, 3)`` over radices ``(512, 512, 512)`` is ``852723``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UINT64_MAX = 2**64 - 1


class CodecRangeError(ValueError):
    """A token or index lies outside the range allowed by the radices."""


@dataclass(frozen=True)
class Radices:
    per_position: tuple[int, ...]

    def __init__(self, per_position: Iterable[int]):
        values = tuple(int(t) for t in per_position)
        if not values:
            raise ValueError("radices need at least one position")
        if any(t < 1 for t in values):
            raise ValueError(f"every radix must be >= 1, got {values}")
        size = 1
        for t in values:
            size *= t
        if size - 1 > UINT64_MAX:
            raise OverflowError(f"product of radices {values} does not fit in 64 bits")
        object.__setattr__(self, "per_position", values)

    @property
    def L(self) -> int:
        return len(self.per_position)

    @property
    def size(self) -> int:
        size = 1
        for t in self.per_position:
            size *= t
        return size

    @property
    def multipliers(self) -> tuple[int, ...]:
        out, acc = [], 1
        for t in self.per_position:
            out.append(acc)
            acc *= t
        return tuple(out)

    def __iter__(self):
        return iter(self.per_position)

    def __len__(self):
        return self.L

    def __getitem__(self, i):
        return self.per_position[i]


def as_radices(r) -> Radices:
    return r if isinstance(r, Radices) else Radices(r)


def check_id(tokens: Sequence[int], r: Radices) -> tuple[int, ...]:
    tokens = tuple(int(t) for t in tokens)
    if len(tokens) != r.L:
        raise CodecRangeError(f"semantic id has {len(tokens)} tokens, radices expect {r.L}")
    for pos, (t, size) in enumerate(zip(tokens, r.per_position), start=1):
        if not 0 <= t < size:
            raise CodecRangeError(f"token {t} at position {pos} outside [0, {size})")
    return tokens


def encode(tokens: Sequence[int], r) -> int:
    r = as_radices(r)
    tokens = check_id(tokens, r)
    return sum(t * m for t, m in zip(tokens, r.multipliers))


def decode(index: int, r) -> tuple[int, ...]:
    r = as_radices(r)
    index = int(index)
    if not 0 <= index < r.size:
        raise CodecRangeError(f"index {index} outside [0, {r.size})")
    out = []
    for t in r.per_position:
        index, digit = divmod(index, t)
        out.append(digit)
    return tuple(out)


def encode_prefix(tokens: Sequence[int], r) -> int:
    """Encode the first ``len(tokens)`` positions; used to order partial beams."""
    r = as_radices(r)
    return sum(int(t) * m for t, m in zip(tokens, r.multipliers))


def encode_array(ids: np.ndarray, r) -> np.ndarray:
    """Vectorised :func:`encode` over an ``(n, l)`` array, ``l <= L``.

    Rows shorter than ``L`` are treated as prefixes. Returns ``uint64``.
    """
    r = as_radices(r)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    n, l = ids.shape
    if l > r.L:
        raise CodecRangeError(f"ids have {l} positions, radices allow {r.L}")
    limits = np.asarray(r.per_position[:l], dtype=np.int64)
    bad = (ids < 0) | (ids >= limits)
    if bad.any():
        row, pos = map(int, np.argwhere(bad)[0])
        raise CodecRangeError(
            f"token {int(ids[row, pos])} at position {pos + 1} outside [0, {int(limits[pos])})"
        )
    out = np.zeros(n, dtype=np.uint64)
    for pos in range(l):
        out += ids[:, pos].astype(np.uint64) * np.uint64(r.multipliers[pos])
    return out


def decode_array(indices: np.ndarray, r) -> np.ndarray:
    r = as_radices(r)
    idx = np.asarray(indices, dtype=np.uint64).copy()
    if idx.size and int(idx.max()) >= r.size:
        raise CodecRangeError(f"index {int(idx.max())} outside [0, {r.size})")
    out = np.empty((idx.size, r.L), dtype=np.int64)
    for pos, t in enumerate(r.per_position):
        out[:, pos] = (idx % np.uint64(t)).astype(np.int64)
        idx //= np.uint64(t)
    return out


@dataclass(frozen=True)
class VocabularySet:
    """Immutable hash set of valid encoded item indices."""

    members: frozenset = field(repr=False)
    radices: Radices

    def __post_init__(self):
        size = self.radices.size
        for m in self.members:
            if not 0 <= m < size:
                raise CodecRangeError(f"member {m} outside [0, {size})")

    @classmethod
    def from_ids(cls, ids: Iterable[Sequence[int]], radices) -> "VocabularySet":
        r = as_radices(radices)
        return cls(frozenset(encode(i, r) for i in ids), r)

    @classmethod
    def from_indices(cls, indices: Iterable[int], radices) -> "VocabularySet":
        return cls(frozenset(int(i) for i in indices), as_radices(radices))

    def __contains__(self, index) -> bool:
        return int(index) in self.members

    def __len__(self) -> int:
        return len(self.members)

    def contains_id(self, tokens: Sequence[int]) -> bool:
        return encode(tokens, self.radices) in self.members

    def mask(self, indices: np.ndarray) -> np.ndarray:
        """Boolean membership mask for an array of encoded indices."""
        members = self.members
        return np.fromiter((i in members for i in np.asarray(indices).tolist()),
                           dtype=bool, count=np.size(indices))

    @property
    def density(self) -> float:
        return len(self.members) / self.radices.size

    def save(self, path) -> None:
        lines = [f"# radices {' '.join(map(str, self.radices))}"]
        lines += [str(i) for i in sorted(self.members)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, radices=None) -> "VocabularySet":
        """Read one decimal index per line; ``#`` lines are comments.

        A ``# radices ...`` header written by :meth:`save` supplies the radices
        when none are passed.
        """
        found = None
        indices = []
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["radices"]:
                    found = tuple(int(p) for p in parts[1:])
                continue
            indices.append(int(line))
        if radices is None:
            if found is None:
                raise ValueError(f"{path}: no radices given and no '# radices' header")
            radices = found
        return cls.from_indices(indices, radices)


def verify_batch(candidates, vocab: VocabularySet) -> list:
    """Keep the candidates whose encoded index is in ``vocab``.

    ``candidates`` is a sequence of ``(semantic_id, score)`` pairs (or bare
    ids). Order and scores are preserved; nothing is backfilled.
    """
    kept = []
    for cand in candidates:
        tokens = cand[0] if _is_pair(cand) else cand
        if encode(tokens, vocab.radices) in vocab.members:
            kept.append(cand)
    return kept


def _is_pair(cand) -> bool:
    return (
        isinstance(cand, tuple)
        and len(cand) == 2
        and isinstance(cand[0], (tuple, list, np.ndarray))
    )
