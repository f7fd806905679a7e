"""Synthetic interaction data, log/catalog file formats, leave-one-out split.

Synthetic sequences follow a cluster-level Markov process: every first-code
value ``a`` owns a small fixed set of successor items, and a user's next item
is drawn from the successors of their last item's cluster according to the
user's own mixture over those branches (or, with probability ``noise``,
from the catalogue's popularity law). First items and noise jumps follow a
Zipf popularity with exponent ``popularity`` over a seeded item ranking;
``popularity=0`` makes them uniform. The successor items of a cluster have
pairwise-distinct first and second codes, so predicting one code position
at a time cannot recover which combinations belong together.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .codec import Radices, as_radices, decode
from .training import TrainingExample

log = logging.getLogger(__name__)

HISTORY_MAX = 8
MAX_QUERY_TOKENS = 4


class DataSpecError(ValueError):
    pass


@dataclass
class ItemCatalog:
    item_ids: list
    embeddings: np.ndarray
    semantic_ids: np.ndarray | None = None
    latent_ids: np.ndarray | None = None  # generator ground truth, when known

    def __post_init__(self):
        self.item_ids = [str(i) for i in self.item_ids]
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) != len(self.item_ids):
            raise ValueError("embeddings must be (n_items, d_emb)")
        self._index = {k: i for i, k in enumerate(self.item_ids)}
        if len(self._index) != len(self.item_ids):
            raise ValueError("duplicate item ids in catalog")

    def __len__(self):
        return len(self.item_ids)

    @property
    def d_emb(self) -> int:
        return self.embeddings.shape[1]

    def index(self, item_id) -> int:
        return self._index[str(item_id)]

    def id_map(self, which: str = "semantic") -> dict:
        ids = self.semantic_ids if which == "semantic" else self.latent_ids
        if ids is None:
            raise ValueError(f"catalog has no {which} ids")
        return {k: tuple(int(t) for t in row) for k, row in zip(self.item_ids, ids)}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in zip(self.item_ids, self.embeddings):
                fh.write(k + "\t" + " ".join(repr(float(x)) for x in v) + "\n")

    @classmethod
    def load(cls, path) -> "ItemCatalog":
        ids, rows = [], []
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip() or raw.startswith("#"):
                continue
            item, _, rest = raw.partition("\t")
            vec = [float(x) for x in rest.split()]
            if rows and len(vec) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: dimension {len(vec)} != {len(rows[0])}")
            ids.append(item.strip())
            rows.append(vec)
        if not rows:
            raise ValueError(f"{path}: empty catalog")
        return cls(ids, np.asarray(rows))


def save_semantic_ids(path, id_map: Mapping[str, Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, sid in id_map.items():
            fh.write(f"{k}\t{' '.join(str(int(t)) for t in sid)}\n")


def load_semantic_ids(path) -> dict:
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        if raw.strip() and not raw.startswith("#"):
            item, _, rest = raw.partition("\t")
            out[item.strip()] = tuple(int(t) for t in rest.split())
    return out


@dataclass
class InteractionLog:
    """user -> chronological list of ``(item_id, query_tokens)``."""

    users: dict = field(default_factory=dict)

    def add(self, user, item, query=()) -> None:
        self.users.setdefault(str(user), []).append((str(item), tuple(int(q) for q in query)))

    def __len__(self):
        return len(self.users)

    def n_interactions(self) -> int:
        return sum(len(v) for v in self.users.values())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for user in sorted(self.users, key=_user_key):
                for item, query in self.users[user]:
                    line = f"{user}\t{item}"
                    if query:
                        line += "\t" + " ".join(map(str, query))
                    fh.write(line + "\n")

    @classmethod
    def load(cls, path) -> "InteractionLog":
        out = cls()
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not raw.strip() or raw.startswith("#"):
                continue
            parts = raw.split("\t")
            if len(parts) < 2:
                raise ValueError(f"{path}:{lineno}: expected 'user<TAB>item[<TAB>query]'")
            query = parts[2].split() if len(parts) > 2 else ()
            out.add(parts[0].strip(), parts[1].strip(), query)
        return out


def _user_key(u: str):
    return (0, int(u), u) if u.isdigit() else (1, 0, u)


@dataclass
class SyntheticSpec:
    n_users: int = 5000
    n_items: int = 2000
    radices: tuple = (64, 64, 64)
    d_emb: int = 32
    mode: str = "chained"  # or "independent"
    noise: float = 0.05
    seed: int = 0
    branching: int = 6
    mixture_concentration: float = 20.0
    popularity: float = 1.0
    min_len: int = 4
    max_len: int = 12
    query_len: int = 0
    query_vocab: int = 64
    emb_noise: float = 0.01
    beam_size: int = 10

    def validate(self) -> Radices:
        r = as_radices(self.radices)
        if self.mode not in ("chained", "independent"):
            raise DataSpecError(f"mode must be 'chained' or 'independent', got {self.mode!r}")
        if self.n_users < 1 or self.n_items < 1:
            raise DataSpecError("n_users and n_items must be >= 1")
        if self.n_items < self.beam_size:
            raise DataSpecError(f"n_items={self.n_items} is smaller than beam size {self.beam_size}")
        capacity = r.size if self.mode == "independent" or r.L == 1 else r.size // r[-1]
        if self.n_items > capacity:
            raise DataSpecError(
                f"n_items={self.n_items} exceeds the {capacity} ids available in {self.mode} mode"
            )
        if self.popularity < 0:
            raise DataSpecError("popularity exponent must be >= 0")
        if not 0.0 <= self.noise <= 1.0:
            raise DataSpecError("noise must lie in [0, 1]")
        if self.min_len < 3 or self.max_len < self.min_len:
            raise DataSpecError("need 3 <= min_len <= max_len")
        if not 0 <= self.query_len <= MAX_QUERY_TOKENS:
            raise DataSpecError(f"query_len must be in [0, {MAX_QUERY_TOKENS}]")
        return r


@dataclass
class SyntheticData:
    catalog: ItemCatalog
    log: InteractionLog
    radices: Radices
    successors: dict


def _sample_ids(spec: SyntheticSpec, r: Radices, rng: np.random.Generator) -> np.ndarray:
    n, L = spec.n_items, r.L
    if spec.mode == "independent" or L == 1:
        chosen: set[int] = set()
        order: list[int] = []
        while len(order) < n:
            for v in rng.integers(0, r.size, size=2 * (n - len(order))).tolist():
                if v not in chosen and len(order) < n:
                    chosen.add(v)
                    order.append(v)
        return np.asarray([decode(v, r) for v in order], dtype=np.int64)
    prefix_r = Radices(r.per_position[:-1])
    picks = rng.choice(prefix_r.size, size=n, replace=False)
    prefixes = np.asarray([decode(int(v), prefix_r) for v in picks], dtype=np.int64)
    perm = rng.permutation(r[-1])
    last = perm[prefixes.sum(axis=1) % r[-1]]
    return np.column_stack([prefixes, last])


def _successor_sets(ids: np.ndarray, T1: int, branching: int, rng) -> dict:
    n = len(ids)
    out = {}
    for a in range(T1):
        picked, seen1, seen2 = [], set(), set()
        for i in rng.permutation(n).tolist():
            t1 = int(ids[i, 0])
            t2 = int(ids[i, 1]) if ids.shape[1] > 1 else -1
            if t1 in seen1 or t2 in seen2:
                continue
            picked.append(i)
            seen1.add(t1)
            if t2 >= 0:
                seen2.add(t2)
            if len(picked) == branching:
                break
        if len(picked) < branching:  # tiny catalogues: allow repeats of codes
            rest = [i for i in rng.permutation(n).tolist() if i not in picked]
            picked += rest[: branching - len(picked)]
        out[a] = picked
    return out


def popularity_law(n: int, exponent: float, rng: np.random.Generator) -> np.ndarray:
    """Zipf probabilities ``rank**-exponent`` assigned to items in a random order."""
    p = np.arange(1, n + 1, dtype=np.float64) ** -exponent
    return (p / p.sum())[rng.permutation(n)]


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Seeded catalogue + interaction log; see the module docstring."""
    r = spec.validate()
    rng = np.random.default_rng(spec.seed)
    ids = _sample_ids(spec, r, rng)
    n, d = spec.n_items, spec.d_emb

    emb = np.zeros((n, d))
    scale = 1.0
    for l, T in enumerate(r):
        centers = rng.normal(size=(T, d)) / np.sqrt(d)
        emb += scale * centers[ids[:, l]]
        scale *= 0.5
    emb += spec.emb_noise * rng.normal(size=(n, d)) / np.sqrt(d)
    item_ids = [str(i) for i in range(n)]
    catalog = ItemCatalog(item_ids, emb, latent_ids=ids)

    branching = max(1, min(spec.branching, n))
    succ = _successor_sets(ids, r[0], branching, rng)
    pop = popularity_law(n, spec.popularity, rng)
    log_ = InteractionLog()
    for u in range(spec.n_users):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        weights = rng.dirichlet(np.full(branching, spec.mixture_concentration))
        item = int(rng.choice(n, p=pop))
        for _ in range(length):
            log_.add(u, item_ids[item], _query(spec, ids[item], rng))
            if rng.random() < spec.noise:
                item = int(rng.choice(n, p=pop))
            else:
                item = succ[int(ids[item, 0])][int(rng.choice(branching, p=weights))]
    return SyntheticData(catalog, log_, r, succ)


def _query(spec: SyntheticSpec, sid, rng) -> tuple:
    if spec.query_len == 0:
        return ()
    head = int(sid[0]) % spec.query_vocab
    rest = rng.integers(0, spec.query_vocab, size=spec.query_len - 1).tolist()
    return (head, *rest)


@dataclass
class Split:
    train: list
    valid: list
    test: list
    dropped_users: int = 0
    test_users: list = field(default_factory=list)


def split(log_: InteractionLog, id_map: Mapping[str, Sequence[int]],
          history_max: int = HISTORY_MAX, min_interactions: int = 3) -> Split:
    """Leave-one-out: last item to test, penultimate to validation, the rest
    become sliding next-item training examples (the first with empty history)."""
    out = Split([], [], [])
    for user in sorted(log_.users, key=_user_key):
        seq = log_.users[user]
        if len(seq) < min_interactions:
            out.dropped_users += 1
            continue
        sids = [tuple(id_map[item]) for item, _ in seq]

        def example(k):
            hist = sids[max(0, k - history_max):k]
            return TrainingExample(seq[k][1], tuple(hist), sids[k])

        n = len(seq)
        out.train.extend(example(k) for k in range(n - 2))
        out.valid.append(example(n - 2))
        out.test.append(example(n - 1))
        out.test_users.append(user)
    if out.dropped_users:
        log.info("split dropped %d users with < %d interactions", out.dropped_users, min_interactions)
    return out
