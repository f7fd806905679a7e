"""Residual k-means quantization of item embeddings into semantic IDs."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .codec import Radices, VocabularySet, as_radices, encode_array
from .params import ParamStore, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class Codebooks:
    levels: list  # level l: (T_l, d_emb)

    def __post_init__(self):
        for l, cb in enumerate(self.levels, 1):
            if not np.all(np.isfinite(cb)):
                raise ValueError(f"codebook level {l} has non-finite centroids")

    @property
    def radices(self) -> Radices:
        return Radices(len(cb) for cb in self.levels)

    @property
    def d_emb(self) -> int:
        return self.levels[0].shape[1]

    def save(self, path) -> None:
        store = ParamStore()
        for l, cb in enumerate(self.levels, 1):
            store.add(f"codebook.{l}", cb)
        save_checkpoint(store, path)

    @classmethod
    def load(cls, path) -> "Codebooks":
        store = load_checkpoint(path)
        names = sorted((k for k in store if k.startswith("codebook.")), key=lambda k: int(k.split(".")[1]))
        return cls([store[k].copy() for k in names])


def _sq_dist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _farthest_point_init(X, k, rng):
    n = len(X)
    chosen = [int(rng.integers(n))]
    mind = ((X - X[chosen[0]]) ** 2).sum(1)
    while len(chosen) < k:
        nxt = int(np.argmax(mind))  # first maximum: lowest index on ties
        chosen.append(nxt)
        mind = np.minimum(mind, ((X - X[nxt]) ** 2).sum(1))
    return X[chosen].copy()


def kmeans(X, k, iters, rng):
    """Lloyd's algorithm with farthest-point seeding.

    Empty clusters take the point farthest from its current centroid.
    Returns ``(centroids, labels, degenerate)`` where ``degenerate`` flags
    duplicate centroids (fewer distinct points than ``k``).
    """
    C = _farthest_point_init(X, k, rng)
    labels = np.full(len(X), -1)
    for _ in range(iters):
        dist = _sq_dist(X, C)
        new = dist.argmin(1)
        if np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = dist[np.arange(len(X)), labels]
            far = int(np.argmax(own))
            labels[far] = j
            dist[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        nonempty = counts > 0
        C[nonempty] = sums[nonempty] / counts[nonempty, None]
    labels = _sq_dist(X, C).argmin(1)
    degenerate = len(np.unique(C, axis=0)) < k
    return C, labels, degenerate


class ResidualQuantizer(TransformerMixin, BaseEstimator):
    """Maps embeddings to L-token codes; level ``l+1`` quantizes the residual
    left after subtracting the level-``l`` centroid.

    Parameters
    ----------
    n_codes : sequence of int
        Codebook size per level (the radices).
    max_iter : int
        Lloyd iterations per level.
    random_state : int
        Seed for the farthest-point initialisation.
    """

    def __init__(self, n_codes=(64, 64, 64), max_iter=20, random_state=0):
        self.n_codes = n_codes
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(getattr(X, "embeddings", X), dtype=np.float64)
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        radices = as_radices(self.n_codes)
        rng = np.random.default_rng(self.random_state)
        residual = X.copy()
        levels = []
        self.duplicate_centroids_ = False
        for T in radices:
            C, labels, degenerate = kmeans(residual, T, self.max_iter, rng)
            if degenerate:
                self.duplicate_centroids_ = True
            levels.append(C)
            residual = residual - C[labels]
        if self.duplicate_centroids_:
            log.warning("fewer distinct embeddings than codebook size; duplicate centroids present")
        self.codebooks_ = Codebooks(levels)
        self.radices_ = radices
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "codebooks_")
        X = check_array(getattr(X, "embeddings", X), dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return assign(X, self.codebooks_)

    def inverse_transform(self, codes):
        check_is_fitted(self, "codebooks_")
        return reconstruct(np.asarray(codes), self.codebooks_)

    def build_vocabulary(self, X):
        """Vocabulary of encoded IDs plus the number of items whose ID
        collides with an earlier item."""
        return build_vocabulary(self.transform(X), self.radices_)


def assign(X, cb: Codebooks) -> np.ndarray:
    """Greedy residual assignment; nearest centroid per level, lowest index on ties."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != cb.d_emb:
        raise ValueError(f"embedding dimension {X.shape[1]} != codebook dimension {cb.d_emb}")
    if not np.all(np.isfinite(X)):
        raise ValueError("embedding contains non-finite values")
    residual = X.copy()
    codes = np.empty((len(X), len(cb.levels)), dtype=np.int64)
    for l, C in enumerate(cb.levels):
        codes[:, l] = _sq_dist(residual, C).argmin(1)
        residual -= C[codes[:, l]]
    return codes[0] if single else codes


def reconstruct(codes, cb: Codebooks, depth: int | None = None) -> np.ndarray:
    codes = np.atleast_2d(codes)
    depth = len(cb.levels) if depth is None else depth
    out = np.zeros((len(codes), cb.d_emb))
    for l in range(depth):
        out += cb.levels[l][codes[:, l]]
    return out


def build_vocabulary(codes, radices) -> tuple[VocabularySet, int]:
    enc = encode_array(np.asarray(codes), radices)
    vocab = VocabularySet.from_indices(enc.tolist(), radices)
    return vocab, len(enc) - len(vocab)
