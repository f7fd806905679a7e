"""Small causal transformer that prefills the placeholder prompt.

Numpy only, with a hand-written backward pass. Architecture: learned token and
absolute position embeddings, pre-norm blocks (causal multi-head attention and
a GELU feed-forward of width ``2 * d_hid``), a final layer norm, and an
untied ``lm_head`` used by the beam-search baselines.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .codec import Radices, as_radices
from .params import ParamStore

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class BackboneStateError(RuntimeError):
    """backward() called without a cached forward pass."""


class SequenceTooLongError(ValueError):
    pass


@dataclass(frozen=True)
class TokenLayout:
    """Token-id bands of the unified vocabulary.

    ``0`` is padding, ``1`` is BOS, ``2 .. L+1`` are the placeholders
    ``SP_1 .. SP_L``, then the query band, then one band per code position.
    """

    radices: Radices
    query_vocab: int = 64

    PAD = 0
    BOS = 1

    def placeholder(self, l: int) -> int:
        if not 1 <= l <= self.radices.L:
            raise ValueError(f"placeholder position {l} outside [1, {self.radices.L}]")
        return 1 + l

    @property
    def query_offset(self) -> int:
        return 2 + self.radices.L

    def band_offset(self, l: int) -> int:
        """First token id of code position ``l`` (1-based)."""
        return self.query_offset + self.query_vocab + sum(self.radices.per_position[: l - 1])

    def band(self, l: int) -> slice:
        start = self.band_offset(l)
        return slice(start, start + self.radices[l - 1])

    @property
    def vocab_size(self) -> int:
        return self.query_offset + self.query_vocab + sum(self.radices.per_position)

    def code_tokens(self, ids) -> list[int]:
        out = []
        for sid in ids:
            out.extend(self.band_offset(l + 1) + int(t) for l, t in enumerate(sid))
        return out

    def query_tokens(self, query) -> list[int]:
        out = []
        for q in query or ():
            q = int(q)
            if not 0 <= q < self.query_vocab:
                raise ValueError(f"query token {q} outside [0, {self.query_vocab})")
            out.append(self.query_offset + q)
        return out

    def prompt(self, history, query=(), placeholders=True, prefix=()) -> np.ndarray:
        """Build ``[BOS, q.., history codes.., SP_1..SP_L]``.

        With ``placeholders=False`` the partial ID ``prefix`` is appended
        instead, giving the standard next-token format used by beam search.
        """
        toks = [self.BOS] + self.query_tokens(query) + self.code_tokens(history)
        if placeholders:
            toks += [self.placeholder(l) for l in range(1, self.radices.L + 1)]
        else:
            toks += [self.band_offset(l + 1) + int(t) for l, t in enumerate(prefix)]
        return np.asarray(toks, dtype=np.int64)


@dataclass
class BackboneConfig:
    d_hid: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 64
    radices: tuple = (64, 64, 64)
    query_vocab: int = 64
    seed: int = 0
    init_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        if min(self.d_hid, self.n_layers, self.n_heads, self.max_seq_len, self.query_vocab) < 1:
            raise ValueError("backbone sizes must all be >= 1")
        if self.d_hid % self.n_heads:
            raise ValueError(f"d_hid={self.d_hid} not divisible by n_heads={self.n_heads}")
        self.radices = tuple(as_radices(self.radices))

    @property
    def layout(self) -> TokenLayout:
        return TokenLayout(as_radices(self.radices), self.query_vocab)


@dataclass
class BackboneOutput:
    """Hidden states read from one placeholder-prompt prefill."""

    h: np.ndarray  # (L + 1, d_hid): h_0 then h_1 .. h_L

    @property
    def h0(self) -> np.ndarray:
        return self.h[0]

    def __len__(self):
        return len(self.h)


def init_backbone(store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator) -> None:
    d, V, std = cfg.d_hid, cfg.layout.vocab_size, cfg.init_std
    store.add("tok_emb", rng.normal(0.0, std, (V, d)))
    store.add("pos_emb", rng.normal(0.0, std, (cfg.max_seq_len, d)))
    for i in range(cfg.n_layers):
        p = f"blocks.{i}."
        store.add(p + "ln1.g", np.ones(d))
        store.add(p + "ln1.b", np.zeros(d))
        for name in ("wq", "wk", "wv", "wo"):
            store.add(p + "attn." + name, rng.normal(0.0, std, (d, d)))
            store.add(p + "attn.b" + name[1], np.zeros(d))
        store.add(p + "ln2.g", np.ones(d))
        store.add(p + "ln2.b", np.zeros(d))
        store.add(p + "mlp.w1", rng.normal(0.0, std, (d, 2 * d)))
        store.add(p + "mlp.b1", np.zeros(2 * d))
        store.add(p + "mlp.w2", rng.normal(0.0, std, (2 * d, d)))
        store.add(p + "mlp.b2", np.zeros(d))
    store.add("ln_f.g", np.ones(d))
    store.add("ln_f.b", np.zeros(d))
    store.add("lm_head.w", rng.normal(0.0, std, (d, V)))
    store.add("lm_head.b", np.zeros(V))


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, cache, g):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(-1, keepdims=True)
    )
    return dx, dg, db


def _gelu(u):
    inner = _GELU_C * (u + 0.044715 * u**3)
    t = np.tanh(inner)
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * d_inner)


class Backbone:
    """Forward/backward over a :class:`ParamStore` holding backbone tensors."""

    def __init__(self, cfg: BackboneConfig, store: ParamStore):
        self.cfg = cfg
        self.layout = cfg.layout
        self.store = store
        self._cache = None
        self._masks: dict[int, np.ndarray] = {}

    def _mask(self, n: int) -> np.ndarray:
        if n not in self._masks:
            m = np.triu(np.full((n, n), -np.inf), k=1)
            self._masks[n] = m.astype(self.store.dtype)
        return self._masks[n]

    def forward(self, tokens, keep_cache: bool = True) -> np.ndarray:
        """Run the stack on ``(B, n)`` token ids and return ``(B, n, d_hid)``."""
        P, cfg = self.store, self.cfg
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        B, n = tokens.shape
        if n > cfg.max_seq_len:
            raise SequenceTooLongError(f"sequence length {n} exceeds max_seq_len={cfg.max_seq_len}")
        if tokens.min() < 0 or tokens.max() >= self.layout.vocab_size:
            raise ValueError("token id outside the vocabulary")
        d, H = cfg.d_hid, cfg.n_heads
        dh = d // H
        scale = 1.0 / np.sqrt(dh)
        mask = self._mask(n)

        x = P["tok_emb"][tokens] + P["pos_emb"][:n]
        layers = []
        for i in range(cfg.n_layers):
            p = f"blocks.{i}."
            a, ln1 = _layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            q = (a @ P[p + "attn.wq"] + P[p + "attn.bq"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            k = (a @ P[p + "attn.wk"] + P[p + "attn.bk"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            v = (a @ P[p + "attn.wv"] + P[p + "attn.bv"]).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) * scale + mask
            s = np.exp(s - s.max(-1, keepdims=True))
            att = s / s.sum(-1, keepdims=True)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, n, d)
            x = x + o @ P[p + "attn.wo"] + P[p + "attn.bo"]
            b, ln2 = _layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            u = b @ P[p + "mlp.w1"] + P[p + "mlp.b1"]
            gu, t = _gelu(u)
            x = x + gu @ P[p + "mlp.w2"] + P[p + "mlp.b2"]
            if keep_cache:
                layers.append((a, ln1, q, k, v, att, o, b, ln2, u, gu, t))
        out, lnf = _layer_norm(x, P["ln_f.g"], P["ln_f.b"])
        if keep_cache:
            self._cache = (tokens, layers, lnf)
        return out

    def backward(self, dout: np.ndarray) -> None:
        """Accumulate parameter gradients for upstream gradient ``dout``."""
        if self._cache is None:
            raise BackboneStateError("backward() needs a preceding forward(keep_cache=True)")
        P, cfg = self.store, self.cfg
        tokens, layers, lnf = self._cache
        B, n = tokens.shape
        d, H = cfg.d_hid, cfg.n_heads
        dh = d // H
        scale = 1.0 / np.sqrt(dh)

        dx, dg, db = _layer_norm_backward(dout, lnf, P["ln_f.g"])
        P.grad("ln_f.g")[...] += dg
        P.grad("ln_f.b")[...] += db
        for i in reversed(range(cfg.n_layers)):
            p = f"blocks.{i}."
            a, ln1, q, k, v, att, o, b, ln2, u, gu, t = layers[i]
            # feed-forward branch
            flat = dx.reshape(-1, d)
            P.grad(p + "mlp.w2")[...] += gu.reshape(-1, 2 * d).T @ flat
            P.grad(p + "mlp.b2")[...] += flat.sum(0)
            du = _gelu_backward(dx @ P[p + "mlp.w2"].T, u, t)
            du_flat = du.reshape(-1, 2 * d)
            P.grad(p + "mlp.w1")[...] += b.reshape(-1, d).T @ du_flat
            P.grad(p + "mlp.b1")[...] += du_flat.sum(0)
            db_ln, dg2, db2 = _layer_norm_backward(du @ P[p + "mlp.w1"].T, ln2, P[p + "ln2.g"])
            P.grad(p + "ln2.g")[...] += dg2
            P.grad(p + "ln2.b")[...] += db2
            dx = dx + db_ln
            # attention branch
            flat = dx.reshape(-1, d)
            P.grad(p + "attn.wo")[...] += o.reshape(-1, d).T @ flat
            P.grad(p + "attn.bo")[...] += flat.sum(0)
            do = (dx @ P[p + "attn.wo"].T).reshape(B, n, H, dh).transpose(0, 2, 1, 3)
            datt = do @ v.transpose(0, 1, 3, 2)
            dv = att.transpose(0, 1, 3, 2) @ do
            ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
            dq = ds @ k
            dk = ds.transpose(0, 1, 3, 2) @ q
            a_flat = a.reshape(-1, d)
            da = np.zeros_like(a)
            for name, g in (("q", dq), ("k", dk), ("v", dv)):
                g = g.transpose(0, 2, 1, 3).reshape(B, n, d)
                g_flat = g.reshape(-1, d)
                P.grad(p + "attn.w" + name)[...] += a_flat.T @ g_flat
                P.grad(p + "attn.b" + name)[...] += g_flat.sum(0)
                da += g @ P[p + "attn.w" + name].T
            da_ln, dg1, db1 = _layer_norm_backward(da, ln1, P[p + "ln1.g"])
            P.grad(p + "ln1.g")[...] += dg1
            P.grad(p + "ln1.b")[...] += db1
            dx = dx + da_ln
        P.grad("pos_emb")[:n] += dx.sum(0)
        np.add.at(P.grad("tok_emb"), tokens.reshape(-1), dx.reshape(-1, d))

    def prefill(self, prompt: Sequence[int]) -> BackboneOutput:
        """One forward pass over a placeholder prompt; returns ``h_0 .. h_L``."""
        L = self.layout.radices.L
        out = self.forward(np.asarray(prompt)[None], keep_cache=False)[0]
        return BackboneOutput(out[-L - 1:].copy())

    def prefill_batch(self, prompts: np.ndarray) -> np.ndarray:
        """Batched :meth:`prefill` over equal-length prompts: ``(B, L + 1, d)``."""
        L = self.layout.radices.L
        return self.forward(prompts, keep_cache=False)[:, -L - 1:]

    def lm_logprobs(self, hidden: np.ndarray, l: int) -> np.ndarray:
        """Log-softmax of the lm_head restricted to the band of code position ``l``."""
        band = self.layout.band(l)
        logits = hidden @ self.store["lm_head.w"][:, band] + self.store["lm_head.b"][band]
        return log_softmax(logits)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))
