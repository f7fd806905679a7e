"""Autoregressive draft head over the placeholder hidden states.

Per code position ``l`` the head computes ``p_l = softmax(W_l x + b_l)`` with
``x = combine(h_l, s_l)``; the context state starts at ``s_1 = h_0`` and
advances with ``s_{l+1} = transition_l(s_l, e_l)`` where ``e_l`` embeds the
token chosen at ``l``. Variants switch parts of this off for ablations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import TokenLayout, log_softmax
from .params import ParamStore

VARIANTS = (
    "nezha",
    "nezha_no_state",
    "nezha_no_placeholder",
    "nezha_add_transition",
    "mtp",
)

ALIASES = {
    "nezha-1": "nezha_no_state",
    "nezha-2": "nezha_no_placeholder",
    "nezha-3": "nezha_add_transition",
    "nezha-4": "nezha",
}

_GATES = ("z", "r", "n")


def canonical_variant(name: str) -> str:
    name = ALIASES.get(name, name).replace("-", "_")
    if name not in VARIANTS:
        raise ValueError(f"unknown head variant {name!r}; choose from {VARIANTS}")
    return name


@dataclass
class HeadConfig:
    variant: str = "nezha"
    combine: str = "sum"  # or "concat"
    share_transition: bool = False
    tie_embeddings: bool = False

    def __post_init__(self):
        self.variant = canonical_variant(self.variant)
        if self.combine not in ("sum", "concat"):
            raise ValueError(f"combine must be 'sum' or 'concat', got {self.combine!r}")

    @property
    def uses_state(self) -> bool:
        return self.variant in ("nezha", "nezha_no_placeholder", "nezha_add_transition")

    @property
    def gated(self) -> bool:
        return self.variant in ("nezha", "nezha_no_placeholder")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def init_head(store: ParamStore, cfg: HeadConfig, layout: TokenLayout, d: int,
              rng: np.random.Generator, std: float = 0.02) -> None:
    radices = layout.radices
    two_inputs = cfg.combine == "concat" and cfg.variant in ("nezha", "nezha_add_transition")
    d_in = 2 * d if two_inputs else d
    for l, T in enumerate(radices, start=1):
        store.add(f"head.{l}.w", rng.normal(0.0, std, (d_in, T)))
        store.add(f"head.{l}.b", np.zeros(T))
    if not cfg.uses_state:
        return
    for l in range(1, radices.L):
        if not cfg.tie_embeddings:
            store.add(f"code_emb.{l}", rng.normal(0.0, std, (radices[l - 1], d)))
    if cfg.gated:
        keys = ["shared"] if cfg.share_transition else [str(l) for l in range(1, radices.L)]
        for key in keys:
            for g in _GATES:
                store.add(f"trans.{key}.w{g}", rng.normal(0.0, std, (d, d)))
                store.add(f"trans.{key}.u{g}", rng.normal(0.0, std, (d, d)))
                store.add(f"trans.{key}.b{g}", np.zeros(d))


class DraftHead:
    def __init__(self, cfg: HeadConfig, layout: TokenLayout, store: ParamStore):
        self.cfg = cfg
        self.layout = layout
        self.store = store
        self.L = layout.radices.L
        self._cache = None
        # when a list, every transition appends the token ids it was fed
        self.transition_log: list | None = None

    def _check(self, l: int, upper: int) -> None:
        if not 1 <= l <= upper:
            raise ValueError(f"position {l} outside [1, {upper}]")

    def _trans_key(self, l: int) -> str:
        return "shared" if self.cfg.share_transition else str(l)

    def _combine(self, l: int, h_l, s_l, h_0):
        v = self.cfg.variant
        if v == "mtp":
            return h_0
        if v == "nezha_no_state":
            return h_l
        if v == "nezha_no_placeholder":
            return s_l
        if self.cfg.combine == "concat":
            h_l, s_l = np.broadcast_arrays(h_l, s_l)
            return np.concatenate([h_l, s_l], axis=-1)
        return h_l + s_l

    def logprobs(self, l: int, h_l, s_l, h_0=None) -> np.ndarray:
        """Log-probabilities over the ``T_l`` codes at position ``l``.

        ``s_l`` may be a batch ``(K, d)``; ``h_l`` broadcasts against it.
        ``h_0`` is only read by the ``mtp`` variant.
        """
        self._check(l, self.L)
        if self.cfg.variant == "mtp" and h_0 is None:
            raise ValueError("the mtp variant needs h_0")
        x = self._combine(l, h_l, s_l, h_0)
        lp = log_softmax(x @ self.store[f"head.{l}.w"] + self.store[f"head.{l}.b"])
        if lp.ndim < np.ndim(s_l):  # stateless variants: one distribution shared by all beams
            lp = np.broadcast_to(lp, np.shape(s_l)[:-1] + lp.shape[-1:])
        return lp

    def probs(self, l: int, h_l, s_l, h_0=None) -> np.ndarray:
        return np.exp(self.logprobs(l, h_l, s_l, h_0))

    def embed(self, l: int, tokens) -> np.ndarray:
        tokens = np.asarray(tokens, dtype=np.int64)
        if self.cfg.tie_embeddings:
            return self.store["tok_emb"][self.layout.band_offset(l) + tokens]
        return self.store[f"code_emb.{l}"][tokens]

    def transition(self, l: int, s_l, e_l) -> np.ndarray:
        self._check(l, self.L - 1)
        if not self.cfg.uses_state:
            return s_l
        if self.cfg.variant == "nezha_add_transition":
            return s_l + e_l
        return self._gru(l, s_l, e_l)[0]

    def advance(self, l: int, s_l, tokens) -> np.ndarray:
        """Embed the chosen ``tokens`` at position ``l`` and step the state."""
        if self.transition_log is not None:
            self.transition_log.append((l, np.array(tokens, copy=True)))
        if not self.cfg.uses_state:
            self._check(l, self.L - 1)
            return s_l
        return self.transition(l, s_l, self.embed(l, tokens))

    def _gru(self, l, s, e):
        P, k = self.store, f"trans.{self._trans_key(l)}."
        z = _sigmoid(e @ P[k + "wz"] + s @ P[k + "uz"] + P[k + "bz"])
        r = _sigmoid(e @ P[k + "wr"] + s @ P[k + "ur"] + P[k + "br"])
        n = np.tanh(e @ P[k + "wn"] + (r * s) @ P[k + "un"] + P[k + "bn"])
        return z * n + (1.0 - z) * s, (z, r, n)

    # ------------------------------------------------------------------
    # teacher-forced training pass

    def forward_train(self, hidden: np.ndarray, targets: np.ndarray) -> np.ndarray:
        """Per-example negative log-likelihood under teacher forcing.

        ``hidden`` is ``(B, L + 1, d)`` (``h_0 .. h_L``), ``targets`` is
        ``(B, L)``. The state is always advanced with the ground-truth token.
        """
        targets = np.asarray(targets, dtype=np.int64)
        B = hidden.shape[0]
        h0 = hidden[:, 0]
        s = h0
        rows = np.arange(B)
        nll = np.zeros(B, dtype=hidden.dtype)
        steps = []
        for l in range(1, self.L + 1):
            x = self._combine(l, hidden[:, l], s, h0)
            lp = log_softmax(x @ self.store[f"head.{l}.w"] + self.store[f"head.{l}.b"])
            y = targets[:, l - 1]
            nll -= lp[rows, y]
            step = {"x": x, "lp": lp, "y": y, "s": s}
            if l < self.L and self.cfg.uses_state:
                if self.transition_log is not None:
                    self.transition_log.append((l, y.copy()))
                e = self.embed(l, y)
                step["e"] = e
                if self.cfg.gated:
                    s, step["gates"] = self._gru(l, s, e)
                else:
                    s = s + e
            steps.append(step)
        self._cache = (hidden.shape, steps)
        return nll

    def backward_train(self, scale: float) -> np.ndarray:
        """Backprop ``scale * sum(nll)``; returns the gradient w.r.t. ``hidden``."""
        if self._cache is None:
            raise RuntimeError("backward_train() needs a preceding forward_train()")
        shape, steps = self._cache
        P = self.store
        B, _, d = shape
        dhidden = np.zeros(shape, dtype=P.dtype)
        rows = np.arange(B)
        ds = np.zeros((B, d), dtype=P.dtype)
        v = self.cfg.variant
        for l in range(self.L, 0, -1):
            st = steps[l - 1]
            if l < self.L and self.cfg.uses_state:
                ds = self._transition_backward(l, st, ds)
            dz = np.exp(st["lp"])
            dz[rows, st["y"]] -= 1.0
            dz *= scale
            P.grad(f"head.{l}.w")[...] += st["x"].T @ dz
            P.grad(f"head.{l}.b")[...] += dz.sum(0)
            dx = dz @ P[f"head.{l}.w"].T
            if v == "mtp":
                dhidden[:, 0] += dx
            elif v == "nezha_no_state":
                dhidden[:, l] += dx
            elif v == "nezha_no_placeholder":
                ds = ds + dx
            elif self.cfg.combine == "concat":
                dhidden[:, l] += dx[:, :d]
                ds = ds + dx[:, d:]
            else:
                dhidden[:, l] += dx
                ds = ds + dx
        if self.cfg.uses_state:
            dhidden[:, 0] += ds
        return dhidden

    def _transition_backward(self, l, st, ds_next):
        """Gradient through ``s_{l+1} = transition_l(s_l, e_l)``; returns ds_l."""
        P = self.store
        s, e, y = st["s"], st["e"], st["y"]
        if not self.cfg.gated:
            ds, de = ds_next, ds_next
        else:
            k = f"trans.{self._trans_key(l)}."
            z, r, n = st["gates"]
            dz = ds_next * (n - s)
            dn = ds_next * z
            ds = ds_next * (1.0 - z)
            dan = dn * (1.0 - n * n)
            rs = r * s
            P.grad(k + "wn")[...] += e.T @ dan
            P.grad(k + "un")[...] += rs.T @ dan
            P.grad(k + "bn")[...] += dan.sum(0)
            drs = dan @ P[k + "un"].T
            dr = drs * s
            ds += drs * r
            de = dan @ P[k + "wn"].T
            for g, dg, gate in (("z", dz, z), ("r", dr, r)):
                da = dg * gate * (1.0 - gate)
                P.grad(k + "w" + g)[...] += e.T @ da
                P.grad(k + "u" + g)[...] += s.T @ da
                P.grad(k + "b" + g)[...] += da.sum(0)
                ds += da @ P[k + "u" + g].T
                de += da @ P[k + "w" + g].T
        if self.cfg.tie_embeddings:
            np.add.at(P.grad("tok_emb"), self.layout.band_offset(l) + y, de)
        else:
            np.add.at(P.grad(f"code_emb.{l}"), y, de)
        return ds
