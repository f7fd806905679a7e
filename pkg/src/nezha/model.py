"""Backbone + draft head sharing one parameter store."""
from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .backbone import Backbone, BackboneConfig, init_backbone, log_softmax
from .head import DraftHead, HeadConfig, init_head
from .params import ParamStore, load_checkpoint, save_checkpoint


class RecModel:
    """Everything a decoder needs: prompts, the prefill stack, and the heads."""

    def __init__(self, backbone_cfg: BackboneConfig | None = None,
                 head_cfg: HeadConfig | None = None, store: ParamStore | None = None):
        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.head_cfg = head_cfg or HeadConfig()
        self.layout = self.backbone_cfg.layout
        self.radices = self.layout.radices
        if store is None:
            store = ParamStore(np.dtype(self.backbone_cfg.dtype))
            rng = np.random.default_rng(self.backbone_cfg.seed)
            init_backbone(store, self.backbone_cfg, rng)
            init_head(store, self.head_cfg, self.layout, self.backbone_cfg.d_hid, rng,
                      self.backbone_cfg.init_std)
        self.store = store
        self.backbone = Backbone(self.backbone_cfg, store)
        self.head = DraftHead(self.head_cfg, self.layout, store)

    @property
    def L(self) -> int:
        return self.radices.L

    def config_dict(self) -> dict:
        return {"backbone": asdict(self.backbone_cfg), "head": asdict(self.head_cfg)}

    def prompt(self, history, query=(), placeholders=True, prefix=()) -> np.ndarray:
        return self.layout.prompt(history, query, placeholders=placeholders, prefix=prefix)

    def save(self, path) -> None:
        save_checkpoint(self.store, path)

    def load(self, path) -> "RecModel":
        load_checkpoint(path, into=self.store)
        return self

    def clone(self) -> "RecModel":
        return RecModel(self.backbone_cfg, self.head_cfg, self.store.clone())

    # ------------------------------------------------------------------
    # losses

    def loss_and_grad(self, prompts: np.ndarray, lm_inputs: np.ndarray | None,
                      targets: np.ndarray, head_weight: float = 1.0,
                      lm_weight: float = 1.0, train_backbone: bool = True):
        """Mean per-example NLL of the draft head and of the lm_head.

        ``prompts`` are placeholder prompts ``(B, n)``; ``lm_inputs`` are the
        same contexts followed by the target codes (standard format), also
        ``(B, n)``. Gradients of ``head_weight * head + lm_weight * lm`` are
        accumulated into the store.
        """
        B, n = prompts.shape
        L = self.L
        use_lm = lm_weight > 0 and lm_inputs is not None
        use_head = head_weight > 0
        tokens = np.concatenate([prompts, lm_inputs]) if use_lm else prompts
        hidden = self.backbone.forward(tokens, keep_cache=True)
        dhidden = np.zeros_like(hidden)

        head_nll = self.head.forward_train(hidden[:B, n - L - 1:], targets)
        head_loss = float(head_nll.mean())
        if use_head:
            dhidden[:B, n - L - 1:] = self.head.backward_train(head_weight / B)

        lm_loss = 0.0
        if use_lm:
            P = self.store
            rows = np.arange(B)
            for l in range(1, L + 1):
                pos = n - L - 2 + l
                band = self.layout.band(l)
                h = hidden[B:, pos]
                lp = log_softmax(h @ P["lm_head.w"][:, band] + P["lm_head.b"][band])
                y = targets[:, l - 1]
                lm_loss -= float(lp[rows, y].sum()) / B
                dz = np.exp(lp)
                dz[rows, y] -= 1.0
                dz *= lm_weight / B
                P.grad("lm_head.w")[:, band] += h.T @ dz
                P.grad("lm_head.b")[band] += dz.sum(0)
                dhidden[B:, pos] += dz @ P["lm_head.w"][:, band].T
        if train_backbone:
            self.backbone.backward(dhidden)
        return head_loss, lm_loss
