"""Beam search, speculative decoding and draft-head inference.

All three keep beams as parallel arrays (prefix codes, cumulative
log-probability, optional context state) and share the same expand/prune
step, so ties resolve identically everywhere: higher cumulative
log-probability first, then ascending encoded index.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneOutput
from .codec import VocabularySet, encode_array
from .model import RecModel

PAD_POLICIES = ("strict", "backfill")


@dataclass
class DecodeRequest:
    query: tuple = ()
    history: tuple = ()
    K: int = 10
    verify: bool = True
    pad_policy: str = "strict"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("beam size K must be >= 1")
        if self.pad_policy not in PAD_POLICIES:
            raise ValueError(f"pad policy must be one of {PAD_POLICIES}")
        self.query = tuple(int(q) for q in self.query or ())
        self.history = tuple(tuple(int(t) for t in h) for h in self.history)


@dataclass
class DecodeResult:
    items: list = field(default_factory=list)  # (semantic id, cum_logp), best first
    backbone_calls: int = 0
    draft_backbone_calls: int = 0
    draft_head_calls: int = 0
    verified_out: int = 0
    verified_kept: int = 0
    rejections: int = 0
    prefill_time: float = 0.0
    decode_time: float = 0.0
    verify_time: float = 0.0
    underfull: bool = False
    backfilled: int = 0
    unverified_valid: int | None = None  # valid ids in the top-K had nothing been filtered
    unverified_total: int = 0

    @property
    def ids(self) -> list:
        return [sid for sid, _ in self.items]

    @property
    def scores(self) -> list:
        return [s for _, s in self.items]

    @property
    def latency(self) -> float:
        return self.prefill_time + self.decode_time

    def to_record(self, radices) -> dict:
        ids = [list(s) for s in self.ids]
        return {
            "items": ids,
            "indices": [int(i) for i in encode_array(np.asarray(ids).reshape(-1, radices.L), radices)]
            if ids else [],
            "scores": self.scores,
            "backbone_calls": self.backbone_calls,
            "draft_backbone_calls": self.draft_backbone_calls,
            "draft_head_calls": self.draft_head_calls,
            "verified_out": self.verified_out,
            "verified_kept": self.verified_kept,
            "rejections": self.rejections,
            "underfull": self.underfull,
            "backfilled": self.backfilled,
            "prefill_ms": 1e3 * self.prefill_time,
            "decode_ms": 1e3 * self.decode_time,
            "verify_ms": 1e3 * self.verify_time,
        }


def _finish(prefixes, cum) -> list:
    return [(tuple(int(t) for t in p), float(c)) for p, c in zip(prefixes, cum)]


def _clamp_k(K: int, radices) -> int:
    if K > radices.size:
        warnings.warn(f"beam size {K} exceeds the {radices.size} possible ids; clamped")
        return radices.size
    return K


def expand(prefixes: np.ndarray, cum: np.ndarray, logp: np.ndarray, K: int):
    """Extend each beam with its top-``min(K, T)`` tokens.

    Returns candidate prefixes, cumulative scores and the parent beam of each.
    Within one beam equal scores keep ascending token order.
    """
    N, T = logp.shape
    k = min(K, T)
    top = np.argsort(-logp, axis=1, kind="stable")[:, :k]
    parent = np.repeat(np.arange(N), k)
    tokens = top.reshape(-1)
    new_cum = cum[parent] + logp[parent, tokens]
    new_prefixes = np.concatenate([prefixes[parent], tokens[:, None]], axis=1)
    return new_prefixes, new_cum, parent


def prune(prefixes: np.ndarray, cum: np.ndarray, K: int, radices) -> np.ndarray:
    """Indices of the best ``K`` candidates: by score, then encoded index."""
    enc = encode_array(prefixes, radices)
    order = np.lexsort((enc, -cum))
    return order[:K]


def lm_step_logprobs(model: RecModel, context: np.ndarray, prefixes: np.ndarray, l: int) -> np.ndarray:
    """Next-token log-probs at code position ``l`` for every beam prefix.

    Each beam costs one full backbone pass over context + prefix.
    """
    N = len(prefixes)
    layout = model.layout
    tokens = np.empty((N, len(context) + prefixes.shape[1]), dtype=np.int64)
    tokens[:, : len(context)] = context
    for j in range(prefixes.shape[1]):
        tokens[:, len(context) + j] = layout.band_offset(j + 1) + prefixes[:, j]
    hidden = model.backbone.forward(tokens, keep_cache=False)[:, -1]
    return model.backbone.lm_logprobs(hidden, l)


def _lm_expand(model, context, prefixes, cum, l, K):
    logp = lm_step_logprobs(model, context, prefixes, l)
    cand, cand_cum, _ = expand(prefixes, cum, logp, K)
    keep = prune(cand, cand_cum, K, model.radices)
    return cand[keep], cand_cum[keep]


def beam_search(req: DecodeRequest, model: RecModel) -> DecodeResult:
    """Standard beam search with the backbone's lm_head: one backbone pass
    per live beam per step, ``1 + K (L - 1)`` in total."""
    r = model.radices
    K = _clamp_k(req.K, r)
    res = DecodeResult()
    context = model.prompt(req.history, req.query, placeholders=False)
    prefixes = np.zeros((1, 0), dtype=np.int64)
    cum = np.zeros(1)
    for l in range(1, r.L + 1):
        t0 = time.perf_counter()
        res.backbone_calls += len(prefixes)
        prefixes, cum = _lm_expand(model, context, prefixes, cum, l, K)
        dt = time.perf_counter() - t0
        if l == 1:
            res.prefill_time += dt
        else:
            res.decode_time += dt
    res.items = _finish(prefixes, cum)
    return res


def speculative_decode(req: DecodeRequest, draft: RecModel, target: RecModel) -> DecodeResult:
    """Draft-then-verify beam search; output equals :func:`beam_search` on ``target``.

    The draft model runs beam search from the last accepted step to the end.
    The target then re-expands the accepted beams step by step (each step is
    one batched pass over the beams of that step); a drafted step is accepted
    only when its ordered beam list equals the target's own. On the first
    mismatch the target's step replaces the draft and drafting restarts.
    """
    r = target.radices
    if draft.radices != r:
        raise ValueError("draft and target models disagree on radices")
    K = _clamp_k(req.K, r)
    res = DecodeResult()
    t_ctx = target.prompt(req.history, req.query, placeholders=False)
    d_ctx = draft.prompt(req.history, req.query, placeholders=False)
    accepted = [(np.zeros((1, 0), dtype=np.int64), np.zeros(1))]
    l = 1
    t_start = time.perf_counter()
    while l <= r.L:
        prefixes, cum = accepted[l - 1]
        drafted = []
        for m in range(l, r.L + 1):
            res.draft_backbone_calls += len(prefixes)
            prefixes, cum = _lm_expand(draft, d_ctx, prefixes, cum, m, K)
            drafted.append(prefixes)
        next_l = r.L + 1
        for m in range(l, r.L + 1):
            t0 = time.perf_counter()
            prev, prev_cum = accepted[m - 1]
            res.backbone_calls += len(prev)
            got, got_cum = _lm_expand(target, t_ctx, prev, prev_cum, m, K)
            if m == 1:
                res.prefill_time += time.perf_counter() - t0
            accepted.append((got, got_cum))
            if not np.array_equal(got, drafted[m - l]):
                res.rejections += 1
                next_l = m + 1
                break
        l = next_l
    res.decode_time = time.perf_counter() - t_start - res.prefill_time
    prefixes, cum = accepted[r.L]
    res.items = _finish(prefixes, cum)
    return res


def nezha_infer(req: DecodeRequest, model: RecModel, vocab: VocabularySet | None = None,
                prefilled: BackboneOutput | None = None) -> DecodeResult:
    """One prefill, then beam search over the draft head, then hash-set
    filtering of the full ``K x K`` final-step pool before the last cut."""
    r = model.radices
    K = _clamp_k(req.K, r)
    verify = req.verify and vocab is not None
    if req.verify and vocab is None:
        raise ValueError("verification requested without a vocabulary set")
    res = DecodeResult(backbone_calls=1)
    head = model.head

    t0 = time.perf_counter()
    if prefilled is None:
        prefilled = model.backbone.prefill(model.prompt(req.history, req.query))
    h = prefilled.h
    res.prefill_time = time.perf_counter() - t0

    t0 = time.perf_counter()
    verify_time = 0.0
    prefixes = np.zeros((1, 0), dtype=np.int64)
    cum = np.zeros(1)
    states = h[0][None]
    for l in range(1, r.L + 1):
        logp = head.logprobs(l, h[l], states, h[0])
        res.draft_head_calls += len(prefixes)
        cand, cand_cum, parent = expand(prefixes, cum, logp, K)
        if l < r.L:
            keep = prune(cand, cand_cum, K, r)
            prefixes, cum = cand[keep], cand_cum[keep]
            states = head.advance(l, states[parent[keep]], prefixes[:, -1])
            continue
        if not verify:
            keep = prune(cand, cand_cum, K, r)
            prefixes, cum = cand[keep], cand_cum[keep]
            break
        tv = time.perf_counter()
        enc = encode_array(cand, r)
        valid = vocab.mask(enc)
        verify_time += time.perf_counter() - tv
        res.verified_out = len(cand)
        res.verified_kept = int(valid.sum())
        order = np.lexsort((enc, -cand_cum))
        res.unverified_valid = int(valid[order[:K]].sum())
        res.unverified_total = min(K, len(order))
        good = order[valid[order]][:K]
        if len(good) < K:
            res.underfull = True
            if req.pad_policy == "backfill":
                extra = order[~valid[order]][: K - len(good)]
                res.backfilled = len(extra)
                good = np.concatenate([good, extra])
        prefixes, cum = cand[good], cand_cum[good]
    res.verify_time = verify_time
    res.decode_time = time.perf_counter() - t0 - verify_time
    res.items = _finish(prefixes, cum)
    return res
