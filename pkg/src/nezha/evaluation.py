"""Accuracy metrics, validity accounting and the latency breakdown report."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .backbone import BackboneOutput
from .codec import VocabularySet, encode
from .decoding import DecodeRequest, DecodeResult, beam_search, nezha_infer, speculative_decode
from .model import RecModel

DECODERS = ("beam", "sd", "nezha")
CV_LIMIT = 0.2


def _ranked(result) -> list:
    if isinstance(result, DecodeResult):
        items = result.ids
        if result.backfilled:
            items = items[: len(items) - result.backfilled]
        return items
    return [tuple(r) for r in result]


def _rank(result, target) -> int | None:
    target = tuple(int(t) for t in target)
    for i, sid in enumerate(_ranked(result), 1):
        if tuple(sid) == target:
            return i
    return None


def hit_at_k(result, target, k: int) -> int:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(result, target)
    return int(r is not None and r <= k)


def ndcg_at_k(result, target, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _rank(result, target)
    return 1.0 / math.log2(r + 1) if r is not None and r <= k else 0.0


@dataclass
class Decoder:
    """A named decoding strategy bound to its model(s)."""

    name: str
    model: RecModel
    vocab: VocabularySet | None = None
    draft: RecModel | None = None
    K: int = 10
    verify: bool = True
    pad_policy: str = "strict"

    def __post_init__(self):
        if self.name not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}, got {self.name!r}")
        if self.name == "sd" and self.draft is None:
            raise ValueError("speculative decoding needs a draft model")

    @property
    def verifying(self) -> bool:
        return self.name == "nezha" and self.verify

    def request(self, ex) -> DecodeRequest:
        return DecodeRequest(ex.query, ex.history, K=self.K, verify=self.verifying,
                             pad_policy=self.pad_policy)

    def __call__(self, req: DecodeRequest, prefilled=None) -> DecodeResult:
        if self.name == "beam":
            return beam_search(req, self.model)
        if self.name == "sd":
            return speculative_decode(req, self.draft, self.model)
        return nezha_infer(req, self.model, self.vocab if req.verify else None, prefilled)

    def run(self, examples: Sequence, batch_prefill: bool = True) -> list[DecodeResult]:
        """Decode every example. NEZHA prompts of equal length share one batched
        prefill; its wall time is split evenly across the batch."""
        if self.name != "nezha" or not batch_prefill:
            return [self(self.request(ex)) for ex in examples]
        model = self.model
        groups: dict[int, list[int]] = {}
        prompts = [model.prompt(ex.history, ex.query) for ex in examples]
        for i, p in enumerate(prompts):
            groups.setdefault(len(p), []).append(i)
        out: list = [None] * len(examples)
        for idx in groups.values():
            t0 = time.perf_counter()
            hidden = model.backbone.prefill_batch(np.stack([prompts[i] for i in idx]))
            share = (time.perf_counter() - t0) / len(idx)
            for j, i in enumerate(idx):
                res = self(self.request(examples[i]), BackboneOutput(hidden[j]))
                res.prefill_time = share
                out[i] = res
        return out


@dataclass
class MetricReport:
    hit: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    lt_mean: float = 0.0
    lt_p50: float = 0.0
    lt_p90: float = 0.0
    lt_p99: float = 0.0
    valid_pre: float = 0.0
    valid_post: float = 0.0
    n_requests: int = 0
    counters: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {f"H@{k}": v for k, v in self.hit.items()}
        out.update({f"N@{k}": v for k, v in self.ndcg.items()})
        out["LT"] = self.lt_mean
        return out

    def to_dict(self) -> dict:
        d = self.row()
        d.update(lt_p50=self.lt_p50, lt_p90=self.lt_p90, lt_p99=self.lt_p99,
                 valid_pre=self.valid_pre, valid_post=self.valid_post,
                 n_requests=self.n_requests, **self.counters)
        return d


def score(results: Sequence[DecodeResult], examples: Sequence, vocab: VocabularySet | None = None,
          ks=(5, 10)) -> MetricReport:
    """Aggregate metrics over decoded results. ``vocab`` is the catalogue's own
    set; validity is checked against it independently of any decoder filter."""
    if len(results) != len(examples):
        raise ValueError("results and examples differ in length")
    if not results:
        raise ValueError("nothing to score")
    rep = MetricReport(n_requests=len(results))
    for k in ks:
        rep.hit[k] = float(np.mean([hit_at_k(r, ex.target, k) for r, ex in zip(results, examples)]))
        rep.ndcg[k] = float(np.mean([ndcg_at_k(r, ex.target, k) for r, ex in zip(results, examples)]))
    lt = np.array([r.latency for r in results])
    rep.lt_mean = float(lt.mean())
    rep.lt_p50, rep.lt_p90, rep.lt_p99 = (float(x) for x in np.percentile(lt, [50, 90, 99]))
    if vocab is not None:
        pre, post = [], []
        for r in results:
            strict = _ranked(r)
            valid = [encode(sid, vocab.radices) in vocab for sid in strict]
            post.append(np.mean(valid) if valid else 1.0)
            if r.unverified_valid is not None:
                pre.append(r.unverified_valid / max(r.unverified_total, 1))
            else:
                pre.append(post[-1])
        rep.valid_pre = float(np.mean(pre))
        rep.valid_post = float(np.mean(post))
    for name in ("backbone_calls", "draft_backbone_calls", "draft_head_calls",
                 "verified_out", "verified_kept", "rejections"):
        rep.counters[name] = float(np.mean([getattr(r, name) for r in results]))
    rep.counters["underfull_rate"] = float(np.mean([r.underfull for r in results]))
    return rep


def evaluate(decoder: Decoder, examples: Sequence, vocab: VocabularySet | None = None,
             ks=(5, 10), batch_prefill: bool = True) -> MetricReport:
    results = decoder.run(examples, batch_prefill=batch_prefill)
    return score(results, examples, vocab if vocab is not None else decoder.vocab, ks)


@dataclass
class BenchRow:
    name: str
    K: int
    prefill: float
    decode: float
    system: float
    total: float
    backbone_calls: float
    draft_head_calls: float
    decode_cv: float
    unstable: bool
    baseline_prefill: float = 1.0

    @property
    def latency(self) -> float:
        return self.prefill + self.decode

    def normalized(self) -> dict:
        b = self.baseline_prefill or 1.0
        return {"prefill": self.prefill / b, "decode": self.decode / b,
                "system": self.system / b, "total": self.total / b}

    def record(self) -> dict:
        d = asdict(self)
        d["latency"] = self.latency
        d["normalized"] = self.normalized()
        return d


@dataclass
class BenchReport:
    rows: list

    def row(self, name: str) -> BenchRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def table(self) -> str:
        head = ["decoder", "K", "Prefill", "Decode", "System", "Total",
                "Prefill(ms)", "Decode(ms)", "System(ms)", "Total(ms)", "backbone", "head", "cv"]
        lines = []
        for r in self.rows:
            n = r.normalized()
            lines.append([
                r.name, str(r.K), f"{n['prefill']:.2f}", f"{n['decode']:.2f}", f"{n['system']:.2f}",
                f"{n['total']:.2f}", f"{1e3 * r.prefill:.3f}", f"{1e3 * r.decode:.3f}",
                f"{1e3 * r.system:.3f}", f"{1e3 * r.total:.3f}", f"{r.backbone_calls:g}",
                f"{r.draft_head_calls:g}", f"{r.decode_cv:.3f}" + (" UNSTABLE" if r.unstable else ""),
            ])
        widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(head)]
        fmt = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
        return "\n".join([fmt(head)] + [fmt(l) for l in lines])

    def jsonl(self) -> str:
        return "".join(json.dumps(r.record()) + "\n" for r in self.rows)


def benchmark(decoders: Mapping[str, Callable], examples: Sequence,
              repetitions: int = 5, baseline: str | None = None) -> BenchReport:
    """Per-phase medians over ``repetitions`` passes of ``examples``.

    A decoder with a ``request`` method turns each example into its own
    request; plain callables receive the examples (requests) unchanged.

    Each repetition yields the median prefill/decode/system time across
    requests; the report takes the median of those and flags a decoder whose
    decode medians vary with coefficient of variation above ``CV_LIMIT``.
    Normalisation divides by the prefill median of ``baseline`` (the first
    decoder by default).
    """
    if not examples:
        raise ValueError("benchmark needs at least one request")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rows = []
    for name, dec in decoders.items():
        per_rep = np.zeros((repetitions, 3))
        calls = heads = 0.0
        radices = getattr(getattr(dec, "model", None), "radices", None)
        requests = [dec.request(ex) for ex in examples] if hasattr(dec, "request") else list(examples)
        for rep in range(repetitions):
            phases = np.zeros((len(requests), 3))
            for i, req in enumerate(requests):
                res = dec(req)
                t0 = time.perf_counter()
                if radices is not None:
                    json.dumps(res.to_record(radices))
                marshal = time.perf_counter() - t0
                phases[i] = (res.prefill_time, res.decode_time, res.verify_time + marshal)
                if rep == 0:
                    calls += res.backbone_calls
                    heads += res.draft_head_calls
            per_rep[rep] = np.median(phases, axis=0)
        med = np.median(per_rep, axis=0)
        dm = per_rep[:, 1]
        cv = float(dm.std() / dm.mean()) if repetitions > 1 and dm.mean() > 0 else 0.0
        rows.append(BenchRow(
            name=name, K=requests[0].K, prefill=float(med[0]), decode=float(med[1]),
            system=float(med[2]), total=float(med.sum()),
            backbone_calls=calls / len(requests), draft_head_calls=heads / len(requests),
            decode_cv=cv, unstable=cv >= CV_LIMIT,
        ))
    base = baseline or rows[0].name
    b = next((r.prefill for r in rows if r.name == base), rows[0].prefill)
    for r in rows:
        r.baseline_prefill = b
    return BenchReport(rows)
