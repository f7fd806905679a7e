"""Acceptance criteria 1-10. Each test prints one ``ACCEPTANCE n PASS|FAIL`` line.

Criteria 8-10 share one chained synthetic dataset and one set of trained
models (module fixture); training the three architectures dominates runtime.
"""
import math
import time

import numpy as np
import pytest

from conftest import finite_difference_error, tiny_model
from toy import R, brute_force_head, brute_force_lm, toy_model, toy_requests, toy_vocab, trained_toy_model
from nezha.backbone import BackboneConfig
from nezha.codec import Radices, VocabularySet, decode, encode, encode_array
from nezha.data import SyntheticSpec, generate, split
from nezha.decoding import DecodeRequest, beam_search, nezha_infer, speculative_decode
from nezha.evaluation import Decoder, benchmark, evaluate
from nezha.head import HeadConfig
from nezha.model import RecModel
from nezha.training import TrainConfig, Trainer

CHAINED_EPOCHS = 10
LOSS_FRACTION = 0.3


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail, extra=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {detail}")
            if extra:
                print(extra)
        assert ok, detail
    return emit


@pytest.fixture(scope="module")
def toy():
    return trained_toy_model()


def test_1_codec_fidelity(report):
    t0 = time.perf_counter()
    ok = encode((243, 129, 3), (512, 512, 512)) == 852723
    rng = np.random.default_rng(0)
    for _ in range(5):
        r = Radices(tuple(int(x) for x in rng.integers(2, 600, size=int(rng.integers(1, 5)))))
        idx = rng.integers(0, r.size, size=1000)
        ids = [decode(int(v), r) for v in idx]
        ok &= [encode(i, r) for i in ids] == idx.tolist()
        ok &= encode_array(np.asarray(ids), r).tolist() == idx.tolist()
    dt = time.perf_counter() - t0
    report(1, ok and dt < 1.0, f"encode example and 5x1000 round trips, {dt:.3f}s")


def test_2_beam_search_oracle(report, toy):
    t0 = time.perf_counter()
    ok = True
    for K in (1, 8, 64, 512):
        for req in toy_requests(5, K):
            ids, scores = brute_force_lm(toy, req)
            res = beam_search(req, toy)
            ok &= res.ids == ids[:K]
            ok &= np.allclose(res.scores, scores[:K], rtol=0, atol=1e-10)
    dt = time.perf_counter() - t0
    report(2, ok and dt < 10.0, f"beam search == enumeration of 512 ids, K in 1/8/64/512, {dt:.2f}s")


def test_3_sd_lossless(report, toy):
    t0 = time.perf_counter()
    draft = toy_model(seed=7)
    same = rejected = 0
    reqs = toy_requests(100, 8, seed=3)
    for req in reqs:
        ref = beam_search(req, toy)
        a = speculative_decode(req, toy, toy)
        b = speculative_decode(req, draft, toy)
        same += a.items == ref.items and b.items == ref.items
        rejected += b.rejections
    dt = time.perf_counter() - t0
    report(3, same == len(reqs) and dt < 30.0,
           f"{same}/{len(reqs)} identical (self and random draft, {rejected} rejected steps), {dt:.2f}s")


def test_4_nezha_factorized_oracle(report, toy):
    t0 = time.perf_counter()
    same = 0
    reqs = toy_requests(100, 64, seed=5, verify=False)
    for req in reqs:
        ids, scores = brute_force_head(toy, req)
        res = nezha_infer(req, toy)
        same += res.ids == ids[:req.K] and np.allclose(res.scores, scores[:req.K], rtol=0, atol=1e-10)
    dt = time.perf_counter() - t0
    report(4, same == len(reqs) and dt < 10.0, f"{same}/{len(reqs)} equal to factorized top-K, {dt:.2f}s")


def test_6_gradient_check(report):
    t0 = time.perf_counter()
    worst, where = 0.0, None
    for variant in ("nezha", "mtp"):
        m = tiny_model(variant, d_hid=8)
        prompts = m.prompt([(1, 2, 0), (4, 3, 2)], [1])[None]
        target = np.array([[3, 1, 2]])
        lmi = m.prompt([(1, 2, 0), (4, 3, 2)], [1], placeholders=False, prefix=target[0])[None]

        def f():
            h, lm = m.loss_and_grad(prompts, lmi, target, 1.0, 1.0)
            return h + lm

        err, name = finite_difference_error(f, m.store)
        if err >= worst:
            worst, where = err, f"{variant}:{name}"
    dt = time.perf_counter() - t0
    report(6, worst < 1e-4 and dt < 60.0, f"max relative error {worst:.2e} at {where}, {dt:.1f}s")


def test_7_call_count_law(report):
    ok, parts = True, []
    for K, radices in ((10, (64, 64, 64)), (512, (512, 512, 512))):
        m = RecModel(BackboneConfig(d_hid=8, n_layers=1, n_heads=2, max_seq_len=16,
                                    radices=radices, query_vocab=1))
        beam = beam_search(DecodeRequest((), ((1, 2, 3),), K=K), m).backbone_calls
        nez = nezha_infer(DecodeRequest((), ((1, 2, 3),), K=K, verify=False), m).backbone_calls
        ok &= beam == 1 + K * 2 and nez == 1
        parts.append(f"K={K} beam {beam} (law {1 + K * 2}) nezha {nez}")
    report(7, ok, "; ".join(parts))


# chained synthetic world -----------------------------------------------------------


class Chained:
    def __init__(self):
        data = generate(SyntheticSpec())
        ids = data.catalog.id_map("latent")
        self.radices = data.radices
        self.sp = split(data.log, ids)
        self.vocab = VocabularySet.from_ids(ids.values(), data.radices)
        self.models, self.losses, self.train_time = {}, {}, {}

    def train(self, variant):
        if variant not in self.models:
            m = RecModel(BackboneConfig(radices=self.radices), HeadConfig(variant=variant))
            t0 = time.perf_counter()
            tr = Trainer(m, TrainConfig(lm_weight=0.0, epochs=CHAINED_EPOCHS))
            curve = []
            tr.fit(self.sp.train, callback=lambda epoch, tot: curve.append(float(tot[1])))
            self.train_time[variant] = time.perf_counter() - t0
            self.models[variant] = m
            self.losses[variant] = curve
        return self.models[variant]

    def evaluate(self, variant, verify=True):
        dec = Decoder("nezha", self.train(variant), self.vocab, K=10, verify=verify)
        return evaluate(dec, self.sp.test, self.vocab)


@pytest.fixture(scope="module")
def chained():
    return Chained()


@pytest.mark.slow
def test_5_verification_soundness(report, toy, chained):
    vocab = toy_vocab()
    sound = all(encode(i, R) in vocab for req in toy_requests(100, 8, verify=True)
                for i in nezha_infer(req, toy, vocab).ids)
    rep = chained.evaluate("nezha")
    ok = sound and rep.valid_post == 1.0 and rep.valid_pre < 1.0
    report(5, ok, f"post-verification valid {rep.valid_post:.3f}, pre-verification valid "
                  f"{rep.valid_pre:.3f} on {rep.n_requests} requests")


@pytest.mark.slow
def test_8_learning_sanity(report, chained):
    chained.train("nezha")
    rep = chained.evaluate("nezha")
    start = 3 * math.log(64)
    final = chained.losses["nezha"][-1]
    t = chained.train_time["nezha"]
    ok = rep.hit[10] >= 0.6 and final < LOSS_FRACTION * start and t < 15 * 60
    report(8, ok, f"H@10 {rep.hit[10]:.3f} (>= 0.6), epoch-{CHAINED_EPOCHS} head loss {final:.3f} "
                  f"(< {LOSS_FRACTION * start:.3f}), training {t:.0f}s")


@pytest.mark.slow
def test_9_ablation_directionality(report, chained):
    h = {name: chained.evaluate(v, verify).hit[10] for name, v, verify in (
        ("NEZHA", "nezha", True), ("NEZHA-1", "nezha_no_state", True),
        ("NEZHA-3", "nezha_add_transition", True), ("NEZHA-4", "nezha", False))}
    ok = h["NEZHA"] > h["NEZHA-3"] and h["NEZHA"] >= h["NEZHA-4"] and h["NEZHA-1"] < 0.5 * h["NEZHA"]
    report(9, ok, ", ".join(f"{k} {v:.3f}" for k, v in h.items()))


@pytest.mark.slow
def test_10_latency_direction(report, chained):
    m = chained.train("nezha")
    decoders = {"beam": Decoder("beam", m, K=512),
                "nezha": Decoder("nezha", m, chained.vocab, K=512)}
    rep = benchmark(decoders, chained.sp.test[:20], repetitions=5)
    table = rep.table()
    beam, nez = rep.row("beam"), rep.row("nezha")
    ok = nez.decode < beam.decode and "System" in table.splitlines()[0]
    report(10, ok, f"decode median nezha {1e3 * nez.decode:.2f}ms vs beam {1e3 * beam.decode:.2f}ms "
                   f"(K=512, calls {nez.backbone_calls:g} vs {beam.backbone_calls:g})", table)
