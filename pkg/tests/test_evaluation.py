import json
import math

import numpy as np
import pytest

from toy import R, toy_examples, toy_vocab, trained_toy_model
from nezha.codec import VocabularySet
from nezha.decoding import DecodeRequest, DecodeResult
from nezha.evaluation import Decoder, benchmark, evaluate, hit_at_k, ndcg_at_k, score


def ranked(n, target_rank=None, target=(9, 9, 9)):
    items = [((i, 0, 0), -float(i)) for i in range(n)]
    if target_rank is not None:
        items[target_rank - 1] = (target, items[target_rank - 1][1])
    return DecodeResult(items=items)


def test_hit_examples():
    assert hit_at_k(ranked(10, 1), (9, 9, 9), 5) == 1
    assert hit_at_k(ranked(10), (9, 9, 9), 5) == 0
    assert hit_at_k(ranked(10, 6), (9, 9, 9), 5) == 0
    assert hit_at_k(ranked(10, 6), (9, 9, 9), 10) == 1


def test_ndcg_examples():
    assert ndcg_at_k(ranked(10, 1), (9, 9, 9), 5) == 1.0
    assert ndcg_at_k(ranked(10, 3), (9, 9, 9), 5) == pytest.approx(1 / math.log2(4))
    assert ndcg_at_k(ranked(10, 3), (9, 9, 9), 5) == 0.5
    assert ndcg_at_k(ranked(10), (9, 9, 9), 5) == 0.0


def test_k_must_be_positive():
    with pytest.raises(ValueError):
        hit_at_k(ranked(3), (0, 0, 0), 0)
    with pytest.raises(ValueError):
        ndcg_at_k(ranked(3), (0, 0, 0), 0)


def test_backfilled_items_never_score():
    res = ranked(10, 10)
    res.backfilled = 1
    assert hit_at_k(res, (9, 9, 9), 10) == 0


@pytest.fixture(scope="module")
def model():
    return trained_toy_model(epochs=5)


def test_metric_invariants(model):
    ex = toy_examples(40, seed=11)
    rep = evaluate(Decoder("nezha", model, toy_vocab(), K=10), ex)
    assert 0 <= rep.hit[5] <= rep.hit[10] <= 1
    assert rep.ndcg[5] <= rep.hit[5] and rep.ndcg[10] <= rep.hit[10]
    assert rep.ndcg[5] <= rep.ndcg[10]
    assert rep.valid_post == 1.0
    assert rep.counters["backbone_calls"] == 1.0
    assert set(rep.row()) == {"H@5", "H@10", "N@5", "N@10", "LT"}


def test_validity_cross_checked_against_catalogue(model):
    ex = toy_examples(20, seed=12)
    rep = evaluate(Decoder("nezha", model, toy_vocab(), K=10, verify=False), ex)
    assert rep.valid_post < 1.0
    assert rep.valid_pre == rep.valid_post


def test_batched_prefill_matches_per_request(model):
    ex = toy_examples(15, seed=13)
    dec = Decoder("nezha", model, toy_vocab(), K=10)
    a = dec.run(ex, batch_prefill=True)
    b = dec.run(ex, batch_prefill=False)
    for x, y in zip(a, b):
        assert x.ids == y.ids
        np.testing.assert_allclose(x.scores, y.scores, rtol=0, atol=1e-12)


def test_beam_and_sd_metrics_identical(model):
    ex = toy_examples(15, seed=14)
    a = evaluate(Decoder("beam", model, toy_vocab(), K=10), ex)
    b = evaluate(Decoder("sd", model, toy_vocab(), draft=trained_toy_model(epochs=1), K=10), ex)
    assert a.hit == b.hit and a.ndcg == b.ndcg


def test_decoder_validation(model):
    with pytest.raises(ValueError):
        Decoder("greedy", model)
    with pytest.raises(ValueError):
        Decoder("sd", model)


def test_score_rejects_empty():
    with pytest.raises(ValueError):
        score([], [])


def test_benchmark_report_shape(model):
    ex = toy_examples(4, seed=15)
    decs = {"beam": Decoder("beam", model, toy_vocab(), K=64),
            "nezha": Decoder("nezha", model, toy_vocab(), K=64)}
    rep = benchmark(decs, ex, repetitions=3, baseline="beam")
    beam, nz = rep.row("beam"), rep.row("nezha")
    assert beam.normalized()["prefill"] == pytest.approx(1.0)
    assert nz.backbone_calls == 1
    assert beam.backbone_calls == 1 + 8 + 64
    assert beam.total == pytest.approx(beam.prefill + beam.decode + beam.system)
    lines = rep.jsonl().splitlines()
    assert [json.loads(l)["name"] for l in lines] == ["beam", "nezha"]
    table = rep.table().splitlines()
    assert len(table) == 3 and "Prefill" in table[0] and "System" in table[0]


def test_benchmark_flags_instability():
    calls = iter([0.001, 0.01, 0.001, 0.01, 0.001])

    def jittery(req):
        return DecodeResult(decode_time=next(calls))

    rep = benchmark({"x": jittery}, [DecodeRequest(K=1)], repetitions=5)
    assert rep.rows[0].unstable


def test_benchmark_empty_slice(model):
    with pytest.raises(ValueError):
        benchmark({"beam": Decoder("beam", model)}, [])


def test_vocab_used_for_scoring_is_independent(model):
    ex = toy_examples(10, seed=16)
    wrong = VocabularySet.from_indices([], R)
    rep = evaluate(Decoder("nezha", model, toy_vocab(), K=10), ex, vocab=wrong)
    assert rep.valid_post == 0.0
