import warnings

import numpy as np
import pytest

from toy import (R, brute_force_head, brute_force_lm, toy_model, toy_requests, toy_vocab,
                 trained_toy_model)
from nezha.codec import Radices, encode
from nezha.decoding import (DecodeRequest, beam_search, expand, lm_step_logprobs, nezha_infer, prune,
                            speculative_decode)


@pytest.fixture(scope="module")
def model():
    return trained_toy_model()


@pytest.fixture(scope="module")
def random_draft():
    return toy_model(seed=7)


def test_request_validation():
    with pytest.raises(ValueError):
        DecodeRequest(K=0)
    with pytest.raises(ValueError):
        DecodeRequest(pad_policy="pad")


def test_prune_tie_break_by_index():
    r = Radices((4, 4))
    prefixes = np.array([[3, 1], [1, 2], [2, 0], [0, 3]])  # indices 7, 9, 2, 12
    cum = np.array([-1.0, -1.0, -0.5, -1.0])
    keep = prune(prefixes, cum, 3, r)
    assert prefixes[keep].tolist() == [[2, 0], [3, 1], [1, 2]]


def test_expand_keeps_top_k_per_beam():
    logp = np.log(np.array([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]]))
    cand, cum, parent = expand(np.zeros((2, 0), dtype=np.int64), np.array([0.0, -1.0]), logp, 2)
    assert cand[:, 0].tolist() == [1, 2, 0, 1]
    assert parent.tolist() == [0, 0, 1, 1]
    np.testing.assert_allclose(cum, [np.log(0.6), np.log(0.3), -1 + np.log(0.5), -1 + np.log(0.25)])


@pytest.mark.parametrize("K", [1, 8, 64, 512])
def test_beam_search_matches_enumeration(model, K):
    for req in toy_requests(20, K):
        ids, scores = brute_force_lm(model, req)
        res = beam_search(req, model)
        assert res.ids == ids[:K]
        np.testing.assert_allclose(res.scores, scores[:K], rtol=0, atol=1e-10)


def test_beam_search_greedy(model):
    req = toy_requests(1, 1)[0]
    res = beam_search(req, model)
    ctx = model.prompt(req.history, placeholders=False)
    prefix = []
    for l in (1, 2, 3):
        lp = lm_step_logprobs(model, ctx, np.array([prefix], dtype=np.int64).reshape(1, -1), l)
        prefix.append(int(np.argmax(lp[0])))
    assert res.ids == [tuple(prefix)]


def test_beam_prefix_property(model):
    req = toy_requests(1, 512)[0]
    full = beam_search(req, model).ids
    assert len(set(full)) == 512
    for K in (3, 17, 100):
        assert beam_search(DecodeRequest(req.query, req.history, K=K), model).ids == full[:K]


def test_beam_items_sorted(model):
    res = beam_search(toy_requests(1, 30)[0], model)
    keys = [(-s, encode(i, R)) for i, s in res.items]
    assert keys == sorted(keys)
    assert all(s <= 0 for s in res.scores)


def _wide_model(radices=(64, 64, 64)):
    from nezha.backbone import BackboneConfig
    from nezha.model import RecModel
    return RecModel(BackboneConfig(d_hid=8, n_layers=1, n_heads=2, max_seq_len=16,
                                   radices=radices, query_vocab=1))


@pytest.mark.parametrize("K", [1, 10, 64])
def test_call_counts(K):
    m = _wide_model()
    req = DecodeRequest((), ((1, 2, 3),), K=K)
    assert beam_search(req, m).backbone_calls == 1 + K * 2
    assert nezha_infer(DecodeRequest((), ((1, 2, 3),), K=K, verify=False), m).backbone_calls == 1


def test_clamp_with_warning():
    m = toy_model()
    with pytest.warns(UserWarning):
        res = beam_search(DecodeRequest((), ((1, 2, 3),), K=600), m)
    assert len(res.items) == 512


def test_sd_equals_beam_self_draft(model):
    for req in toy_requests(15, 8, seed=3):
        sd = speculative_decode(req, model, model)
        bs = beam_search(req, model)
        assert sd.items == bs.items
        assert sd.rejections == 0
        assert sd.backbone_calls <= 1 + req.K * 2


def test_sd_equals_beam_random_draft(model, random_draft):
    rejected = 0
    for req in toy_requests(15, 8, seed=4):
        sd = speculative_decode(req, random_draft, model)
        assert sd.items == beam_search(req, model).items
        assert sd.backbone_calls <= 1 + req.K * 2
        rejected += sd.rejections
    assert rejected >= 1


def test_sd_radix_mismatch(model):
    with pytest.raises(ValueError):
        speculative_decode(DecodeRequest(K=2), _wide_model(), model)


@pytest.mark.parametrize("K", [1, 8, 64, 512])
def test_nezha_matches_factorized_enumeration(model, K):
    for req in toy_requests(20, K, verify=False):
        ids, scores = brute_force_head(model, req)
        res = nezha_infer(req, model)
        assert res.backbone_calls == 1
        assert res.ids == ids[:K]
        np.testing.assert_allclose(res.scores, scores[:K], rtol=0, atol=1e-10)


@pytest.mark.parametrize("variant", ["nezha_no_state", "nezha_add_transition", "mtp",
                                     "nezha_no_placeholder"])
def test_variants_match_factorized_enumeration(variant):
    m = toy_model(variant, seed=3)
    for req in toy_requests(5, 512, verify=False):
        assert nezha_infer(req, m).ids == brute_force_head(m, req)[0]


def test_verification_filters_and_counts(model):
    vocab = toy_vocab()
    for req in toy_requests(20, 8, verify=True):
        res = nezha_infer(req, model, vocab)
        assert all(encode(i, R) in vocab for i in res.ids)
        assert res.verified_out == 8 * 8
        assert res.verified_kept <= res.verified_out
        assert len(res.items) == min(req.K, res.verified_kept)


def test_full_vocabulary_keeps_whole_pool(model):
    from nezha.codec import VocabularySet
    everything = VocabularySet.from_indices(range(512), R)
    for K in (2, 8):
        res = nezha_infer(toy_requests(1, K)[0], model, everything)
        assert res.verified_kept == res.verified_out == K * K
        assert not res.underfull


def test_underfull_strict_and_backfill():
    m = toy_model(seed=5)  # untrained: almost everything is a hallucination
    vocab = toy_vocab()
    req = DecodeRequest((), ((1, 2, 3),), K=8, verify=True)
    strict = nezha_infer(req, m, vocab)
    assert strict.underfull and len(strict.items) < 8
    assert all(encode(i, R) in vocab for i in strict.ids)
    bf = nezha_infer(DecodeRequest((), ((1, 2, 3),), K=8, pad_policy="backfill"), m, vocab)
    assert len(bf.items) == 8 and bf.backfilled == 8 - len(strict.items)
    assert bf.ids[: len(strict.items)] == strict.ids


def test_empty_survivor_set_is_flagged():
    m = toy_model(seed=5)
    from nezha.codec import VocabularySet
    empty = VocabularySet.from_indices([], R)
    res = nezha_infer(DecodeRequest((), ((1, 2, 3),), K=4), m, empty)
    assert res.items == [] and res.underfull


def test_verify_without_vocab_rejected(model):
    with pytest.raises(ValueError):
        nezha_infer(DecodeRequest((), ((1, 2, 3),), K=4, verify=True), model, None)


def test_nezha_monotone_in_k(model):
    for req in toy_requests(10, 4, seed=9):
        prev = set()
        for K in (1, 2, 4, 8, 16, 64):
            got = set(nezha_infer(DecodeRequest(req.query, req.history, K=K, verify=False), model).ids)
            assert prev <= got
            prev = got


def test_pre_verification_counter(model):
    res = nezha_infer(toy_requests(1, 8)[0], model, toy_vocab())
    assert res.unverified_total == 8
    assert 0 <= res.unverified_valid <= 8


def test_no_warning_within_range(model):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        beam_search(toy_requests(1, 512)[0], model)
