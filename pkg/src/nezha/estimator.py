"""Estimator-style wrapper: ``fit`` on training examples, ``predict`` top-K ids."""
from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_examples, check_positive_int, check_radices
from .backbone import BackboneConfig
from .codec import VocabularySet
from .evaluation import Decoder, evaluate
from .head import HeadConfig
from .model import RecModel
from .training import TrainConfig, Trainer


class NezhaRecommender(BaseEstimator):
    """Backbone + draft head trained jointly, decoded with one prefill.

    ``X`` is a sequence of training examples (or ``(query, history, target)``
    triples). ``predict`` returns, per example, the top-``K`` semantic ids.
    The vocabulary used for verification is taken from ``fit(vocab=...)`` or,
    when absent, from every id seen during ``fit``.
    """

    def __init__(self, variant="nezha", radices=(64, 64, 64), d_hid=64, n_layers=2, n_heads=2,
                 max_seq_len=64, query_vocab=64, epochs=10, batch_size=64, lr=2e-3,
                 lm_weight=1.0, clip_norm=1.0, K=10, verify=True, pad_policy="strict",
                 decoder="nezha", dtype="float64", random_state=0):
        self.variant = variant
        self.radices = radices
        self.d_hid = d_hid
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_seq_len = max_seq_len
        self.query_vocab = query_vocab
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lm_weight = lm_weight
        self.clip_norm = clip_norm
        self.K = K
        self.verify = verify
        self.pad_policy = pad_policy
        self.decoder = decoder
        self.dtype = dtype
        self.random_state = random_state

    def _build(self) -> RecModel:
        bcfg = BackboneConfig(
            d_hid=self.d_hid, n_layers=self.n_layers, n_heads=self.n_heads,
            max_seq_len=self.max_seq_len, radices=tuple(check_radices(self.radices)),
            query_vocab=self.query_vocab, seed=self.random_state, dtype=self.dtype,
        )
        return RecModel(bcfg, HeadConfig(variant=self.variant))

    def fit(self, X, y=None, vocab: VocabularySet | None = None, callback=None):
        radices = check_radices(self.radices)
        check_positive_int(self.epochs, "epochs")
        examples = check_examples(X, radices)
        self.model_ = self._build()
        cfg = TrainConfig(lr=self.lr, batch_size=check_positive_int(self.batch_size, "batch_size"),
                          epochs=self.epochs, seed=self.random_state, clip_norm=self.clip_norm,
                          lm_weight=self.lm_weight)
        self.trainer_ = Trainer(self.model_, cfg).fit(examples, callback=callback)
        if vocab is None:
            seen = {ex.target for ex in examples}
            seen.update(h for ex in examples for h in ex.history)
            vocab = VocabularySet.from_ids(seen, radices)
        self.vocab_ = vocab
        self.loss_curve_ = [s.loss for s in self.trainer_.history]
        return self

    def _decoder(self) -> Decoder:
        check_is_fitted(self, "model_")
        return Decoder(self.decoder, self.model_, self.vocab_, K=self.K, verify=self.verify,
                       pad_policy=self.pad_policy)

    def decode(self, X) -> list:
        """Full decode results (ids, scores, counters, timings) per example."""
        dec = self._decoder()
        return dec.run(check_examples(X, self.model_.radices, require_target=False))

    def predict(self, X) -> list:
        return [r.ids for r in self.decode(X)]

    def score(self, X, y=None) -> float:
        """H@10 on ``X``."""
        return self.evaluate(X).hit[10]

    def evaluate(self, X):
        dec = self._decoder()
        return evaluate(dec, check_examples(X, self.model_.radices))
