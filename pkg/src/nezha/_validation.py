"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numbers
from typing import Sequence

from .codec import Radices, as_radices
from .training import TrainingExample


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_radices(radices) -> Radices:
    try:
        return as_radices(radices)
    except TypeError as exc:
        raise ValueError(f"radices must be a sequence of positive integers: {exc}") from exc


def check_examples(X, radices: Radices, require_target: bool = True) -> list[TrainingExample]:
    """Coerce ``X`` to a list of :class:`TrainingExample` and range-check every code.

    Accepts examples, ``(query, history, target)`` triples or mappings with
    those keys.
    """
    if isinstance(X, (str, bytes)) or not isinstance(X, Sequence):
        X = list(X)
    out = []
    for i, ex in enumerate(X):
        if not isinstance(ex, TrainingExample):
            if isinstance(ex, dict):
                ex = TrainingExample(ex.get("query", ()), ex.get("history", ()), ex.get("target", ()))
            else:
                query, history, *rest = ex
                ex = TrainingExample(query, history, rest[0] if rest else ())
        for sid in ex.history + ((ex.target,) if require_target or ex.target else ()):
            if len(sid) != radices.L or any(not 0 <= t < T for t, T in zip(sid, radices)):
                raise ValueError(f"example {i}: semantic id {sid} outside radices {tuple(radices)}")
        out.append(ex)
    if not out:
        raise ValueError("no examples given")
    return out
