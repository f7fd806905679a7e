import numpy as np
import pytest

from nezha.backbone import BackboneConfig
from nezha.head import HeadConfig
from nezha.model import RecModel

FD_EPS = 1e-5
REL_FLOOR = 1e-4  # denominators below this are treated as absolute error


def finite_difference_error(f, store, names=None):
    """Worst per-tensor relative error between analytic and central-difference grads.

    ``f`` must zero nothing itself: it recomputes the loss and accumulates grads.
    Relative error of a tensor is ``max|g - n| / max(max|g| + max|n|, REL_FLOOR)``.
    """
    store.zero_grad()
    f()
    analytic = {k: p.grad.copy() for k, p in store.items()}
    worst, where = 0.0, None
    for name, p in store.items():
        if names is not None and name not in names:
            continue
        num = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + FD_EPS
            fp = f()
            flat[i] = old - FD_EPS
            fm = f()
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * FD_EPS)
        g = analytic[name]
        denom = max(np.abs(g).max() + np.abs(num).max(), REL_FLOOR)
        err = float(np.abs(g - num).max() / denom)
        if err > worst:
            worst, where = err, name
    store.zero_grad()
    return worst, where


def tiny_model(variant="nezha", radices=(5, 4, 3), d_hid=8, n_layers=2, seed=1, init_std=0.3, **head):
    cfg = BackboneConfig(d_hid=d_hid, n_layers=n_layers, n_heads=2, max_seq_len=24,
                         radices=radices, query_vocab=4, seed=seed, init_std=init_std)
    return RecModel(cfg, HeadConfig(variant=variant, **head))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
