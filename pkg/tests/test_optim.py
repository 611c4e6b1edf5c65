import math

import numpy as np
import pytest

from hiernas.common import InvalidArgumentError
from hiernas.microtensor import ParamStore
from hiernas.optim import Adam, MomentumSGD, clip_grad_norm, cosine_lr, grad_norm


def test_cosine_endpoints_are_exact():
    assert cosine_lr(0, 39) == 0.025
    assert cosine_lr(39, 39) == 0.001


def test_cosine_midpoint():
    assert cosine_lr(20, 40) == pytest.approx(0.013)


def test_cosine_is_monotone():
    rates = [cosine_lr(s, 10) for s in range(11)]
    assert all(a > b for a, b in zip(rates, rates[1:]))


@pytest.mark.parametrize("step", [-1, 11])
def test_cosine_out_of_range(step):
    with pytest.raises(InvalidArgumentError):
        cosine_lr(step, 10)


def _store(**arrays):
    store = ParamStore()
    for name, value in arrays.items():
        store.add(name, np.asarray(value, dtype=float))
    return store


def test_clip_grad_norm_scales_to_max():
    store = _store(a=[0.0, 0.0], b=[0.0])
    store["a"].grad = np.array([3.0, 0.0])
    store["b"].grad = np.array([4.0])
    before = clip_grad_norm([store["a"], store["b"]], 1.0)
    assert before == pytest.approx(5.0)
    assert grad_norm([store["a"], store["b"]]) == pytest.approx(1.0, rel=1e-5)


def test_clip_grad_norm_leaves_small_gradients():
    store = _store(a=[0.0])
    store["a"].grad = np.array([0.5])
    clip_grad_norm([store["a"]], 5.0)
    assert store["a"].grad[0] == 0.5


def test_momentum_sgd_matches_hand_computation():
    store = _store(w=[1.0])
    opt = MomentumSGD(store, lr=0.1, momentum=0.9, weight_decay=0.0)
    store["w"].grad = np.array([1.0])
    opt.step()
    assert store["w"].data[0] == pytest.approx(0.9)
    store["w"].grad = np.array([1.0])
    opt.step()
    # buffer = 0.9 * 1 + 1
    assert store["w"].data[0] == pytest.approx(0.9 - 0.1 * 1.9)
    assert "momentum" in store.state["w"]


def test_momentum_sgd_weight_decay_is_coupled():
    store = _store(w=[2.0])
    opt = MomentumSGD(store, lr=0.5, momentum=0.0, weight_decay=0.1)
    store["w"].grad = np.array([0.0])
    opt.step()
    assert store["w"].data[0] == pytest.approx(2.0 - 0.5 * 0.2)


def test_adam_first_step_moves_by_lr():
    store = _store(alpha=[0.0, 0.0])
    opt = Adam(store, lr=3e-3, weight_decay=0.0)
    store["alpha"].grad = np.array([0.2, -7.0])
    opt.step()
    np.testing.assert_allclose(store["alpha"].data, [-3e-3, 3e-3], rtol=1e-6)
    assert store.state["alpha"]["step"][0] == 1.0


def test_adam_decay_is_decoupled():
    store = _store(alpha=[1.0])
    opt = Adam(store, lr=0.1, weight_decay=0.5)
    store["alpha"].grad = np.array([0.0])
    opt.step()
    assert store["alpha"].data[0] == pytest.approx(1.0 - 0.1 * 0.5)


def test_optimizer_skips_params_without_grad():
    store = _store(a=[1.0], b=[1.0])
    opt = MomentumSGD(store, names=["a"], lr=0.1)
    store["a"].grad = np.array([1.0])
    store["b"].grad = np.array([1.0])
    opt.step()
    assert store["b"].data[0] == 1.0
    opt.zero_grad()
    assert store["a"].grad is None


def test_optimizer_rejects_bad_rates():
    with pytest.raises(InvalidArgumentError):
        Adam(_store(a=[0.0]), lr=0.0)
    assert math.isfinite(cosine_lr(1, 2))
