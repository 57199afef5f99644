import numpy as np
import pytest

from dgnet.routing import (
    Router,
    ThresholdPolicy,
    apply_threshold,
    route,
    router_multiadds,
    split_equivalence_check,
)
from dgnet.tensor import ShapeError, Tensor, backward, tensor_sum

from oracles import sigmoid


def test_router_matches_pool_affine_sigmoid():
    rng = np.random.default_rng(0)
    r = Router(6, 3, rng, init_std=0.5, dtype=np.float64)
    x = rng.standard_normal((4, 6, 5, 5))
    expect = sigmoid(x.mean(axis=(2, 3)) @ r.weight.data + r.bias.data)
    np.testing.assert_allclose(route(r, Tensor(x, dtype=np.float64)).data, expect, atol=1e-12)


def test_zero_init_router_emits_one_half():
    r = Router(4, 2, init_std=0.0)
    out = r(Tensor(np.random.default_rng(1).standard_normal((3, 4, 2, 2)))).data
    np.testing.assert_allclose(out, 0.5)


def test_router_channel_mismatch():
    with pytest.raises(ShapeError, match="C=5"):
        Router(4, 2)(Tensor(np.zeros((1, 5, 2, 2))))


def test_router_gradients_nonzero():
    rng = np.random.default_rng(2)
    r = Router(4, 3, rng, dtype=np.float64)
    backward(tensor_sum(r(Tensor(rng.standard_normal((2, 4, 3, 3)), dtype=np.float64))))
    assert np.all(r.weight.grad != 0) and np.all(r.bias.grad != 0)


def test_router_cost():
    assert router_multiadds(64, 5) == 320
    with pytest.raises(ValueError):
        router_multiadds(0, 1)


def test_threshold_boundaries():
    p = ThresholdPolicy("fixed", 0.05)
    np.testing.assert_array_equal(apply_threshold(np.array([0.049, 0.05, 0.9]), p), [0.0, 0.05, 0.9])
    np.testing.assert_array_equal(apply_threshold(np.array([0.001]), ThresholdPolicy("off")), [0.001])
    q = ThresholdPolicy("fixed", 0.05, per_node={2: 0.5})
    assert q.tau_for(2) == 0.5 and q.tau_for(3) == 0.05
    np.testing.assert_array_equal(apply_threshold(np.array([0.4, 0.6]), q, node=2), [0.0, 0.6])
    with pytest.raises(ValueError):
        ThresholdPolicy("fixed", 1.5)


def test_threshold_tensor_keeps_gradient_of_open_edges():
    w = Tensor(np.array([0.01, 0.3]), requires_grad=True, dtype=np.float64)
    backward(tensor_sum(apply_threshold(w, ThresholdPolicy("fixed", 0.05))))
    np.testing.assert_array_equal(w.grad, [0.0, 1.0])


def test_split_router_equivalence_small():
    rng = np.random.default_rng(3)
    r = Router(5, 4, rng, init_std=1.0, dtype=np.float64)
    feats = Tensor(rng.standard_normal((3, 5, 4, 4)), dtype=np.float64)
    assert split_equivalence_check(r, feats) < 1e-12
    assert split_equivalence_check(r, feats, permutation=[3, 1, 0, 2]) < 1e-12
