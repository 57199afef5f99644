import networkx as nx
import numpy as np
import pytest

from dgnet.graph import pattern_edges
from dgnet.model import (
    ArchConfig,
    Network,
    dynamic_forward,
    matrix_forward,
    prune_for_inference,
    prune_stage,
    pruned_forward,
    static_forward,
    thresholded_inference,
)
from dgnet.routing import ThresholdPolicy
from dgnet.tensor import Tensor, backward, cross_entropy_smoothed, no_grad

from netutil import build, copy_shared_weights, random_images, small_arch
from oracles import recursive_dynamic_logits, recursive_static_logits


def test_vgg_static_equals_sequential_composition():
    rng = np.random.default_rng(0)
    net = build(small_arch(nodes=5), "baseline", pattern="vgg")
    x = random_images(rng, 2)
    h = Tensor(x)
    for block in net.stages[0].blocks:
        h = block(h)
    np.testing.assert_allclose(static_forward(net, x).data, net.head(h).data, atol=1e-12)


def test_single_interior_node_patterns_with_skip_coincide():
    # with N=3, res, dense and complete are the same edge set
    rng = np.random.default_rng(1)
    x = random_images(rng, 2)
    outs = []
    for kind in ("res", "dense", "complete"):
        net = build(small_arch(nodes=3), "baseline", seed=5, pattern=kind)
        outs.append(static_forward(net, x).data)
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-12)
    np.testing.assert_allclose(outs[0], outs[2], atol=1e-12)


def test_static_complete_matches_recursive_oracle():
    rng = np.random.default_rng(2)
    net = build(small_arch(channels=(4, 6), nodes=4), "baseline", pattern="complete")
    weights = [{e: float(rng.uniform()) for e in st.graph.edges} for st in net.stages]
    x = random_images(rng, 3)
    np.testing.assert_allclose(static_forward(net, x, weights).data, recursive_static_logits(net, x, weights),
                               atol=1e-10)


def test_static_missing_weight_raises():
    net = build(small_arch(nodes=3), "baseline", pattern="res")
    with pytest.raises(KeyError, match=r"\(1,3\)"):
        static_forward(net, random_images(np.random.default_rng(0), 1), [{(1, 2): 1.0, (2, 3): 1.0}])


@pytest.mark.parametrize("kind", ["vgg", "res", "dense", "complete"])
def test_forced_dynamic_reduces_to_static(kind):
    rng = np.random.default_rng(3)
    arch = small_arch(channels=(4, 8), nodes=5, dtype="float32")
    dyn = build(arch, "dynamic", seed=1)
    static = build(arch, "baseline", seed=2, pattern=kind)
    copy_shared_weights(dyn, static)
    forced = [{e: 1.0 for e in st.graph.edges} for st in static.stages]
    x = random_images(rng, 4, dtype=np.float32)
    np.testing.assert_allclose(dynamic_forward(dyn, x, forced=forced)[0].data, static_forward(static, x).data,
                               atol=1e-5)


def test_dynamic_matches_recursive_oracle():
    rng = np.random.default_rng(4)
    net = build(small_arch(nodes=4), "dynamic", seed=3)
    x = random_images(rng, 3)
    np.testing.assert_allclose(dynamic_forward(net, x)[0].data, recursive_dynamic_logits(net, x), atol=1e-10)


def test_identical_samples_give_identical_rows_and_buffers():
    rng = np.random.default_rng(5)
    net = build(small_arch(channels=(4, 4), nodes=5), "dynamic")
    x = np.repeat(random_images(rng, 1), 2, axis=0)
    logits, bufs = dynamic_forward(net, x)
    np.testing.assert_array_equal(logits.data[0], logits.data[1])
    for b in bufs:
        np.testing.assert_array_equal(b.snapshot(0), b.snapshot(1))


def test_per_sample_independence():
    rng = np.random.default_rng(6)
    net = build(small_arch(channels=(4, 4), nodes=5), "dynamic")
    x = random_images(rng, 4)
    y = x.copy()
    y[2] = rng.standard_normal(y[2].shape)
    a, b = dynamic_forward(net, x)[0].data, dynamic_forward(net, y)[0].data
    np.testing.assert_allclose(np.delete(a, 2, 0), np.delete(b, 2, 0), atol=1e-12)
    assert not np.allclose(a[2], b[2])


@pytest.mark.parametrize("seed", range(3))
def test_router_gradients_rarely_zero(seed):
    # batch norm centres every pre-activation; without it, stage inputs are non-negative
    # sums of ReLUs and a filter can be dead for the whole batch, zeroing its router row
    rng = np.random.default_rng(seed)
    net = build(small_arch(channels=(8, 8), nodes=5, router_init_std=0.01, norm="batch"), "dynamic", seed=seed)
    loss = cross_entropy_smoothed(net(random_images(rng, 8, size=16)), rng.integers(0, 3, 8))
    backward(loss)
    grads = np.concatenate([p.grad.ravel() for p in net.router_parameters()])
    assert np.mean(grads == 0) < 0.01
    assert all(p.grad is not None for p in net.network_parameters())


def test_static_alpha_at_one_equals_complete_baseline():
    rng = np.random.default_rng(8)
    arch = small_arch(channels=(4, 4), nodes=4)
    sa = build(arch, "static_alpha", seed=1)
    for st in sa.stages:
        st.alpha.data[:] = 1.0
    base = build(arch, "baseline", seed=1, pattern="complete")
    copy_shared_weights(sa, base)
    x = random_images(rng, 3)
    np.testing.assert_allclose(sa(x).data, base(x).data, atol=1e-12)


def test_network_parameter_groups_partition():
    net = build(small_arch(), "dynamic")
    ids = {id(p) for p in net.parameters()}
    wn, wr = net.network_parameters(), net.router_parameters()
    assert len(wn) + len(wr) == len(ids) and not ({id(p) for p in wn} & {id(p) for p in wr})
    # every node with outgoing edges owns a router; the output node does not
    assert sorted(net.stages[0].routers) == [1, 2, 3]


def test_batch_norm_eval_is_per_sample():
    rng = np.random.default_rng(9)
    net = build(small_arch(channels=(4, 4), nodes=4, norm="batch"), "dynamic")
    net(random_images(rng, 8))  # populate running statistics
    net.eval()
    x = random_images(rng, 3)
    with no_grad():
        full = net(x).data
        single = np.concatenate([net(x[i:i + 1]).data for i in range(3)])
    np.testing.assert_allclose(full, single, atol=1e-12)


# -- pruning ----------------------------------------------------------------

def test_tau_zero_keeps_everything():
    rng = np.random.default_rng(10)
    net = build(small_arch(nodes=5), "dynamic")
    x = random_images(rng, 3)
    logits, pruned = thresholded_inference(net, x, ThresholdPolicy("fixed", 0.0))
    for per_sample in pruned:
        assert per_sample[0].open_edges == net.stages[0].graph.edges and not per_sample[0].dead
    np.testing.assert_allclose(logits.data, dynamic_forward(net, x)[0].data, atol=1e-12)


def test_node_with_all_inputs_closed_is_dead_and_skipped():
    rng = np.random.default_rng(11)
    net = build(small_arch(nodes=5), "dynamic")
    g = net.stages[0].graph
    m = np.zeros((5, 5))
    for i, j in g.edges:
        m[j - 1, i - 1] = 0.5
    m[2, 0] = m[2, 1] = 0.01  # both inputs of node 3 below tau
    p = prune_stage(m, g, ThresholdPolicy("fixed", 0.05))
    assert p.dead == {3} and not p.repaired
    x = random_images(rng, 1)
    skipped = pruned_forward(net, x, [[p]], skip_dead=True).data
    masked = pruned_forward(net, x, [[p]], skip_dead=False).data
    np.testing.assert_allclose(skipped, masked, atol=1e-12)
    # the weights that survive are exactly the open edges between live nodes
    assert p.active_edges == {(1, 2), (1, 4), (1, 5), (2, 4), (2, 5), (4, 5)}


def test_output_disconnected_triggers_chain_repair():
    g = pattern_edges("complete", 4)
    m = np.zeros((4, 4))
    m[1, 0], m[2, 1], m[3, 2], m[3, 0] = 0.2, 0.3, 0.04, 0.01
    p = prune_stage(m, g, ThresholdPolicy("fixed", 0.1))
    # strongest edge into the output is (3,4); node 3's input (2,3) is already open
    assert p.repaired == ((3, 4),)
    assert p.alive == {1, 2, 3, 4}


def test_surviving_edge_count_matches_brute_force():
    rng = np.random.default_rng(12)
    net = build(small_arch(channels=(4, 4), nodes=6, router_init_std=3.0), "dynamic")
    x = random_images(rng, 6)
    _, bufs = dynamic_forward(net, x)
    policy = ThresholdPolicy("fixed", 0.5)
    pruned = prune_for_inference(net, [b.snapshots() for b in bufs], policy)
    for b, per_sample in enumerate(pruned):
        for s, p in enumerate(per_sample):
            snap = bufs[s].snapshot(b)
            brute = sum(snap[j - 1, i - 1] >= 0.5 for i, j in net.stages[s].graph.edges)
            assert len(p.open_edges) == brute + len(p.repaired)
            dg = nx.DiGraph(list(p.open_edges))
            dg.add_nodes_from(range(1, 7))
            on_path = {v for v in range(1, 7) if nx.has_path(dg, 1, v) and nx.has_path(dg, v, 6)}
            assert p.alive == on_path


def test_matrix_forward_with_router_matrices_equals_dynamic():
    rng = np.random.default_rng(13)
    net = build(small_arch(channels=(4, 4), nodes=4), "dynamic")
    x = random_images(rng, 3)
    logits, bufs = dynamic_forward(net, x)
    np.testing.assert_allclose(matrix_forward(net, x, [b.snapshots() for b in bufs]).data, logits.data, atol=1e-12)


def test_arch_validation():
    with pytest.raises(ValueError, match="norm"):
        ArchConfig(norm="layer")
    with pytest.raises(ValueError, match="mode"):
        Network(ArchConfig(), "hybrid")
