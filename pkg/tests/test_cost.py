import numpy as np
import pytest

from dgnet.cost import conv_multiadds, count_cost
from dgnet.model import ArchConfig, Network


def test_single_conv_formula():
    assert conv_multiadds(16, 16, 8, 8, 3) == 147456


def test_routerless_network_has_zero_share():
    net = Network(ArchConfig(stage_channels=(8, 8), nodes_per_stage=4), "baseline")
    rep = count_cost(net, (3, 16, 16))
    assert rep.multiadds_router == 0 and rep.router_share == 0.0


def test_totals_equal_hand_summation():
    arch = ArchConfig(stage_channels=(8, 12), nodes_per_stage=4, num_classes=5)
    net = Network(arch, "dynamic")
    rep = count_cost(net, (3, 16, 16))
    # stage 0 runs at 8x8, stage 1 at 4x4; nodes 1..3 convolve, node 4 only aggregates
    conv = 3 * 8 * 64 * 9 + 2 * 8 * 8 * 64 * 9 + 8 * 12 * 16 * 9 + 2 * 12 * 12 * 16 * 9
    # complete 4-node stage: routers on nodes 1, 2, 3 with 3, 2, 1 output edges
    routers = 8 * (3 + 2 + 1) + 12 * (3 + 2 + 1)
    assert rep.multiadds_router == routers
    assert rep.multiadds_total == conv + routers + 12 * 5
    assert rep.params == sum(p.data.size for p in net.parameters())


def test_report_fields():
    rep = count_cost(Network(ArchConfig(stage_channels=(8,), nodes_per_stage=3), "dynamic"), (3, 8, 8))
    text = rep.format()
    for key in ("params:", "multiadds_total:", "multiadds_router:", "router_share:"):
        assert key in text


def test_channel_mismatch():
    with pytest.raises(ValueError, match="channels"):
        count_cost(Network(ArchConfig(stage_channels=(4,), nodes_per_stage=3)), (1, 8, 8))
