"""Parameter and Multi-Adds accounting for a Network."""
from __future__ import annotations

from dataclasses import dataclass, field

from .model import Network
from .routing import router_multiadds
from .tensor import conv_output_size


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # "conv", "router" or "fc"
    c_in: int
    c_out: int
    h_out: int = 1
    w_out: int = 1
    k: int = 1
    params: int = 0
    multiadds: int = 0


@dataclass
class CostReport:
    params: int
    multiadds_total: int
    multiadds_router: int
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def router_share(self) -> float:
        return self.multiadds_router / self.multiadds_total if self.multiadds_total else 0.0

    def format(self) -> str:
        return "\n".join([
            f"params: {self.params}",
            f"multiadds_total: {self.multiadds_total}",
            f"multiadds_router: {self.multiadds_router}",
            f"router_share: {self.router_share:.6f} ({100 * self.router_share:.3f}%)",
        ])


def conv_multiadds(c_in: int, c_out: int, h_out: int, w_out: int, k: int) -> int:
    return c_in * c_out * h_out * w_out * k * k


def count_cost(net: Network, input_shape: tuple[int, int, int]) -> CostReport:
    """Per-sample cost for an input of shape (C, H, W).

    Convolutions cost C_in*C_out*H_out*W_out*k^2, each router C*fan_out and
    the classifier C*classes. Biases, normalization, pooling and the weighted
    aggregation are not counted as Multi-Adds.
    """
    c, h, w = (int(v) for v in input_shape)
    if c != net.arch.in_channels:
        raise ValueError(f"input has {c} channels, network expects {net.arch.in_channels}")
    layers: list[LayerCost] = []
    for s, stage in enumerate(net.stages):
        for j, block in enumerate(stage.blocks, start=1):
            if block.weight is None:
                continue
            pad = block.k // 2
            ho = conv_output_size(h, block.k, block.stride, pad)
            wo = conv_output_size(w, block.k, block.stride, pad)
            n_par = sum(p.data.size for p in block.parameters())
            layers.append(LayerCost(f"stage{s}.node{j}", "conv", block.c_in, block.c_out, ho, wo, block.k,
                                    n_par, conv_multiadds(block.c_in, block.c_out, ho, wo, block.k)))
            if j == 1:
                h, w = ho, wo
        for i, r in stage.routers.items():
            ch, fan_out = r.weight.shape
            n_par = r.weight.data.size + r.bias.data.size
            layers.append(LayerCost(f"stage{s}.router{i}", "router", ch, fan_out, params=n_par,
                                    multiadds=router_multiadds(ch, fan_out)))
        if stage.alpha is not None:
            layers.append(LayerCost(f"stage{s}.alpha", "alpha", 0, 0, params=stage.alpha.data.size))
    ci, co = net.fc_weight.shape
    head_params = ci * co + co + (2 * ci if net.head_gamma is not None else 0)
    layers.append(LayerCost("head", "fc", ci, co, params=head_params, multiadds=ci * co))
    total = sum(layer.multiadds for layer in layers)
    routed = sum(layer.multiadds for layer in layers if layer.kind == "router")
    return CostReport(sum(layer.params for layer in layers), total, routed, layers)
