"""Analytic multiply-accumulate and parameter accounting for layer graphs.

Counts follow the convention under which the standard ImageNet ResNet-34
comes out near 3.7G: a conv contributes ``Cout * (Cin/groups) * Kh * Kw *
H' * W'`` MACs, a linear layer ``K * D``, and normalization, activations,
additions and pooling contribute zero.  Parameters cover conv/linear
weights, BN affine pairs, and the linear bias; running statistics are
state, not parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

from .errors import GraphError
from .graph import INPUT, LayerGraph


@dataclass(frozen=True)
class NodeCost:
    node_id: str
    kind: str
    macs: int
    params: int


@dataclass(frozen=True)
class FlopsReport:
    total_macs: int
    total_params: int
    per_node: Tuple[NodeCost, ...]

    def __post_init__(self):
        assert self.total_macs == sum(c.macs for c in self.per_node)
        assert self.total_params == sum(c.params for c in self.per_node)

    def as_dict(self) -> dict:
        return {
            "total_macs": self.total_macs,
            "total_params": self.total_params,
            "per_node": [{"id": c.node_id, "kind": c.kind, "macs": c.macs,
                          "params": c.params} for c in self.per_node],
        }


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise GraphError(f"non-positive spatial extent {out}")
    return out


def count_macs(graph: LayerGraph) -> FlopsReport:
    """Per-node MAC/parameter breakdown plus totals."""
    # spatial extents per edge; None once spatial structure is gone
    size: Dict[str, Tuple[int, int]] = {INPUT: graph.input_shape[1:]}
    costs: List[NodeCost] = []
    for n in graph.nodes:
        a = n.attrs
        macs = 0
        params = 0
        if n.kind == "conv":
            h, w = size[n.inputs[0]]
            oh = _conv_out(h, a["kernel"], a["stride"], a["padding"])
            ow = _conv_out(w, a["kernel"], a["stride"], a["padding"])
            size[n.id] = (oh, ow)
            macs = (a["out_channels"] * a["in_channels"]
                    * a["kernel"] * a["kernel"] * oh * ow)
            params = graph.params[f"{n.id}.weight"].size
        elif n.kind == "depthwise_conv":
            h, w = size[n.inputs[0]]
            oh = _conv_out(h, a["kernel"], a["stride"], a["padding"])
            ow = _conv_out(w, a["kernel"], a["stride"], a["padding"])
            size[n.id] = (oh, ow)
            macs = a["channels"] * a["kernel"] * a["kernel"] * oh * ow
            params = graph.params[f"{n.id}.weight"].size
        elif n.kind == "max_pool":
            h, w = size[n.inputs[0]]
            size[n.id] = (_conv_out(h, a["kernel"], a["stride"], a["padding"]),
                          _conv_out(w, a["kernel"], a["stride"], a["padding"]))
        elif n.kind == "batchnorm":
            size[n.id] = size[n.inputs[0]]
            params = (graph.params[f"{n.id}.gamma"].size
                      + graph.params[f"{n.id}.beta"].size)
        elif n.kind in ("relu", "add"):
            size[n.id] = size[n.inputs[0]]
        elif n.kind in ("global_avg_pool", "flatten"):
            size[n.id] = None
        elif n.kind == "linear":
            macs = a["in_features"] * a["out_features"]
            params = (graph.params[f"{n.id}.weight"].size
                      + graph.params[f"{n.id}.bias"].size)
        costs.append(NodeCost(n.id, n.kind, macs, params))
    return FlopsReport(sum(c.macs for c in costs),
                       sum(c.params for c in costs), tuple(costs))


def count_params(graph: LayerGraph) -> int:
    """Total learnable parameter count (weights + BN affine + linear bias)."""
    return sum(p.size for p in graph.params.values())
