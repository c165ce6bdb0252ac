"""Typed layer graphs: representation, validation, and execution.

A model is an ordered list of :class:`LayerNode` entries (already in
topological order) plus a parameter store.  The backbone/head split is
structural: the single global-average-pool node marks the head boundary,
everything after it (the final linear layer) is the classifier head.  Two
named tap sites expose the activations around that pool:

* ``before_pool`` - the input edge of the global-average-pool,
* ``after_pool``  - its output edge (the penultimate features).

Node kinds and their attributes:

    conv            in_channels, out_channels, kernel, stride, padding
    depthwise_conv  channels, kernel, stride, padding  (groups == channels)
    batchnorm       channels, eps, momentum
    relu            -
    add             - (exactly two inputs with equal channel counts)
    max_pool        kernel, stride, padding
    global_avg_pool -
    flatten         -
    linear          in_features, out_features

Conv-family nodes may also carry ``block`` (block id string) and
``block_out`` (bool) annotations used by the pruning schemes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import nnops
from .errors import GraphError
from .tensor import Tensor, as_tensor

INPUT = "input"

KINDS = {"conv", "depthwise_conv", "batchnorm", "relu", "add",
         "max_pool", "global_avg_pool", "flatten", "linear"}

TAP_BEFORE = "before_pool"
TAP_AFTER = "after_pool"


@dataclass(frozen=True)
class LayerNode:
    id: str
    kind: str
    inputs: Tuple[str, ...]
    attrs: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BlockInfo:
    """One residual/inverted-residual block, ordered shallow to deep."""
    id: str
    stage: int
    out_node: str


class LayerGraph:
    """Immutable node structure plus a mutable parameter store."""

    def __init__(self, nodes: Sequence[LayerNode], params: Dict[str, Tensor],
                 buffers: Dict[str, np.ndarray], input_shape: Tuple[int, int, int],
                 blocks: Sequence[BlockInfo] = (), name: str = ""):
        self.nodes = list(nodes)
        self.params = dict(params)
        self.buffers = dict(buffers)
        self.input_shape = tuple(input_shape)
        self.blocks = tuple(blocks)
        self.name = name
        self._by_id = {n.id: n for n in self.nodes}
        self.validate()

    # structure ------------------------------------------------------------

    def node(self, node_id: str) -> LayerNode:
        return self._by_id[node_id]

    @property
    def pool_node(self) -> LayerNode:
        pools = [n for n in self.nodes if n.kind == "global_avg_pool"]
        if len(pools) != 1:
            raise GraphError(f"expected exactly one global_avg_pool, found {len(pools)}")
        return pools[0]

    @property
    def head_boundary(self) -> str:
        """Last backbone node: the global average pool."""
        return self.pool_node.id

    @property
    def head_node(self) -> LayerNode:
        """The classifier head: the final linear layer."""
        last = self.nodes[-1]
        if last.kind != "linear":
            raise GraphError(f"graph must end in a linear head, ends in {last.kind}")
        return last

    @property
    def tap_sites(self) -> Dict[str, str]:
        pool = self.pool_node
        return {TAP_BEFORE: pool.inputs[0], TAP_AFTER: pool.id}

    def head_param_names(self) -> List[str]:
        head = self.head_node
        return [f"{head.id}.weight", f"{head.id}.bias"]

    def backbone_params(self) -> Dict[str, Tensor]:
        head = set(self.head_param_names())
        return {k: v for k, v in self.params.items() if k not in head}

    def channels(self) -> Dict[str, int]:
        """Channel count on each node's output edge (head linear: classes)."""
        ch = {INPUT: self.input_shape[0]}
        for n in self.nodes:
            if n.kind == "conv":
                ch[n.id] = n.attrs["out_channels"]
            elif n.kind == "depthwise_conv":
                ch[n.id] = n.attrs["channels"]
            elif n.kind == "linear":
                ch[n.id] = n.attrs["out_features"]
            elif n.kind == "flatten":
                ch[n.id] = -1  # channel identity lost
            else:
                ch[n.id] = ch[n.inputs[0]]
        return ch

    def validate(self) -> None:
        seen = {INPUT}
        ids = set()
        for n in self.nodes:
            if n.id in ids or n.id == INPUT:
                raise GraphError(f"duplicate node id {n.id!r}")
            ids.add(n.id)
            if n.kind not in KINDS:
                raise GraphError(f"{n.id}: unknown kind {n.kind!r}")
            want = 2 if n.kind == "add" else 1
            if len(n.inputs) != want:
                raise GraphError(f"{n.id}: {n.kind} takes {want} inputs, got {len(n.inputs)}")
            for src in n.inputs:
                if src not in seen:
                    raise GraphError(f"{n.id}: input {src!r} not yet produced "
                                     "(graph must be in topological order)")
            seen.add(n.id)
        ch = self.channels()
        for n in self.nodes:
            if n.kind == "conv" and ch[n.inputs[0]] != n.attrs["in_channels"]:
                raise GraphError(
                    f"{n.id}: declares {n.attrs['in_channels']} input channels, "
                    f"producer supplies {ch[n.inputs[0]]}")
            if n.kind == "depthwise_conv" and ch[n.inputs[0]] != n.attrs["channels"]:
                raise GraphError(
                    f"{n.id}: depthwise over {n.attrs['channels']} channels, "
                    f"producer supplies {ch[n.inputs[0]]}")
            if n.kind == "add" and ch[n.inputs[0]] != ch[n.inputs[1]]:
                raise GraphError(
                    f"{n.id}: add inputs have {ch[n.inputs[0]]} vs "
                    f"{ch[n.inputs[1]]} channels")
        self._check_store()

    def _check_store(self) -> None:
        expected = {}
        for n in self.nodes:
            if n.kind == "conv":
                a = n.attrs
                expected[f"{n.id}.weight"] = (
                    a["out_channels"], a["in_channels"], a["kernel"], a["kernel"])
            elif n.kind == "depthwise_conv":
                a = n.attrs
                expected[f"{n.id}.weight"] = (a["channels"], 1, a["kernel"], a["kernel"])
            elif n.kind == "batchnorm":
                c = n.attrs["channels"]
                expected[f"{n.id}.gamma"] = (c,)
                expected[f"{n.id}.beta"] = (c,)
                for buf in ("running_mean", "running_var"):
                    bname = f"{n.id}.{buf}"
                    if bname not in self.buffers:
                        raise GraphError(f"missing buffer {bname}")
                    if self.buffers[bname].shape != (c,):
                        raise GraphError(f"buffer {bname} has shape "
                                         f"{self.buffers[bname].shape}, want ({c},)")
            elif n.kind == "linear":
                a = n.attrs
                expected[f"{n.id}.weight"] = (a["out_features"], a["in_features"])
                expected[f"{n.id}.bias"] = (a["out_features"],)
        for name, shape in expected.items():
            if name not in self.params:
                raise GraphError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise GraphError(
                    f"parameter {name} has shape {self.params[name].shape}, want {shape}")

    # execution ------------------------------------------------------------

    def _apply(self, node: LayerNode, acts: Dict[str, Tensor], mode: str) -> Tensor:
        x = acts[node.inputs[0]] if node.kind != "add" else None
        a = node.attrs
        if node.kind == "conv":
            return nnops.conv2d(x, self.params[f"{node.id}.weight"],
                                stride=a["stride"], padding=a["padding"])
        if node.kind == "depthwise_conv":
            return nnops.conv2d(x, self.params[f"{node.id}.weight"],
                                stride=a["stride"], padding=a["padding"],
                                groups=a["channels"])
        if node.kind == "batchnorm":
            return nnops.batchnorm2d(
                x, self.params[f"{node.id}.gamma"], self.params[f"{node.id}.beta"],
                self.buffers[f"{node.id}.running_mean"],
                self.buffers[f"{node.id}.running_var"],
                training=(mode == "train"),
                momentum=a.get("momentum", 0.1), eps=a.get("eps", 1e-5))
        if node.kind == "relu":
            return x.relu()
        if node.kind == "add":
            from .tensor import add as tadd
            return tadd(acts[node.inputs[0]], acts[node.inputs[1]])
        if node.kind == "max_pool":
            return nnops.max_pool2d(x, a["kernel"], a["stride"], a["padding"])
        if node.kind == "global_avg_pool":
            return nnops.global_avg_pool(x)
        if node.kind == "flatten":
            return x.reshape((x.shape[0], -1))
        if node.kind == "linear":
            return nnops.linear(x, self.params[f"{node.id}.weight"],
                                self.params[f"{node.id}.bias"])
        raise GraphError(f"unhandled kind {node.kind}")

    def forward(self, x, taps: Iterable[str] = (), mode: str = "eval",
                stop_at: Optional[str] = None, capture: Iterable[str] = ()):
        """Run the graph; returns ``(logits, {tap_name: Tensor})``.

        ``taps`` may contain ``before_pool`` / ``after_pool``; tapped tensors
        stay attached to the active tape.  ``capture`` names raw node ids to
        expose the same way (keyed by node id).  With ``stop_at`` the walk
        ends after that node and the logits slot holds its activation.
        """
        if mode not in ("train", "eval"):
            raise GraphError(f"unknown mode {mode!r}")
        taps = set(taps)
        sites = self.tap_sites
        unknown = taps - set(sites)
        if unknown:
            raise GraphError(f"unknown tap name(s): {sorted(unknown)}")
        capture = set(capture)
        missing = capture - set(self._by_id)
        if missing:
            raise GraphError(f"capture of unknown node(s): {sorted(missing)}")
        want = {sites[t] for t in taps} | capture

        acts: Dict[str, Tensor] = {INPUT: as_tensor(x)}
        if acts[INPUT].ndim != 4 or acts[INPUT].shape[1:] != self.input_shape:
            raise GraphError(
                f"input shape {acts[INPUT].shape} does not match model "
                f"input {('N',) + self.input_shape}")
        tapped: Dict[str, Tensor] = {}
        out = None
        # Consumer counts let intermediate activations be dropped eagerly.
        remaining: Dict[str, int] = {}
        for n in self.nodes:
            for src in n.inputs:
                remaining[src] = remaining.get(src, 0) + 1
        for n in self.nodes:
            out = self._apply(n, acts, mode)
            acts[n.id] = out
            for src in n.inputs:
                remaining[src] -= 1
                if remaining[src] == 0 and src not in want:
                    del acts[src]
            if n.id in want:
                for t in taps:
                    if sites[t] == n.id:
                        tapped[t] = acts[n.id]
                if n.id in capture:
                    tapped[n.id] = acts[n.id]
            if stop_at is not None and n.id == stop_at:
                return out, tapped
        if stop_at is not None:
            raise GraphError(f"stop_at node {stop_at!r} not in graph")
        return out, tapped

    # copies and serialization ----------------------------------------------

    def copy(self) -> "LayerGraph":
        """Clone with an independent parameter/buffer store."""
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return LayerGraph(self.nodes, params, buffers, self.input_shape,
                          self.blocks, name=self.name)

    def to_arch_json(self) -> str:
        doc = {
            "format": "minicompress-arch",
            "version": 1,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "nodes": [{"id": n.id, "kind": n.kind, "inputs": list(n.inputs),
                       "attrs": n.attrs} for n in self.nodes],
            "blocks": [{"id": b.id, "stage": b.stage, "out_node": b.out_node}
                       for b in self.blocks],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def state_arrays(self) -> Tuple[Dict[str, np.ndarray], Dict[str, str]]:
        """All learnable parameters and running buffers, with kind tags."""
        arrays = {k: v.data for k, v in self.params.items()}
        kinds = {k: "param" for k in self.params}
        for k, v in self.buffers.items():
            arrays[k] = v
            kinds[k] = "buffer"
        return arrays, kinds

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        """Copy values from ``arrays`` into the existing store (casting dtype)."""
        for k, p in self.params.items():
            if k not in arrays:
                raise GraphError(f"state is missing parameter {k}")
            if tuple(arrays[k].shape) != p.shape:
                raise GraphError(f"state {k} has shape {arrays[k].shape}, want {p.shape}")
            p.data = arrays[k].astype(p.data.dtype)
        for k, b in self.buffers.items():
            if k not in arrays:
                raise GraphError(f"state is missing buffer {k}")
            b[...] = arrays[k].astype(b.dtype)


def arch_from_json(doc: str, seed: int = 0, precision: str = "double") -> LayerGraph:
    """Rebuild a graph structure from its JSON export with fresh parameters."""
    data = json.loads(doc)
    if data.get("format") != "minicompress-arch":
        raise GraphError("not a minicompress architecture document")
    nodes = [LayerNode(n["id"], n["kind"], tuple(n["inputs"]), n["attrs"])
             for n in data["nodes"]]
    blocks = [BlockInfo(b["id"], b["stage"], b["out_node"])
              for b in data.get("blocks", [])]
    params, buffers = init_store(nodes, np.random.default_rng(seed), precision)
    return LayerGraph(nodes, params, buffers, tuple(data["input_shape"]),
                      blocks, name=data.get("name", ""))


def init_store(nodes: Sequence[LayerNode], rng: np.random.Generator,
               precision: str = "double"):
    """He-normal conv weights, unit BN affine, uniform linear init."""
    dtype = np.float64 if precision == "double" else np.float32
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    for n in nodes:
        if n.kind == "conv":
            a = n.attrs
            fan_in = a["in_channels"] * a["kernel"] * a["kernel"]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (a["out_channels"], a["in_channels"], a["kernel"], a["kernel"]))
            params[f"{n.id}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        elif n.kind == "depthwise_conv":
            a = n.attrs
            fan_in = a["kernel"] * a["kernel"]
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           (a["channels"], 1, a["kernel"], a["kernel"]))
            params[f"{n.id}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
        elif n.kind == "batchnorm":
            c = n.attrs["channels"]
            params[f"{n.id}.gamma"] = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
            params[f"{n.id}.beta"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
            buffers[f"{n.id}.running_mean"] = np.zeros(c, dtype=dtype)
            buffers[f"{n.id}.running_var"] = np.ones(c, dtype=dtype)
        elif n.kind == "linear":
            a = n.attrs
            bound = 1.0 / np.sqrt(a["in_features"])
            w = rng.uniform(-bound, bound, (a["out_features"], a["in_features"]))
            b = rng.uniform(-bound, bound, a["out_features"])
            params[f"{n.id}.weight"] = Tensor(w.astype(dtype), requires_grad=True)
            params[f"{n.id}.bias"] = Tensor(b.astype(dtype), requires_grad=True)
    return params, buffers
