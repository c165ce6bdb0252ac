"""Channel-group resolution, pruning plans, and plan application.

Channel coupling is resolved by union-find over activation edges: each
ordinary conv output starts a fresh group, normalization/activation/pooling
nodes propagate their input's group, a depthwise conv keeps its input group
(its in- and out-channels are the same positions), and every residual add
merges its two operands' groups.  The classifier's input axis therefore
binds, through the pooling layer, to the last backbone group.

Groups are classified structurally:

* ``internal``  - created strictly inside one block and not the block
                  output; these are what the ``normal`` scheme prunes.
* ``coupled``   - merged through at least one add; the ``residual`` scheme
                  prunes these as well, except the final group feeding the
                  pool (its width must keep matching the classifier head).
* ``cd_style``  - ``normal`` restricted to a shallow run of blocks; see
                  :func:`cd_block_set`.

Filter importance is the plain L1 norm; a coupled group's score is the sum
of the per-channel L1 scores over every weight holding an out-axis in the
group.  Ties keep the lower channel index.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import PruningError
from .graph import INPUT, BlockInfo, LayerGraph, LayerNode
from .tensor import Tensor

SCHEMES = ("normal", "residual", "cd_style")


@dataclass(frozen=True)
class ChannelGroup:
    """One set of channel positions tied together across the graph."""
    gid: str
    size: int
    edges: Tuple[str, ...]                 # activation edges it governs
    members: Tuple[Tuple[str, str], ...]   # (param name, "out" | "in")
    vector_params: Tuple[str, ...]         # BN affine vectors and biases
    vector_buffers: Tuple[str, ...]        # BN running statistics
    out_nodes: Tuple[str, ...]             # nodes whose weight out-axis is here
    coupled: bool
    has_input: bool
    feeds_pool: bool
    head_out: bool
    internal_block: Optional[str]          # block id when internal to one block


class _UnionFind:
    def __init__(self):
        self.parent: Dict[str, str] = {}

    def make(self, e: str) -> str:
        self.parent.setdefault(e, e)
        return e

    def find(self, e: str) -> str:
        p = self.parent
        root = e
        while p[root] != root:
            root = p[root]
        while p[e] != root:
            p[e], e = root, p[e]
        return root

    def union(self, a: str, b: str) -> str:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra
        return ra


def resolve_channel_groups(graph: LayerGraph) -> List[ChannelGroup]:
    """Partition every weight channel-axis into coupling groups."""
    uf = _UnionFind()
    uf.make(INPUT)
    bindings: List[Tuple[str, str, str]] = []   # (param, role, edge)
    vectors: List[Tuple[str, str, bool]] = []   # (name, edge, is_buffer)
    out_node_of: List[Tuple[str, str]] = []     # (node id, edge)
    add_edges: List[str] = []

    for n in graph.nodes:
        src = n.inputs[0]
        if n.kind == "conv":
            uf.make(n.id)
            bindings.append((f"{n.id}.weight", "in", src))
            bindings.append((f"{n.id}.weight", "out", n.id))
            out_node_of.append((n.id, n.id))
        elif n.kind == "depthwise_conv":
            # in-channels == out-channels positionally: propagate the group
            uf.make(n.id)
            uf.union(src, n.id)
            bindings.append((f"{n.id}.weight", "out", n.id))
            out_node_of.append((n.id, n.id))
        elif n.kind == "batchnorm":
            uf.make(n.id)
            uf.union(src, n.id)
            vectors.append((f"{n.id}.gamma", n.id, False))
            vectors.append((f"{n.id}.beta", n.id, False))
            vectors.append((f"{n.id}.running_mean", n.id, True))
            vectors.append((f"{n.id}.running_var", n.id, True))
        elif n.kind in ("relu", "max_pool", "global_avg_pool", "flatten"):
            uf.make(n.id)
            uf.union(src, n.id)
        elif n.kind == "add":
            uf.make(n.id)
            uf.union(n.inputs[0], n.inputs[1])
            uf.union(n.inputs[0], n.id)
            add_edges.append(n.id)
        elif n.kind == "linear":
            uf.make(n.id)
            bindings.append((f"{n.id}.weight", "in", src))
            bindings.append((f"{n.id}.weight", "out", n.id))
            vectors.append((f"{n.id}.bias", n.id, False))
            out_node_of.append((n.id, n.id))

    # Gather edges per root in topological encounter order.
    edges_of: Dict[str, List[str]] = {}
    for e in [INPUT] + [n.id for n in graph.nodes]:
        if e not in uf.parent:
            continue
        edges_of.setdefault(uf.find(e), []).append(e)

    coupled_roots = {uf.find(e) for e in add_edges}
    pool_root = uf.find(graph.pool_node.inputs[0])
    head_root = uf.find(graph.head_node.id)
    channels = graph.channels()

    groups: List[ChannelGroup] = []
    for root, edges in edges_of.items():
        members = tuple((p, role) for p, role, e in bindings if uf.find(e) == root)
        vparams = tuple(name for name, e, is_buf in vectors
                        if not is_buf and uf.find(e) == root)
        vbuffers = tuple(name for name, e, is_buf in vectors
                         if is_buf and uf.find(e) == root)
        out_nodes = tuple(nid for nid, e in out_node_of if uf.find(e) == root)
        has_input = INPUT in edges
        coupled = root in coupled_roots
        feeds_pool = root == pool_root
        head_out = root == head_root
        internal_block = None
        if not (coupled or has_input or feeds_pool or head_out) and out_nodes:
            attrs = [graph.node(nid).attrs for nid in out_nodes]
            blocks = {a.get("block") for a in attrs}
            if (len(blocks) == 1 and None not in blocks
                    and not any(a.get("block_out") for a in attrs)):
                internal_block = blocks.pop()
        size = channels[edges[0]]
        groups.append(ChannelGroup(
            gid=f"grp:{edges[0]}", size=size, edges=tuple(edges),
            members=members, vector_params=vparams, vector_buffers=vbuffers,
            out_nodes=out_nodes, coupled=coupled, has_input=has_input,
            feeds_pool=feeds_pool, head_out=head_out,
            internal_block=internal_block))
    groups.sort(key=lambda g: _edge_order(graph)[g.edges[0]])
    return groups


def _edge_order(graph: LayerGraph) -> Dict[str, int]:
    order = {INPUT: -1}
    for i, n in enumerate(graph.nodes):
        order[n.id] = i
    return order


# scoring ---------------------------------------------------------------------


def score_filters_l1(weight) -> np.ndarray:
    """Per-output-filter sum of absolute values of a 4-D conv weight."""
    data = weight.data if isinstance(weight, Tensor) else np.asarray(weight)
    if data.ndim != 4:
        raise PruningError(f"expected a 4-D conv weight, got shape {data.shape}")
    return np.abs(data).sum(axis=(1, 2, 3))


def group_scores(graph: LayerGraph, group: ChannelGroup) -> np.ndarray:
    """Group importance: summed filter L1 over all out-axis members."""
    total = np.zeros(group.size)
    for pname, role in group.members:
        if role != "out":
            continue
        p = graph.params[pname].data
        if p.ndim == 4:
            total += np.abs(p).sum(axis=(1, 2, 3))
        else:
            total += np.abs(p).sum(axis=1)
    return total


# plans -------------------------------------------------------------------------


@dataclass(frozen=True)
class PruningPlan:
    """Pure description of what survives pruning."""
    scheme: str                          # normal | residual | cd_style | unstructured
    keep_ratio: float                    # keep fraction (structured) or 1-sparsity
    keep: Dict[str, Tuple[int, ...]]     # group id -> sorted kept indices
    masks: Dict[str, np.ndarray]         # param name -> bool mask (unstructured)
    fingerprint: str                     # architecture hash of the source graph

    def to_json(self) -> str:
        doc = {
            "format": "minicompress-plan",
            "version": 1,
            "scheme": self.scheme,
            "keep_ratio": self.keep_ratio,
            "fingerprint": self.fingerprint,
            "groups": {gid: list(idx) for gid, idx in sorted(self.keep.items())},
            "masks": {
                name: {"shape": list(mask.shape),
                       "bits": base64.b64encode(
                           np.packbits(mask.reshape(-1))).decode()}
                for name, mask in sorted(self.masks.items())
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(doc: str) -> "PruningPlan":
        data = json.loads(doc)
        if data.get("format") != "minicompress-plan":
            raise PruningError("not a minicompress pruning plan")
        masks = {}
        for name, spec in data.get("masks", {}).items():
            shape = tuple(spec["shape"])
            count = int(np.prod(shape))
            bits = np.unpackbits(
                np.frombuffer(base64.b64decode(spec["bits"]), dtype=np.uint8),
                count=count)
            masks[name] = bits.astype(bool).reshape(shape)
        return PruningPlan(
            scheme=data["scheme"], keep_ratio=data["keep_ratio"],
            keep={gid: tuple(idx) for gid, idx in data.get("groups", {}).items()},
            masks=masks, fingerprint=data.get("fingerprint", ""))


def arch_fingerprint(graph: LayerGraph) -> str:
    return hashlib.sha256(graph.to_arch_json().encode()).hexdigest()[:16]


def cd_block_set(graph: LayerGraph) -> List[str]:
    """Blocks pruned by the cd_style scheme.

    A shallow contiguous run of ``floor(B/2)`` blocks starting right after
    the first stage (whose thin, heavily-reused channels stay intact), so
    deeper blocks are left untouched to absorb the accumulated error.
    """
    if not graph.blocks:
        raise PruningError("cd_style needs block-depth annotations on the graph")
    first_stage = graph.blocks[0].stage
    candidates = [b.id for b in graph.blocks if b.stage != first_stage]
    take = min(len(graph.blocks) // 2, len(candidates))
    return candidates[:take]


def _top_keep(scores: np.ndarray, count: int) -> Tuple[int, ...]:
    # stable sort on negated scores: ties keep the lower channel index
    order = np.argsort(-scores, kind="stable")
    return tuple(sorted(int(i) for i in order[:count]))


def make_plan(graph: LayerGraph, scheme: str, keep_ratio: float) -> PruningPlan:
    """Select kept channel indices per prunable group under ``scheme``."""
    if not 0.0 < keep_ratio <= 1.0:
        raise PruningError(f"keep_ratio must be in (0, 1], got {keep_ratio}")
    if scheme not in SCHEMES:
        raise PruningError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
    groups = resolve_channel_groups(graph)
    if scheme == "cd_style":
        cd_blocks = set(cd_block_set(graph))
        prunable = [g for g in groups if g.internal_block in cd_blocks]
    else:
        prunable = [g for g in groups if g.internal_block is not None]
        if scheme == "residual":
            prunable += [g for g in groups
                         if g.coupled and not (g.feeds_pool or g.has_input
                                               or g.head_out)]
    keep = {}
    for g in prunable:
        count = math.ceil(keep_ratio * g.size)
        keep[g.gid] = _top_keep(group_scores(graph, g), count)
    return PruningPlan(scheme=scheme, keep_ratio=keep_ratio, keep=keep,
                       masks={}, fingerprint=arch_fingerprint(graph))


def apply_plan(graph: LayerGraph, plan: PruningPlan) -> LayerGraph:
    """Slice weights into a genuinely smaller graph; the source is untouched."""
    if plan.fingerprint and plan.fingerprint != arch_fingerprint(graph):
        raise PruningError("plan was built for a different graph")
    groups = {g.gid: g for g in resolve_channel_groups(graph)}
    keep_of_edge: Dict[str, np.ndarray] = {}
    for gid, indices in plan.keep.items():
        if gid not in groups:
            raise PruningError(f"plan references unknown group {gid}")
        g = groups[gid]
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            raise PruningError(f"{gid}: empty keep set")
        if len(set(indices)) != idx.size:
            raise PruningError(f"{gid}: duplicate keep indices")
        if idx.min() < 0 or idx.max() >= g.size:
            raise PruningError(f"{gid}: keep index out of range [0, {g.size})")
        for e in g.edges:
            keep_of_edge[e] = idx

    def kept(edge: str, size: int) -> np.ndarray:
        return keep_of_edge.get(edge, np.arange(size))

    channels = graph.channels()
    new_nodes: List[LayerNode] = []
    new_params: Dict[str, Tensor] = {}
    new_buffers: Dict[str, np.ndarray] = {}
    for n in graph.nodes:
        a = dict(n.attrs)
        if n.kind == "conv":
            out_k = kept(n.id, a["out_channels"])
            in_k = kept(n.inputs[0], a["in_channels"])
            w = graph.params[f"{n.id}.weight"].data[out_k][:, in_k]
            new_params[f"{n.id}.weight"] = Tensor(w.copy(), requires_grad=True)
            a["out_channels"] = len(out_k)
            a["in_channels"] = len(in_k)
        elif n.kind == "depthwise_conv":
            out_k = kept(n.id, a["channels"])
            w = graph.params[f"{n.id}.weight"].data[out_k]
            new_params[f"{n.id}.weight"] = Tensor(w.copy(), requires_grad=True)
            a["channels"] = len(out_k)
        elif n.kind == "batchnorm":
            out_k = kept(n.id, a["channels"])
            for pname in ("gamma", "beta"):
                src = graph.params[f"{n.id}.{pname}"].data[out_k]
                new_params[f"{n.id}.{pname}"] = Tensor(src.copy(), requires_grad=True)
            for bname in ("running_mean", "running_var"):
                new_buffers[f"{n.id}.{bname}"] = \
                    graph.buffers[f"{n.id}.{bname}"][out_k].copy()
            a["channels"] = len(out_k)
        elif n.kind == "linear":
            out_k = kept(n.id, a["out_features"])
            in_k = kept(n.inputs[0], a["in_features"])
            w = graph.params[f"{n.id}.weight"].data[out_k][:, in_k]
            bias = graph.params[f"{n.id}.bias"].data[out_k]
            new_params[f"{n.id}.weight"] = Tensor(w.copy(), requires_grad=True)
            new_params[f"{n.id}.bias"] = Tensor(bias.copy(), requires_grad=True)
            a["out_features"] = len(out_k)
            a["in_features"] = len(in_k)
        new_nodes.append(LayerNode(n.id, n.kind, n.inputs, a))
    return LayerGraph(new_nodes, new_params, new_buffers, graph.input_shape,
                      graph.blocks, name=graph.name + f"/{plan.scheme}")


# unstructured ------------------------------------------------------------------


def magnitude_mask(graph: LayerGraph, sparsity: float) -> Dict[str, np.ndarray]:
    """Per conv weight, mask the ``ceil(sparsity * n)`` smallest magnitudes.

    BN and fully-connected parameters are never masked.  ``sparsity`` 0
    yields all-ones masks.
    """
    if not 0.0 <= sparsity < 1.0:
        raise PruningError(f"sparsity must be in [0, 1), got {sparsity}")
    masks: Dict[str, np.ndarray] = {}
    for n in graph.nodes:
        if n.kind not in ("conv", "depthwise_conv"):
            continue
        name = f"{n.id}.weight"
        w = graph.params[name].data
        mask = np.ones(w.size, dtype=bool)
        drop = math.ceil(sparsity * w.size)
        if drop:
            order = np.argsort(np.abs(w.reshape(-1)), kind="stable")
            mask[order[:drop]] = False
        masks[name] = mask.reshape(w.shape)
    return masks


def apply_masks(graph: LayerGraph, masks: Dict[str, np.ndarray]) -> None:
    for name, mask in masks.items():
        graph.params[name].data *= mask


def sparsity_schedule(target: float, step: float) -> List[float]:
    """Increasing sparsity levels ending exactly at ``target``."""
    if step <= 0:
        raise PruningError(f"schedule step must be positive, got {step}")
    if not 0.0 < target < 1.0:
        raise PruningError(f"target sparsity must be in (0, 1), got {target}")
    levels = []
    k = 1
    while step * k < target - 1e-12:
        levels.append(round(step * k, 12))
        k += 1
    levels.append(target)
    return levels


def progressive_unstructured(teacher: LayerGraph, images: np.ndarray,
                             mimic_cfg, target_sparsity: float = 0.9,
                             step: float = 0.2, inner_iters: int = 400,
                             final_iters: int = 4000, seed: int = 0,
                             augment: str = "none"):
    """Prune-then-mimic schedule toward a sparse student.

    At each sparsity level the masks are re-derived from the current weight
    magnitudes, applied, and the student mimics the teacher for
    ``inner_iters`` steps with masked entries forced back to zero after
    every optimizer update.  After the target level, ``final_iters`` more
    mimic iterations run.  Returns ``(student, masks, history)``.
    """
    from .mimic import train_mimic

    student = teacher.copy()
    levels = sparsity_schedule(target_sparsity, step)
    history = []
    masks: Dict[str, np.ndarray] = {}
    for li, level in enumerate(levels):
        masks = magnitude_mask(student, level)
        apply_masks(student, masks)

        def enforce(ms=masks):
            apply_masks(student, ms)

        cfg = replace(mimic_cfg, iterations=inner_iters)
        hist = train_mimic(teacher, student, images, cfg,
                           seed=seed + li, augment=augment, post_step=enforce)
        history.append({"sparsity": level, "loss": hist.losses})
    if final_iters:
        cfg = replace(mimic_cfg, iterations=final_iters)
        hist = train_mimic(teacher, student, images, cfg,
                           seed=seed + len(levels), augment=augment,
                           post_step=lambda: apply_masks(student, masks))
        history.append({"sparsity": target_sparsity, "loss": hist.losses})
    return student, masks, history
