"""Model constructors: basic-block ResNets and MobileNetV2 geometry.

Geometries:

* ``resnet-34``     ImageNet geometry: 7x7/2 stem + 3x3/2 max pool, stages
                    of [3, 4, 6, 3] basic blocks at widths [64, 128, 256,
                    512] on 224x224 inputs.
* ``resnet-56``     CIFAR geometry: 3x3 stem, 3 stages of 9 basic blocks at
                    widths [16, 32, 64] on 32x32 inputs.
* ``resnet-tiny-8`` Desk geometry: 3x3/2 stem, 3 stages of 1 basic block at
                    widths [8, 16, 32] on 32x32 inputs (stem + 6 block convs
                    + head = 8 weighted layers).
* ``mobilenet-v2``  Inverted-residual geometry with expansion 6 and linear
                    bottlenecks; channel widths follow the usual
                    round-to-multiple-of-8 rule under a width multiplier.

Downsampling uses a strided 1x1 projection shortcut at stage boundaries.
All networks end in global average pooling plus one linear head.
Plain ReLU stands in for ReLU6 in MobileNetV2; no pretrained weights are
ever loaded, so the clamp difference has no effect here.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError
from .graph import INPUT, BlockInfo, LayerGraph, LayerNode, init_store


class _Builder:
    def __init__(self):
        self.nodes: List[LayerNode] = []
        self.blocks: List[BlockInfo] = []

    def _push(self, node_id, kind, src, attrs=None):
        srcs = (src,) if isinstance(src, str) else tuple(src)
        self.nodes.append(LayerNode(node_id, kind, srcs, attrs or {}))
        return node_id

    def conv(self, node_id, src, cin, cout, kernel, stride=1, padding=None,
             block=None, block_out=False):
        attrs = {"in_channels": cin, "out_channels": cout, "kernel": kernel,
                 "stride": stride,
                 "padding": kernel // 2 if padding is None else padding}
        if block is not None:
            attrs["block"] = block
            attrs["block_out"] = block_out
        return self._push(node_id, "conv", src, attrs)

    def dwconv(self, node_id, src, channels, kernel, stride=1, padding=None,
               block=None):
        attrs = {"channels": channels, "kernel": kernel, "stride": stride,
                 "padding": kernel // 2 if padding is None else padding}
        if block is not None:
            attrs["block"] = block
            attrs["block_out"] = False
        return self._push(node_id, "depthwise_conv", src, attrs)

    def bn(self, node_id, src, channels, block=None):
        attrs = {"channels": channels}
        if block is not None:
            attrs["block"] = block
        return self._push(node_id, "batchnorm", src, attrs)

    def relu(self, node_id, src):
        return self._push(node_id, "relu", src)

    def add(self, node_id, a, b):
        return self._push(node_id, "add", (a, b))

    def max_pool(self, node_id, src, kernel, stride, padding):
        return self._push(node_id, "max_pool", src,
                          {"kernel": kernel, "stride": stride, "padding": padding})

    def gap(self, node_id, src):
        return self._push(node_id, "global_avg_pool", src)

    def fc(self, node_id, src, din, dout):
        return self._push(node_id, "linear", src,
                          {"in_features": din, "out_features": dout})

    def block_done(self, bid, stage, out_node):
        self.blocks.append(BlockInfo(bid, stage, out_node))

    def finish(self, input_shape, name, precision, seed) -> LayerGraph:
        rng = np.random.default_rng(seed)
        params, buffers = init_store(self.nodes, rng, precision)
        return LayerGraph(self.nodes, params, buffers, input_shape,
                          self.blocks, name=name)


def _basic_block(b: _Builder, src: str, bid: str, stage: int,
                 cin: int, cout: int, stride: int) -> str:
    c1 = b.conv(f"{bid}.conv1", src, cin, cout, 3, stride, block=bid)
    n1 = b.bn(f"{bid}.bn1", c1, cout, block=bid)
    r1 = b.relu(f"{bid}.relu1", n1)
    c2 = b.conv(f"{bid}.conv2", r1, cout, cout, 3, 1, block=bid, block_out=True)
    n2 = b.bn(f"{bid}.bn2", c2, cout, block=bid)
    if stride != 1 or cin != cout:
        sc = b.conv(f"{bid}.proj", src, cin, cout, 1, stride, padding=0,
                    block=bid, block_out=True)
        shortcut = b.bn(f"{bid}.proj_bn", sc, cout, block=bid)
    else:
        shortcut = src
    added = b.add(f"{bid}.add", n2, shortcut)
    out = b.relu(f"{bid}.relu2", added)
    b.block_done(bid, stage, out)
    return out


_RESNET_GEOMETRY = {
    # depth: (stem kernel, stem stride, stem maxpool?, stage widths,
    #         blocks per stage, input size)
    34: (7, 2, True, (64, 128, 256, 512), (3, 4, 6, 3), 224),
    56: (3, 1, False, (16, 32, 64), (9, 9, 9), 32),
    "tiny-8": (3, 2, False, (8, 16, 32), (1, 1, 1), 32),
}


def build_resnet(depth, num_classes: int, precision: str = "double",
                 seed: int = 0) -> LayerGraph:
    """Basic-block residual network; ``depth`` is 34, 56, or ``"tiny-8"``."""
    if depth not in _RESNET_GEOMETRY:
        raise ConfigurationError(
            f"unsupported resnet depth {depth!r}; choose from "
            f"{sorted(map(str, _RESNET_GEOMETRY))}")
    stem_k, stem_s, stem_pool, widths, counts, size = _RESNET_GEOMETRY[depth]
    b = _Builder()
    c = b.conv("stem.conv", INPUT, 3, widths[0], stem_k, stem_s)
    n = b.bn("stem.bn", c, widths[0])
    cur = b.relu("stem.relu", n)
    if stem_pool:
        cur = b.max_pool("stem.pool", cur, 3, 2, 1)
    cin = widths[0]
    for stage, (width, count) in enumerate(zip(widths, counts), start=1):
        for idx in range(1, count + 1):
            stride = 2 if (stage > 1 and idx == 1) else 1
            cur = _basic_block(b, cur, f"s{stage}b{idx}", stage, cin, width, stride)
            cin = width
    cur = b.gap("pool", cur)
    b.fc("fc", cur, cin, num_classes)
    return b.finish((3, size, size), f"resnet-{depth}", precision, seed)


def _make_divisible(v: float, divisor: int = 8) -> int:
    new_v = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new_v < 0.9 * v:
        new_v += divisor
    return new_v


# (expansion, output channels, repeats, first stride)
_MNV2_SETTINGS = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2),
                  (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1))


def build_mobilenetv2(width_multiplier: float = 1.0, num_classes: int = 1000,
                      input_size: int = 224, precision: str = "double",
                      seed: int = 0) -> LayerGraph:
    """Inverted-residual network with linear bottlenecks."""
    if width_multiplier <= 0:
        raise ConfigurationError(
            f"width multiplier must be positive, got {width_multiplier}")
    b = _Builder()
    cin = _make_divisible(32 * width_multiplier)
    c = b.conv("stem.conv", INPUT, 3, cin, 3, 2)
    n = b.bn("stem.bn", c, cin)
    cur = b.relu("stem.relu", n)

    block_no = 0
    for stage, (t, cout_base, repeats, first_stride) in enumerate(_MNV2_SETTINGS,
                                                                  start=1):
        cout = _make_divisible(cout_base * width_multiplier)
        for idx in range(repeats):
            block_no += 1
            bid = f"m{block_no}"
            stride = first_stride if idx == 0 else 1
            hidden = int(round(cin * t))
            src = cur
            if t != 1:
                e = b.conv(f"{bid}.expand", src, cin, hidden, 1, padding=0,
                           block=bid)
                en = b.bn(f"{bid}.expand_bn", e, hidden, block=bid)
                cur = b.relu(f"{bid}.expand_relu", en)
            d = b.dwconv(f"{bid}.dw", cur, hidden, 3, stride, block=bid)
            dn = b.bn(f"{bid}.dw_bn", d, hidden, block=bid)
            dr = b.relu(f"{bid}.dw_relu", dn)
            p = b.conv(f"{bid}.project", dr, hidden, cout, 1, padding=0,
                       block=bid, block_out=True)
            pn = b.bn(f"{bid}.project_bn", p, cout, block=bid)
            if stride == 1 and cin == cout:
                cur = b.add(f"{bid}.add", pn, src)
            else:
                cur = pn
            b.block_done(bid, stage, cur)
            cin = cout

    last = _make_divisible(1280 * max(1.0, width_multiplier))
    h = b.conv("head.conv", cur, cin, last, 1, padding=0)
    hn = b.bn("head.bn", h, last)
    hr = b.relu("head.relu", hn)
    g = b.gap("pool", hr)
    b.fc("fc", g, last, num_classes)
    return b.finish((3, input_size, input_size),
                    f"mobilenet-v2-{width_multiplier}x", precision, seed)


def build_model(model_id: str, num_classes: int, precision: str = "double",
                seed: int = 0, input_size: Optional[int] = None) -> LayerGraph:
    """Construct a zoo model from its registry id."""
    if model_id == "resnet-34":
        return build_resnet(34, num_classes, precision, seed)
    if model_id == "resnet-56":
        return build_resnet(56, num_classes, precision, seed)
    if model_id == "resnet-tiny-8":
        return build_resnet("tiny-8", num_classes, precision, seed)
    if model_id == "mobilenet-v2":
        return build_mobilenetv2(1.0, num_classes,
                                 input_size=input_size or 224,
                                 precision=precision, seed=seed)
    raise ConfigurationError(f"unknown model id {model_id!r}")


MODEL_IDS = ("resnet-34", "resnet-56", "resnet-tiny-8", "mobilenet-v2")
