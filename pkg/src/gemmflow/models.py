"""Bundled model descriptions with deterministic random weights.

* :func:`toy_detector` - 6 convs, 2 concats, 1 maxpool, 1 resize, one head.
* :func:`conv_only` - a plain same-padded conv stack.
* :func:`yolov7_tiny` - the YOLOv7-tiny topology (58 convs, ELAN blocks,
  SPP-style pooling, three detection heads) with random weights.
* :func:`synthetic_58conv` - the same topology at a small resolution,
  used for tuning-scale experiments.
"""
from __future__ import annotations

import numpy as np

from .graph_ir import (NMS, BoxDecode, Concat, Conv2D, Graph, MaxPool2D, Node, ResizeNearest,
                       Sigmoid, TensorSpec, infer_shape)

YOLO_ANCHORS = (
    ((10, 13), (16, 30), (33, 23)),
    ((30, 61), (62, 45), (59, 119)),
    ((116, 90), (156, 198), (373, 326)),
)


class GraphBuilder:
    """Small helper for writing float graphs by hand."""

    def __init__(self, hw, channels=3, seed=0, name="model", input_id="image"):
        h, w = (hw, hw) if isinstance(hw, int) else hw
        self.inputs = ((input_id, TensorSpec((1, h, w, channels))),)
        self.specs = dict(self.inputs)
        self.nodes = []
        self.rng = np.random.default_rng(seed)
        self.name = name
        self._count = {}

    def _id(self, prefix):
        k = self._count.get(prefix, 0)
        self._count[prefix] = k + 1
        return f"{prefix}{k}"

    def _add(self, op, inputs, node_id=None, **params):
        node_id = node_id or self._id(op.kind.lower() + "_")
        shape = infer_shape(node_id, op, [self.specs[t] for t in inputs])
        node = Node(node_id, op, tuple(inputs), TensorSpec(shape), **params)
        self.nodes.append(node)
        self.specs[node_id] = node.output
        return node_id

    def conv(self, x, cout, k=1, stride=1, act="leaky_relu", padding="same", node_id=None, bias=True):
        cin = self.specs[x].c
        std = np.sqrt(2.0 / (k * k * cin))
        weight = (self.rng.standard_normal((k, k, cin, cout)) * std).astype(np.float32)
        b = (self.rng.standard_normal(cout) * 0.05).astype(np.float32) if bias else None
        op = Conv2D(k, k, cout, stride, padding, bias, act)
        return self._add(op, [x], node_id or self._id("conv"), weight=weight, bias=b)

    def maxpool(self, x, k=2, stride=2, padding="valid", node_id=None):
        return self._add(MaxPool2D(k, stride, padding), [x], node_id)

    def resize(self, x, factor=2, node_id=None):
        return self._add(ResizeNearest(factor), [x], node_id)

    def concat(self, xs, node_id=None):
        return self._add(Concat(), list(xs), node_id)

    def add(self, a, b, node_id=None):
        from .graph_ir import Add
        return self._add(Add(), [a, b], node_id)

    def sigmoid(self, x, node_id=None):
        return self._add(Sigmoid(), [x], node_id)

    def decode(self, x, stride, anchors, nc, node_id=None):
        return self._add(BoxDecode(stride, anchors, nc), [x], node_id)

    def nms(self, xs, node_id="nms", **kw):
        return self._add(NMS(**kw), list(xs), node_id)

    def build(self, outputs, **meta) -> Graph:
        return Graph(self.inputs, tuple(self.nodes), tuple(outputs), name=self.name, metadata=meta)


def toy_detector(hw=64, num_classes=2, seed=0) -> Graph:
    b = GraphBuilder(hw, seed=seed, name="toy_detector")
    c1 = b.conv("image", 16, 3, 2)
    c2 = b.conv(c1, 32, 3, 2)
    p = b.maxpool(c2, 2, 2, node_id="pool")
    c3 = b.conv(p, 32, 3)
    c4 = b.conv(c3, 32, 1)
    cat1 = b.concat([c4, c3], node_id="cat1")
    c5 = b.conv(cat1, 64, 3, 2)
    up = b.resize(c5, 2, node_id="up")
    cat2 = b.concat([up, cat1], node_id="cat2")
    anchors = YOLO_ANCHORS[0]
    head = b.conv(cat2, len(anchors) * (5 + num_classes), 1, act="none", node_id="head")
    s = b.sigmoid(head, node_id="head_sigmoid")
    d = b.decode(s, 8, anchors, num_classes, node_id="head_decode")
    out = b.nms([d], conf_thresh=0.25, iou_thresh=0.45, max_det=50)
    return b.build([out])


def conv_only(hw=640, seed=0) -> Graph:
    b = GraphBuilder(hw, seed=seed, name="conv_only")
    x = b.conv("image", 16, 3, 2, act="relu6")
    x = b.conv(x, 32, 3, 2, act="relu6")
    x = b.conv(x, 32, 1, act="relu6")
    x = b.conv(x, 64, 3, 2, act="relu6")
    return b.build([x])


def _elan(b, x, c):
    """Two 1x1 branches, two stacked 3x3 convs, concat of four, 1x1 fuse."""
    a = b.conv(x, c, 1)
    bb = b.conv(x, c, 1)
    c3 = b.conv(bb, c, 3)
    c4 = b.conv(c3, c, 3)
    cat = b.concat([c4, c3, bb, a])
    return b.conv(cat, 2 * c, 1)


def yolov7_tiny(hw=640, num_classes=80, seed=0) -> Graph:
    """YOLOv7-tiny topology (LeakyReLU activations as in the pretrained model)."""
    b = GraphBuilder(hw, seed=seed, name="yolov7_tiny")
    x = b.conv("image", 32, 3, 2)                   # P1/2
    x = b.conv(x, 64, 3, 2)                         # P2/4
    x = _elan(b, x, 32)                             # 64
    p3 = _elan(b, b.maxpool(x), 64)                 # 128, P3/8
    p4 = _elan(b, b.maxpool(p3), 128)               # 256, P4/16
    p5 = _elan(b, b.maxpool(p4), 256)               # 512, P5/32

    # SPP-style block
    a = b.conv(p5, 256, 1)
    s = b.conv(p5, 256, 1)
    m5 = b.maxpool(s, 5, 1, "same")
    m9 = b.maxpool(s, 9, 1, "same")
    m13 = b.maxpool(s, 13, 1, "same")
    x = b.conv(b.concat([m13, m9, m5, s]), 256, 1)
    h37 = b.conv(b.concat([x, a]), 256, 1)

    up = b.resize(b.conv(h37, 128, 1), 2)
    x = b.concat([b.conv(p4, 128, 1), up])
    h47 = _elan(b, x, 64)                           # 128

    up = b.resize(b.conv(h47, 64, 1), 2)
    x = b.concat([b.conv(p3, 64, 1), up])
    h57 = _elan(b, x, 32)                           # 64

    x = b.concat([b.conv(h57, 128, 3, 2), h47])
    h65 = _elan(b, x, 64)                           # 128

    x = b.concat([b.conv(h65, 256, 3, 2), h37])
    h73 = _elan(b, x, 128)                          # 256

    feats = [b.conv(h57, 128, 3), b.conv(h65, 256, 3), b.conv(h73, 512, 3)]
    decoded = []
    for i, (f, stride, anchors) in enumerate(zip(feats, (8, 16, 32), YOLO_ANCHORS)):
        head = b.conv(f, len(anchors) * (5 + num_classes), 1, act="none", node_id=f"head{i}")
        sg = b.sigmoid(head, node_id=f"head{i}_sigmoid")
        decoded.append(b.decode(sg, stride, anchors, num_classes, node_id=f"head{i}_decode"))
    out = b.nms(decoded, conf_thresh=0.25, iou_thresh=0.45, max_det=100)
    return b.build([out])


def synthetic_58conv(hw=64, num_classes=2, seed=0) -> Graph:
    """YOLOv7-tiny topology at desk-scale resolution and class count."""
    g = yolov7_tiny(hw, num_classes=num_classes, seed=seed)
    return Graph(g.inputs, g.nodes, g.outputs, name="synthetic_58conv", metadata=g.metadata)
