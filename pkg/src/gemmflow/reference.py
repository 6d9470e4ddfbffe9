"""Reference (functional) executor for float and quantized graphs.

One pass over the graph in topological order; i8 nodes use exact integer
arithmetic and the same requantization kernel as the accelerator model,
f32 nodes use float32 numpy.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .graph_ir import DType, Graph, same_pad
from .quantizer import dequantize_array, quantize_array, requantize_array


def im2col(x, kh, kw, stride, padding, pad_value=0):
    """(H, W, C) -> (Ho*Wo, Kh*Kw*C) patch matrix, patches ordered (kh, kw, c)."""
    h, w, c = x.shape
    pt, pb = same_pad(h, kh, stride, padding)
    pl, pr = same_pad(w, kw, stride, padding)
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0)), constant_values=pad_value)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride]   # Ho, Wo, C, kh, kw
    ho, wo = win.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(ho * wo, kh * kw * c), (ho, wo)


def conv2d_f32(x, op, weight, bias):
    cols, (ho, wo) = im2col(x[0], op.kh, op.kw, op.stride, op.padding, 0.0)
    y = cols @ weight.reshape(-1, op.cout)
    if bias is not None:
        y = y + bias
    y = y.astype(np.float32)
    if op.activation == "relu6":
        y = np.clip(y, 0.0, 6.0)
    elif op.activation == "leaky_relu":
        y = np.where(y > 0, y, np.float32(op.alpha) * y)
    return y.reshape(1, ho, wo, op.cout).astype(np.float32)


def conv2d_acc(x_q, op, weight_q, bias_i32, in_zp):
    """Exact i32 accumulators of a quantized conv (padding with the input zero point)."""
    cols, (ho, wo) = im2col(x_q[0], op.kh, op.kw, op.stride, op.padding, in_zp)
    # |sum| < 2**53, so the float64 product is exact
    acc = cols.astype(np.float64) @ weight_q.reshape(-1, op.cout).astype(np.float64)
    acc = acc.astype(np.int64)
    if bias_i32 is not None:
        acc += bias_i32.astype(np.int64)
    return acc.reshape(1, ho, wo, op.cout)


def maxpool(x, op):
    _, h, w, c = x.shape
    low = -np.inf if x.dtype.kind == "f" else np.iinfo(x.dtype).min
    pt, pb = same_pad(h, op.kernel, op.stride, op.padding)
    pl, pr = same_pad(w, op.kernel, op.stride, op.padding)
    xp = np.pad(x[0], ((pt, pb), (pl, pr), (0, 0)), constant_values=low)
    win = sliding_window_view(xp, (op.kernel, op.kernel), axis=(0, 1))[::op.stride, ::op.stride]
    return win.max(axis=(3, 4))[None].astype(x.dtype)


def resize_nearest(x, factor):
    return np.repeat(np.repeat(x, factor, axis=1), factor, axis=2)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float32)
    return (np.float32(1.0) / (np.float32(1.0) + np.exp(-x))).astype(np.float32)


def box_decode(x, op):
    """YOLOv5/v7-style decode -> rows [cx, cy, w, h, obj, cls...], ordered (anchor, y, x)."""
    _, h, w, _ = x.shape
    k = op.row_width
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float32), np.arange(w, dtype=np.float32), indexing="ij")
    stride = np.float32(op.stride)
    rows = []
    for a, (aw, ah) in enumerate(op.anchors):
        t = x[0, :, :, a * k:(a + 1) * k].astype(np.float32)
        out = np.empty_like(t)
        out[..., 0] = (2 * t[..., 0] - np.float32(0.5) + gx) * stride
        out[..., 1] = (2 * t[..., 1] - np.float32(0.5) + gy) * stride
        out[..., 2] = (2 * t[..., 2]) ** 2 * np.float32(aw)
        out[..., 3] = (2 * t[..., 3]) ** 2 * np.float32(ah)
        out[..., 4:] = t[..., 4:]
        rows.append(out.reshape(-1, k))
    return np.concatenate(rows)[None, None].astype(np.float32)


def box_iou(box, boxes):
    """IoU of one xyxy box against an (n, 4) array."""
    x1 = np.maximum(box[0], boxes[:, 0])
    y1 = np.maximum(box[1], boxes[:, 1])
    x2 = np.minimum(box[2], boxes[:, 2])
    y2 = np.minimum(box[3], boxes[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area = (box[2] - box[0]) * (box[3] - box[1])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (area + areas - inter)


def nms(decoded, op):
    """Greedy class-agnostic NMS -> (1, 1, n, 6) rows [x1, y1, x2, y2, score, class]."""
    rows = np.concatenate([d[0, 0] for d in decoded]).astype(np.float64)
    if rows.shape[1] > 5:
        cls = rows[:, 5:]
        cls_id = cls.argmax(axis=1)
        score = rows[:, 4] * cls.max(axis=1)
    else:
        cls_id = np.zeros(len(rows), dtype=np.int64)
        score = rows[:, 4]
    boxes = np.stack([rows[:, 0] - rows[:, 2] / 2, rows[:, 1] - rows[:, 3] / 2,
                      rows[:, 0] + rows[:, 2] / 2, rows[:, 1] + rows[:, 3] / 2], axis=1)
    ok = (score >= op.conf_thresh) & (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    idx = np.flatnonzero(ok)
    # score descending, ties by original position
    idx = idx[np.lexsort((idx, -score[idx]))]
    keep = []
    for i in idx:
        if keep and (box_iou(boxes[i], boxes[keep]) > op.iou_thresh).any():
            continue
        keep.append(i)
        if len(keep) == op.max_det:
            break
    out = np.zeros((len(keep), 6), dtype=np.float32)
    if keep:
        out[:, :4] = boxes[keep]
        out[:, 4] = score[keep]
        out[:, 5] = cls_id[keep]
    return out[None, None]


def eval_node(n, args):
    """Evaluate one node given its input arrays."""
    kind = n.kind
    quant = n.output.dtype == DType.i8
    if kind == "Conv2D":
        if quant:
            in_zp = n.inputs_qparams[0].zero_point
            acc = conv2d_acc(args[0], n.op, n.weight, n.bias, in_zp)
            return requantize_array(acc, n.requant)
        return conv2d_f32(args[0], n.op, n.weight, n.bias)
    if kind == "MaxPool2D":
        return maxpool(args[0], n.op)
    if kind == "ResizeNearest":
        return resize_nearest(args[0], n.op.factor)
    if kind == "Concat":
        return np.concatenate(args, axis=3)
    if kind == "Add":
        if quant:
            acc = args[0].astype(np.int64) + args[1].astype(np.int64) + n.bias.astype(np.int64)
            return requantize_array(acc, n.requant)
        return (args[0] + args[1]).astype(np.float32)
    if kind == "Quantize":
        return quantize_array(args[0], n.output.qparams)
    if kind == "Dequantize":
        return dequantize_array(args[0], n.inputs_qparams[0])
    if kind == "Sigmoid":
        return sigmoid(args[0])
    if kind == "BoxDecode":
        return box_decode(args[0], n.op)
    if kind == "NMS":
        return nms(args, n.op)
    raise NotImplementedError(kind)


class _Bound:
    """Node view carrying the qparams of its inputs."""

    def __init__(self, node, in_qparams):
        self._node = node
        self.inputs_qparams = in_qparams

    def __getattr__(self, name):
        return getattr(self._node, name)


def as_inputs(g: Graph, inputs):
    if isinstance(inputs, dict):
        return dict(inputs)
    (name, _), = g.inputs
    return {name: inputs}


def run_graph(g: Graph, inputs, capture=False) -> dict:
    """Execute ``g``; returns graph outputs (or every tensor when ``capture``)."""
    values = {}
    for name, spec in g.inputs:
        arr = np.asarray(as_inputs(g, inputs)[name])
        if arr.shape != spec.shape:
            raise ValueError(f"input {name!r} has shape {arr.shape}, expected {spec.shape}")
        values[name] = arr.astype(spec.dtype.numpy)
    specs = g.tensor_specs()
    for n in g.nodes:
        bound = _Bound(n, [specs[t].qparams for t in n.inputs])
        values[n.id] = eval_node(bound, [values[t] for t in n.inputs])
    if capture:
        return values
    return {t: values[t] for t in g.outputs}
