"""Model file format: JSON manifest plus a raw little-endian weights blob.

Manifest layout::

    {"format": "gemmflow-model", "version": 1, "name": ...,
     "inputs": [{"id", "shape", "dtype", "qparams"}], "outputs": [...],
     "weights": {"file": "<name>.bin", "size": <bytes>, "sha256": ...},
     "nodes": [{"id", "op": {"kind", ...attrs}, "inputs", "output",
                "weight_ref": [offset, length] | null, "weight_qparams", "requant"}]}

Real-valued parameters are written as decimal strings (``repr`` of the
float) so a load/save round trip never drifts.  Conv2D parameters are
stored as the weight tensor ``[Kh, Kw, Cin, Cout]`` followed by the bias
``[Cout]``: f32/f32 for float graphs, i8/i32 once quantized.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..errors import ModelError
from .core import (OPS, DType, Graph, Node, QuantParams, RequantSpec, TensorSpec,
                   expected_param_shapes)

FORMAT = "gemmflow-model"
VERSION = 1


def _num(x) -> str:
    return repr(float(x))


def _qp_to_json(qp):
    if qp is None:
        return None
    return {"scale": _num(qp.scale), "zero_point": qp.zero_point}


def _qp_from_json(d):
    if d is None:
        return None
    return QuantParams(float(d["scale"]), int(d["zero_point"]))


def _spec_to_json(spec: TensorSpec):
    return {"shape": list(spec.shape), "dtype": spec.dtype.value, "qparams": _qp_to_json(spec.qparams)}


def _spec_from_json(d):
    return TensorSpec(tuple(d["shape"]), DType(d["dtype"]), _qp_from_json(d.get("qparams")))


def _op_to_json(op):
    d = {"kind": op.kind}
    for f in dataclasses.fields(op):
        v = getattr(op, f.name)
        if isinstance(v, float):
            v = _num(v)
        elif f.name == "anchors":
            v = [[_num(a), _num(b)] for a, b in v]
        d[f.name] = v
    return d


def _op_from_json(d):
    d = dict(d)
    cls = OPS[d.pop("kind")]
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if f.name == "anchors":
            v = tuple((float(a), float(b)) for a, b in v)
        elif f.type in ("float",) or isinstance(f.default, float):
            v = float(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def _requant_to_json(rq):
    if rq is None:
        return None
    return {"multiplier_f16": _num(rq.multiplier_f16), "output_zero_point": rq.output_zero_point,
            "activation_clamp": None if rq.activation_clamp is None else list(rq.activation_clamp)}


def _requant_from_json(d):
    if d is None:
        return None
    clamp = d.get("activation_clamp")
    return RequantSpec(float(d["multiplier_f16"]), int(d["output_zero_point"]),
                       None if clamp is None else tuple(clamp))


def _param_dtypes(node_dtype: DType):
    if node_dtype == DType.i8:
        return np.dtype("<i1"), np.dtype("<i4")
    return np.dtype("<f4"), np.dtype("<f4")


def serialize(graph: Graph, blob_name: str = "weights.bin"):
    """Return (manifest dict, blob bytes)."""
    chunks, offset, nodes = [], 0, []
    for n in graph.nodes:
        ref = None
        if n.weight is not None or n.bias is not None:
            wdt, bdt = _param_dtypes(n.output.dtype)
            data = b""
            if n.weight is not None:
                data += np.ascontiguousarray(n.weight, dtype=wdt).tobytes()
            if n.bias is not None:
                data += np.ascontiguousarray(n.bias, dtype=bdt).tobytes()
            ref = [offset, len(data)]
            chunks.append(data)
            offset += len(data)
        nodes.append({
            "id": n.id,
            "op": _op_to_json(n.op),
            "inputs": list(n.inputs),
            "output": _spec_to_json(n.output),
            "weight_ref": ref,
            "weight_qparams": _qp_to_json(n.weight_qparams),
            "requant": _requant_to_json(n.requant),
        })
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "name": graph.name,
        "metadata": graph.metadata,
        "inputs": [dict(id=k, **_spec_to_json(v)) for k, v in graph.inputs],
        "outputs": list(graph.outputs),
        "weights": {"file": blob_name, "size": len(blob), "sha256": hashlib.sha256(blob).hexdigest()},
        "nodes": nodes,
    }
    return manifest, blob


def deserialize(manifest: dict, blob: bytes) -> Graph:
    if manifest.get("format") != FORMAT:
        raise ModelError(f"not a {FORMAT} manifest", field="format")
    if manifest.get("version") != VERSION:
        raise ModelError(f"unsupported model version {manifest.get('version')!r}", field="version")
    winfo = manifest.get("weights", {})
    if "size" in winfo and int(winfo["size"]) != len(blob):
        raise ModelError(f"blob size mismatch: manifest says {winfo['size']} bytes, file has {len(blob)}",
                         field="weights")
    if winfo.get("sha256") and hashlib.sha256(blob).hexdigest() != winfo["sha256"]:
        raise ModelError("blob checksum mismatch", field="weights")

    try:
        inputs = [(d["id"], _spec_from_json(d)) for d in manifest["inputs"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"bad graph input entry: {exc}", field="inputs") from exc
    specs = dict(inputs)
    nodes, extent = [], 0
    for d in manifest.get("nodes", []):
        nid = d.get("id", "?")
        field = "op"
        try:
            op = _op_from_json(d["op"])
            field = "output"
            out = _spec_from_json(d["output"])
            field = "weight_qparams"
            wq = _qp_from_json(d.get("weight_qparams"))
            field = "requant"
            rq = _requant_from_json(d.get("requant"))
            field = "inputs"
            ins = tuple(d["inputs"])
        except ModelError as exc:
            raise ModelError(str(exc), nid, field) from exc
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelError(f"parse error: {exc!r}", nid, field) from exc
        weight = bias = None
        ref = d.get("weight_ref")
        probe = Node(nid, op, ins, out)
        if any(t not in specs for t in ins):
            bad = next(t for t in ins if t not in specs)
            raise ModelError(f"dangling reference to {bad!r}", nid, "inputs")
        wshape, bshape = expected_param_shapes(probe, [specs[t] for t in ins])
        if ref is not None:
            off, length = int(ref[0]), int(ref[1])
            if off < 0 or length < 0 or off + length > len(blob):
                raise ModelError(f"blob size mismatch: weight_ref [{off}, {off + length}) "
                                 f"past blob end {len(blob)}", nid, "weight_ref")
            wdt, bdt = _param_dtypes(out.dtype)
            need = (int(np.prod(wshape)) * wdt.itemsize if wshape else 0) + \
                   (int(np.prod(bshape)) * bdt.itemsize if bshape else 0)
            if need != length:
                raise ModelError(f"blob size mismatch: weight_ref length {length} != expected {need}",
                                 nid, "weight_ref")
            pos = off
            if wshape:
                nb = int(np.prod(wshape)) * wdt.itemsize
                weight = np.frombuffer(blob, wdt, count=int(np.prod(wshape)), offset=pos).reshape(wshape)
                weight = weight.astype(wdt.newbyteorder("="))
                pos += nb
            if bshape:
                bias = np.frombuffer(blob, bdt, count=int(np.prod(bshape)), offset=pos)
                bias = bias.astype(bdt.newbyteorder("="))
            extent += length
        nodes.append(Node(nid, op, ins, out, weight, bias, wq, rq))
        specs[nid] = out
    if extent != len(blob):
        raise ModelError(f"blob size mismatch: weight refs cover {extent} bytes, blob has {len(blob)}",
                         field="weights")
    return Graph(tuple(inputs), tuple(nodes), tuple(manifest["outputs"]),
                 name=manifest.get("name", "model"), metadata=manifest.get("metadata") or {})


def save_model(graph: Graph, path) -> Path:
    """Write ``path`` (JSON) and a sibling ``.bin`` blob; returns the manifest path."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    manifest, blob = serialize(graph, blob_path.name)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path.write_bytes(blob)
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def load_model(path, weights=None) -> Graph:
    """Load and validate a model manifest; ``weights`` overrides the blob path."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"manifest is not valid JSON: {exc}") from exc
    if weights is None:
        weights = path.parent / manifest.get("weights", {}).get("file", path.with_suffix(".bin").name)
    blob = Path(weights).read_bytes() if os.path.exists(weights) else None
    if blob is None:
        raise FileNotFoundError(f"weights blob {weights} not found")
    return deserialize(manifest, blob)
