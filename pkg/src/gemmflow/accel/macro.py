"""CISC-style macros: a tiled operation expanded with the default schedule and simulated."""
from __future__ import annotations

import numpy as np

from ..errors import ScheduleError
from .sim import execute_stream

MACROS = ("tiled_matmul", "tiled_conv")


def execute_macro(cfg, macro: str, operands: dict, functional=True):
    """Expand ``macro`` into RISC instructions and run them.

    ``tiled_matmul`` takes ``a`` (M x K int8), ``b`` (K x N int8) and optional
    ``bias`` (N int32) and ``requant`` (defaults to the identity).
    ``tiled_conv`` takes ``node`` (a quantized Conv2D), ``in_spec`` and ``x``.
    Returns ``(dram, report, stream, output)``.
    """
    from .. import scheduler as sch

    if macro == "tiled_matmul":
        a = np.asarray(operands["a"], np.int8)
        b = np.asarray(operands["b"], np.int8)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ScheduleError(f"matmul operand shapes {a.shape} x {b.shape} do not agree")
        m, k = a.shape
        n = b.shape[1]
        gemm = sch.Gemm(m, k, n)
        schedule = operands.get("schedule") or sch.default_gemm_schedule(gemm, cfg)
        lay = sch.Layout()
        addrs = {"a": lay.alloc("a", a.size, a.shape), "b": lay.alloc("b", b.size, b.shape),
                 "y": lay.alloc("y", m * n, (m, n))}
        bias = operands.get("bias")
        if bias is not None:
            addrs["bias"] = lay.alloc("bias", 4 * n, (n,), "i32")
        if sch.spills(gemm, cfg, schedule):
            addrs["scratch"] = lay.alloc("scratch", 4 * m * n, (m, n), "i32")
        stream = sch.lower_gemm(gemm, cfg, schedule, a_addr=addrs["a"], b_addr=addrs["b"],
                                c_addr=addrs["y"], bias_addr=addrs.get("bias"),
                                scratch_addr=addrs.get("scratch"),
                                requant=operands.get("requant") or sch.identity_requant())
        stream.buffers = lay.buffers
        dram = np.zeros(lay.top, np.uint8)
        sch.write_buffer(dram, lay.buffers["a"], a)
        sch.write_buffer(dram, lay.buffers["b"], b)
        if bias is not None:
            sch.write_buffer(dram, lay.buffers["bias"], np.asarray(bias, "<i4"))
    elif macro == "tiled_conv":
        node, in_spec = operands["node"], operands["in_spec"]
        stream = sch.lower_conv(node, cfg, operands.get("schedule"), in_spec=in_spec)
        dram = np.zeros(stream.dram_size, np.uint8)
        w, bias = sch.conv_params(node)
        sch.write_buffer(dram, stream.buffers["x"], np.asarray(operands["x"], np.int8))
        sch.write_buffer(dram, stream.buffers["w"], w)
        sch.write_buffer(dram, stream.buffers["b"], bias)
    else:
        raise ScheduleError(f"unknown macro {macro!r}; expected one of {MACROS}")
    dram, report = execute_stream(cfg, stream, dram, functional=functional)
    out = sch.read_buffer(dram, stream.buffers["y"]) if functional else None
    return dram, report, stream, out
