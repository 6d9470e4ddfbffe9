"""Functional and timing simulation of an instruction stream.

Timing is list scheduling in program order over three controllers
(load, execute, store).  Every instruction starts at the earliest cycle
that satisfies its controller's availability, the scoreboard (RAW, WAR
and WAW on scratchpad/accumulator rows and on DRAM pages), the DRAM bus
and the outstanding-request limit.  All of these are max/plus relations,
so shortening any latency or dropping a fence never delays anything.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from ..dsp_pack import packed_products
from ..errors import SimulationError
from ..graph_ir import QuantParams
from ..quantizer import quantize_array, requantize_array
from .config import AcceleratorConfig
from .isa import (ACC, SPAD, Compute, ConfigEx, ConfigLd, ConfigSt, Fence, Mvin, Mvout, Preload,
                  validate_stream)

PAGE = 64
_ELEM = {"i8": 1, "i32": 4, "f32": 4}
_NP = {"i8": np.int8, "i32": np.dtype("<i4"), "f32": np.dtype("<f4")}


@dataclass
class CycleReport:
    load_busy: int = 0
    exec_busy: int = 0
    store_busy: int = 0
    total: int = 0
    instructions: int = 0
    trace: list = field(default_factory=list)     # (index, controller, start, finish)

    def __add__(self, other: "CycleReport") -> "CycleReport":
        """Sequential composition (the second stream starts after the first retires)."""
        return CycleReport(self.load_busy + other.load_busy, self.exec_busy + other.exec_busy,
                           self.store_busy + other.store_busy, self.total + other.total,
                           self.instructions + other.instructions)

    def to_dict(self) -> dict:
        return {"load_busy": self.load_busy, "exec_busy": self.exec_busy,
                "store_busy": self.store_busy, "total": self.total, "instructions": self.instructions}


class _Busy:
    """Length of the union of intervals whose starts arrive in non-decreasing order."""

    def __init__(self):
        self.total = 0
        self.s = self.e = None

    def add(self, s, e):
        if self.e is None or s > self.e:
            if self.e is not None:
                self.total += self.e - self.s
            self.s, self.e = s, e
        else:
            self.e = max(self.e, e)

    def value(self):
        return self.total + (0 if self.e is None else self.e - self.s)


def pool_band(pool, origin, n_out):
    """Band-relative rows read by a pooled Mvout and their (out, window) index grid."""
    iy_lo, oy, ox0 = origin
    ox = ox0 + np.arange(n_out)
    d = np.arange(pool.kernel)
    iy = oy * pool.stride - pool.pad_top + d                              # (k,)
    ix = ox[:, None] * pool.stride - pool.pad_left + d[None, :]           # (n, k)
    ok_y = (iy >= 0) & (iy < pool.in_h)
    ok_x = (ix >= 0) & (ix < pool.in_w)
    rows = (iy[None, :, None] - iy_lo) * pool.in_w + ix[:, None, :]       # (n, ky, kx)
    valid = ok_y[None, :, None] & ok_x[:, None, :]
    if valid.any() and (iy[ok_y] < iy_lo).any():
        raise SimulationError("pooling window reaches above the loaded band")
    lo = int(rows[valid].min()) if valid.any() else 0
    hi = int(rows[valid].max()) + 1 if valid.any() else 0
    return rows, valid, lo, hi


def im2col_gather(dram, base, spec, row0, rows, col0, cols):
    """Gather a rows x cols block of the implicit patch matrix from an NHWC i8 tensor."""
    x = np.ndarray((spec.h, spec.w, spec.c), np.int8, buffer=dram, offset=base)
    m = row0 + np.arange(rows)
    k = col0 + np.arange(cols)
    oy, ox = np.divmod(m, spec.out_w)
    ky, rem = np.divmod(k, spec.kw * spec.c)
    kx, ci = np.divmod(rem, spec.c)
    iy = oy[:, None] * spec.stride - spec.pad_top + ky[None, :] * spec.dilation
    ix = ox[:, None] * spec.stride - spec.pad_left + kx[None, :] * spec.dilation
    ok = (iy >= 0) & (iy < spec.h) & (ix >= 0) & (ix < spec.w)
    out = np.full((rows, cols), spec.pad_value, dtype=np.int8)
    out[ok] = x[iy[ok], ix[ok], np.broadcast_to(ci, iy.shape)[ok]]
    return out


class Simulator:
    def __init__(self, cfg: AcceleratorConfig, dram, functional=True, trace=False):
        self.cfg = cfg
        self.functional = functional
        self.keep_trace = trace
        self.dram = dram
        d = cfg.dim
        if functional:
            self.spad = np.zeros((cfg.spad_rows, d), np.int8)
            self.acc = np.zeros((cfg.acc_rows, d), np.int64)
            self.weights = np.zeros((d, d), np.int64)
        self.preloaded = False
        self.c_target = None
        self.ld = {}
        self.st = {}
        self.ex = ConfigEx()
        # scoreboard: last write / read finish per row, per DRAM page
        self.w = {SPAD: np.zeros(cfg.spad_rows, np.int64), ACC: np.zeros(cfg.acc_rows, np.int64)}
        self.r = {SPAD: np.zeros(cfg.spad_rows, np.int64), ACC: np.zeros(cfg.acc_rows, np.int64)}
        npages = len(dram) // PAGE + 1
        self.dw = np.zeros(npages, np.int64)
        self.dr = np.zeros(npages, np.int64)
        self.free = {"load": 0, "exec": 0, "store": 0}
        self.busy = {"load": _Busy(), "exec": _Busy(), "store": _Busy()}
        self.bank_last = {c: np.zeros(cfg.spad_banks, np.int64) for c in self.free}
        self.bus_free = 0
        self.inflight = deque(maxlen=cfg.max_inflight)
        self.last_finish = 0
        self.trace = []

    # ------------------------------------------------------------------ timing helpers
    def _dram_range(self, lo, hi):
        if lo < 0 or hi > len(self.dram):
            raise SimulationError(f"DRAM access [{lo}, {hi}) outside image of {len(self.dram)} bytes")
        return lo // PAGE, (max(hi, lo + 1) - 1) // PAGE + 1

    def _banks(self, lo, hi):
        br = self.cfg.spad_bank_rows
        return lo // br, (max(hi, lo + 1) - 1) // br + 1

    def _schedule(self, ctrl, reads, writes, dreads, dwrites, duration, memory_bytes=None):
        """Place one instruction; reads/writes are (space, lo, hi), d* are DRAM (lo, hi)."""
        start = self.free[ctrl]
        for space, lo, hi in reads:
            if hi > lo:
                start = max(start, int(self.w[space][lo:hi].max()))
        for space, lo, hi in writes:
            if hi > lo:
                start = max(start, int(self.w[space][lo:hi].max()), int(self.r[space][lo:hi].max()))
        dpages = [self._dram_range(*x) for x in dreads]
        wpages = [self._dram_range(*x) for x in dwrites]
        for p0, p1 in dpages:
            start = max(start, int(self.dw[p0:p1].max()))
        for p0, p1 in wpages:
            start = max(start, int(self.dw[p0:p1].max()), int(self.dr[p0:p1].max()))
        banks = []
        if self.cfg.spad_ports < 2:
            # single-ported banks: no overlap with another controller on the same bank
            for space, lo, hi in list(reads) + list(writes):
                if space == SPAD and hi > lo:
                    banks.append(self._banks(lo, hi))
            for b0, b1 in banks:
                for other, last in self.bank_last.items():
                    if other != ctrl:
                        start = max(start, int(last[b0:b1].max()))
        if memory_bytes is not None:
            if len(self.inflight) == self.cfg.max_inflight:
                start = max(start, self.inflight[0])
            beats = math.ceil(memory_bytes / self.cfg.bus_bytes)
            b0 = max(start, self.bus_free)
            self.bus_free = b0 + beats
            finish = b0 + beats + self.cfg.dram_latency
            self.inflight.append(finish)
            self.free[ctrl] = start + 1
        else:
            finish = start + duration
            self.free[ctrl] = finish
        for space, lo, hi in reads:
            if hi > lo:
                np.maximum(self.r[space][lo:hi], finish, out=self.r[space][lo:hi])
        for space, lo, hi in writes:
            if hi > lo:
                self.w[space][lo:hi] = np.maximum(self.w[space][lo:hi], finish)
        for p0, p1 in dpages:
            np.maximum(self.dr[p0:p1], finish, out=self.dr[p0:p1])
        for p0, p1 in wpages:
            np.maximum(self.dw[p0:p1], finish, out=self.dw[p0:p1])
        for b0, b1 in banks:
            np.maximum(self.bank_last[ctrl][b0:b1], finish, out=self.bank_last[ctrl][b0:b1])
        self.busy[ctrl].add(start, finish)
        self.last_finish = max(self.last_finish, finish)
        return start, finish

    # ------------------------------------------------------------------ instructions
    def step(self, idx, ins):
        cfg = self.cfg
        if isinstance(ins, ConfigLd):
            self.ld[ins.slot] = ins
            return "load", self._schedule("load", (), (), (), (), 1)
        if isinstance(ins, ConfigSt):
            self.st[ins.slot] = ins
            return "store", self._schedule("store", (), (), (), (), 1)
        if isinstance(ins, ConfigEx):
            if ins.normalize:
                raise SimulationError("normalization is not modelled by this simulator")
            self.ex = ins
            return "exec", self._schedule("exec", (), (), (), (), 1)
        if isinstance(ins, Fence):
            t = self.last_finish
            for c in self.free:
                self.free[c] = max(self.free[c], t)
            return None, (t, t)
        if isinstance(ins, Mvin):
            return "load", self._mvin(ins)
        if isinstance(ins, Mvout):
            return "store", self._mvout(ins)
        if isinstance(ins, Preload):
            return "exec", self._preload(ins)
        if isinstance(ins, Compute):
            return "exec", self._compute(ins)
        raise SimulationError(f"#{idx}: unknown instruction {ins!r}")

    def _rows_check(self, local, rows):
        limit = self.cfg.spad_rows if local.space == SPAD else self.cfg.acc_rows
        if local.row + rows > limit:
            raise SimulationError(f"local range {local} +{rows} exceeds {limit} rows")

    def _mvin(self, ins):
        ld = self.ld.get(ins.slot)
        if ld is None:
            raise SimulationError(f"Mvin uses unconfigured load slot {ins.slot}")
        self._rows_check(ins.local, ins.rows)
        es = _ELEM[ld.dtype]
        if ld.im2col is not None:
            s = ld.im2col
            lo, hi = ins.dram_addr, ins.dram_addr + s.h * s.w * s.c
        else:
            lo = ins.dram_addr
            hi = ins.dram_addr + (ins.rows - 1) * ld.stride + ins.cols * es
        nbytes = ins.rows * ins.cols * es
        space = ins.local.space
        writes = [(space, ins.local.row, ins.local.row + ins.rows)]
        reads = writes if (space == ACC and ins.local.accumulate) else ()
        t = self._schedule("load", reads, writes, [(lo, hi)], (), 0, memory_bytes=nbytes)
        if self.functional:
            self._dram_range(lo, hi)
            if ld.im2col is not None:
                data = im2col_gather(self.dram, ins.dram_addr, ld.im2col, ins.row0, ins.rows,
                                     ins.col0, ins.cols)
            else:
                data = np.ndarray((ins.rows, ins.cols), _NP[ld.dtype], buffer=self.dram,
                                  offset=ins.dram_addr, strides=(ld.stride, es))
                if ld.dtype == "f32":
                    if ld.scale is None:
                        raise SimulationError("f32 load requires a quantization scale")
                    data = quantize_array(data, QuantParams(ld.scale, ld.zero_point))
            r0, r1 = ins.local.row, ins.local.row + ins.rows
            if space == SPAD:
                if data.dtype != np.int8:
                    raise SimulationError("only int8 data can be moved into the scratchpad")
                self.spad[r0:r1, :ins.cols] = data
                self.spad[r0:r1, ins.cols:] = 0
            elif ins.local.accumulate:
                self.acc[r0:r1, :ins.cols] += data
            else:
                self.acc[r0:r1, :ins.cols] = data
                self.acc[r0:r1, ins.cols:] = 0
        return t

    def _mvout(self, ins):
        st = self.st.get(ins.slot)
        if st is None:
            raise SimulationError(f"Mvout uses unconfigured store slot {ins.slot}")
        space = ins.local.space
        es = 4 if ins.raw else 1
        if ins.pool_origin is not None:
            if st.pool is None or space != SPAD:
                raise SimulationError("pooled Mvout needs a pool configuration and a scratchpad source")
            rows, valid, b0, b1 = pool_band(st.pool, ins.pool_origin, ins.rows)
            reads = [(SPAD, ins.local.row + b0, ins.local.row + b1)]
            self._rows_check(ins.local, b1)
        else:
            self._rows_check(ins.local, ins.rows)
            reads = [(space, ins.local.row, ins.local.row + ins.rows)]
        lo = ins.dram_addr
        hi = ins.dram_addr + (ins.rows - 1) * st.stride + ins.cols * es
        t = self._schedule("store", reads, (), (), [(lo, hi)], 0, memory_bytes=ins.rows * ins.cols * es)
        if self.functional:
            self._dram_range(lo, hi)
            r0 = ins.local.row
            if ins.pool_origin is not None:
                band = self.spad[r0 + b0:r0 + b1, :ins.cols]
                idx = np.where(valid, rows - b0, 0)
                vals = band[idx]                                   # (n, ky, kx, cols)
                vals = np.where(valid[..., None], vals, np.int8(-128))
                data = vals.max(axis=(1, 2)).astype(np.int8)
            elif space == SPAD:
                data = self.spad[r0:r0 + ins.rows, :ins.cols]
            elif ins.raw:
                data = self.acc[r0:r0 + ins.rows, :ins.cols].astype("<i4")
            else:
                if self.ex.requant is None:
                    raise SimulationError("accumulator Mvout without a requantization config")
                data = requantize_array(self.acc[r0:r0 + ins.rows, :ins.cols], self.ex.requant)
            out = np.ndarray((ins.rows, ins.cols), data.dtype, buffer=self.dram, offset=ins.dram_addr,
                             strides=(st.stride, es))
            out[...] = data
        return t

    def _preload(self, ins):
        cfg = self.cfg
        if ins.c_local.space != ACC:
            raise SimulationError("Preload destination must be in the accumulator")
        self.c_target = ins.c_local
        if ins.b_local is None:
            if not self.preloaded:
                raise SimulationError("Preload keeps weights but none are latched")
            return self._schedule("exec", (), (), (), (), 1)
        self._rows_check(ins.b_local, ins.rows)
        reads = [(SPAD, ins.b_local.row, ins.b_local.row + ins.rows)]
        t = self._schedule("exec", reads, (), (), (), cfg.dim + cfg.spad_read_delay)
        self.preloaded = True
        if self.functional:
            wt = np.zeros((cfg.dim, cfg.dim), np.int64)
            wt[:ins.rows, :ins.cols] = self.spad[ins.b_local.row:ins.b_local.row + ins.rows, :ins.cols]
            self.weights = wt.T.copy() if self.ex.transpose_b else wt
        return t

    def _compute(self, ins):
        cfg = self.cfg
        if not self.preloaded or self.c_target is None:
            raise SimulationError("Compute issued without a preceding Preload")
        if ins.c_local is not None:
            self.c_target = ins.c_local
        c = self.c_target
        self._rows_check(ins.a_local, ins.rows)
        self._rows_check(c, ins.rows)
        reads = [(SPAD, ins.a_local.row, ins.a_local.row + ins.rows)]
        if ins.accumulate:
            reads.append((ACC, c.row, c.row + ins.rows))
        writes = [(ACC, c.row, c.row + ins.rows)]
        t = self._schedule("exec", reads, writes, (), (), ins.rows + 2 * cfg.dim + cfg.spad_read_delay)
        if self.functional:
            a = self.spad[ins.a_local.row:ins.a_local.row + ins.rows, :ins.cols].astype(np.int64)
            w = self.weights[:ins.cols]
            if cfg.dsp_packing:
                hi, lo = packed_products(w[:, 0::2][None], w[:, 1::2][None], a[:, :, None])
                prod = np.empty((ins.rows, cfg.dim), np.int64)
                prod[:, 0::2] = hi.sum(axis=1)
                prod[:, 1::2] = lo.sum(axis=1)
            else:
                prod = a @ w
            if cfg.saturate_outputs:
                lim = 1 << (cfg.output_bits - 1)
                prod = np.clip(prod, -lim, lim - 1)
            sl = slice(c.row, c.row + ins.rows)
            if ins.accumulate:
                self.acc[sl] += prod
            else:
                self.acc[sl] = prod
        return t

    def run(self, stream) -> CycleReport:
        for idx, ins in enumerate(stream):
            ctrl, (s, f) = self.step(idx, ins)
            if self.keep_trace:
                self.trace.append((idx, ctrl, s, f))
        return CycleReport(self.busy["load"].value(), self.busy["exec"].value(),
                           self.busy["store"].value(), self.last_finish, len(stream), self.trace)


def execute_stream(cfg: AcceleratorConfig, stream, dram=None, functional=True, trace=False):
    """Run ``stream``; returns (new DRAM image, CycleReport).  The input image is not modified."""
    validate_stream(cfg, stream)
    size = max(getattr(stream, "dram_size", 0), 0)
    if dram is None:
        dram = np.zeros(size, np.uint8)
    else:
        dram = np.frombuffer(bytes(dram), np.uint8).copy() if not isinstance(dram, np.ndarray) \
            else dram.astype(np.uint8, copy=True)
    sim = Simulator(cfg, dram, functional=functional, trace=trace)
    report = sim.run(list(stream))
    return sim.dram, report


def stream_footprint(stream) -> dict:
    """Distinct scratchpad / accumulator rows an (already validated) stream touches."""
    rows = {SPAD: set(), ACC: set()}
    c_row = None
    for ins in stream:
        if isinstance(ins, Mvin):
            rows[ins.local.space].update(range(ins.local.row, ins.local.row + ins.rows))
        elif isinstance(ins, Mvout) and ins.pool_origin is None:
            rows[ins.local.space].update(range(ins.local.row, ins.local.row + ins.rows))
        elif isinstance(ins, Preload):
            c_row = ins.c_local.row
            if ins.b_local is not None:
                rows[SPAD].update(range(ins.b_local.row, ins.b_local.row + ins.rows))
        elif isinstance(ins, Compute):
            if ins.c_local is not None:
                c_row = ins.c_local.row
            rows[SPAD].update(range(ins.a_local.row, ins.a_local.row + ins.rows))
            rows[ACC].update(range(c_row, c_row + ins.rows))
    return {"spad_rows": len(rows[SPAD]), "acc_rows": len(rows[ACC])}
