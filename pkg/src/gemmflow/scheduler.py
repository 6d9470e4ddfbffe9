"""Lowering of quantized graph nodes to instruction streams, and the schedule space.

Convolutions become an im2col matrix multiply ``(M x K) @ (K x N)`` with
``M = Hout*Wout``, ``K = Kh*Kw*Cin`` and ``N = Cout``.  The product is
tiled in blocks of ``dim``: a tile spans ``tile_i`` x ``tile_k`` blocks of
A, ``tile_k`` x ``tile_j`` blocks of B and ``tile_i`` x ``tile_j`` blocks
of the output held in the accumulator.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .accel.config import AcceleratorConfig
from .accel.isa import (Buffer, Compute, ConfigEx, ConfigLd, ConfigSt, Fence, Im2col, InstructionStream,
                        Mvin, Mvout, Pool, Preload, acc, spad)
from .errors import ScheduleError
from .graph_ir import DType, Node, RequantSpec, TensorSpec, same_pad

LOOP_ORDERS = tuple(itertools.permutations("ijk"))
ALIGN = 64


@dataclass(frozen=True, order=True)
class Schedule:
    tile_i: int
    tile_j: int
    tile_k: int
    loop_order: tuple = ("i", "j", "k")
    double_buffer: bool = False

    def __post_init__(self):
        object.__setattr__(self, "loop_order", tuple(self.loop_order))
        if min(self.tile_i, self.tile_j, self.tile_k) < 1:
            raise ScheduleError("tile sizes must be positive")
        if sorted(self.loop_order) != ["i", "j", "k"]:
            raise ScheduleError(f"loop order {self.loop_order} is not a permutation of (i, j, k)")

    def key(self):
        """Lexicographic tie-break key."""
        return (self.tile_i, self.tile_j, self.tile_k, "".join(self.loop_order), self.double_buffer)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loop_order"] = "".join(self.loop_order)
        return d

    @classmethod
    def from_dict(cls, d) -> "Schedule":
        return cls(int(d["tile_i"]), int(d["tile_j"]), int(d["tile_k"]), tuple(d["loop_order"]),
                   bool(d["double_buffer"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text) -> "Schedule":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Gemm:
    """Problem extents of one tiled matrix multiply."""
    m: int
    k: int
    n: int

    def blocks(self, dim):
        return math.ceil(self.m / dim), math.ceil(self.k / dim), math.ceil(self.n / dim)


def spad_footprint(s: Schedule, dim: int) -> int:
    """Scratchpad bytes used by a schedule."""
    return (s.tile_i * s.tile_k + s.tile_k * s.tile_j) * dim * dim * (2 if s.double_buffer else 1)


def acc_footprint(s: Schedule, dim: int) -> int:
    return s.tile_i * s.tile_j * dim * dim * 4


def legality_error(s: Schedule, cfg: AcceleratorConfig):
    """None if legal, else the name and figures of the violated constraint."""
    sp = spad_footprint(s, cfg.dim)
    if sp > cfg.spad_bytes:
        halved = " (doubled for double buffering)" if s.double_buffer else ""
        return f"scratchpad footprint {sp} B{halved} exceeds {cfg.spad_bytes} B"
    ac = acc_footprint(s, cfg.dim)
    if ac > cfg.acc_bytes:
        return f"accumulator footprint {ac} B exceeds {cfg.acc_bytes} B"
    return None


def is_legal(s: Schedule, cfg: AcceleratorConfig) -> bool:
    return legality_error(s, cfg) is None


def check_legal(s: Schedule, cfg: AcceleratorConfig):
    err = legality_error(s, cfg)
    if err:
        raise ScheduleError(f"illegal schedule {s.to_dict()}: {err}")


def legal_tiles(gemm: Gemm, cfg: AcceleratorConfig, double_buffer=False):
    """All legal (tile_i, tile_j, tile_k) not exceeding the problem's block counts."""
    bm, bk, bn = gemm.blocks(cfg.dim)
    out = []
    for ti in range(1, bm + 1):
        for tj in range(1, bn + 1):
            if acc_footprint(Schedule(ti, tj, 1), cfg.dim) > cfg.acc_bytes:
                break
            for tk in range(1, bk + 1):
                if not is_legal(Schedule(ti, tj, tk, double_buffer=double_buffer), cfg):
                    break
                out.append((ti, tj, tk))
    return out


def default_gemm_schedule(gemm: Gemm, cfg: AcceleratorConfig) -> Schedule:
    """Largest tile_k, then tile_j, then tile_i; order (i, j, k); single buffering."""
    bm, bk, bn = gemm.blocks(cfg.dim)
    best = max(legal_tiles(gemm, cfg), key=lambda t: (t[2], t[1], t[0]))
    return Schedule(best[0], best[1], best[2])


# ----------------------------------------------------------------------------- problem geometry

def conv_geometry(node: Node, in_spec: TensorSpec):
    op = node.op
    pt, _ = same_pad(in_spec.h, op.kh, op.stride, op.padding)
    pl, _ = same_pad(in_spec.w, op.kw, op.stride, op.padding)
    out = node.output
    gemm = Gemm(out.h * out.w, op.kh * op.kw * in_spec.c, op.cout)
    zp = in_spec.qparams.zero_point if in_spec.qparams is not None else 0
    spec = Im2col(in_spec.h, in_spec.w, in_spec.c, op.kh, op.kw, op.stride, pt, pl, out.w, 1, zp)
    return gemm, spec


def default_schedule(node: Node, cfg: AcceleratorConfig, in_spec: TensorSpec = None) -> Schedule:
    """Default heuristic schedule for a Conv2D (or a raw ``Gemm``)."""
    if isinstance(node, Gemm):
        return default_gemm_schedule(node, cfg)
    if in_spec is None:
        raise ScheduleError("input spec required to size a convolution")
    return default_gemm_schedule(conv_geometry(node, in_spec)[0], cfg)


# ----------------------------------------------------------------------------- layouts

def _align(x):
    return (x + ALIGN - 1) // ALIGN * ALIGN


class Layout:
    """Bump allocator for DRAM buffers."""

    def __init__(self, base=0):
        self.top = base
        self.buffers = {}

    def alloc(self, name, nbytes, shape=(), dtype="i8"):
        buf = Buffer(self.top, int(nbytes), tuple(shape), dtype)
        self.buffers[name] = buf
        self.top = _align(self.top + max(int(nbytes), 1))
        return buf.addr


def conv_params(node: Node):
    """(B matrix bytes [K x N] i8, bias bytes [N] i32) as laid out in DRAM."""
    w = np.ascontiguousarray(node.weight, dtype=np.int8).reshape(-1, node.op.cout)
    b = np.zeros(node.op.cout, "<i4") if node.bias is None else np.asarray(node.bias, "<i4")
    return w, b


def write_buffer(dram: np.ndarray, buf: Buffer, arr):
    data = np.ascontiguousarray(arr).view(np.uint8).reshape(-1)
    if data.size != buf.nbytes:
        raise ScheduleError(f"buffer of {buf.nbytes} B cannot hold {data.size} B")
    dram[buf.addr:buf.addr + buf.nbytes] = data


def read_buffer(dram: np.ndarray, buf: Buffer, dtype=None):
    dt = {"i8": np.int8, "i32": "<i4", "f32": "<f4"}[dtype or buf.dtype]
    return np.frombuffer(dram[buf.addr:buf.addr + buf.nbytes].tobytes(), dt).reshape(buf.shape)


# ----------------------------------------------------------------------------- gemm lowering

def lower_gemm(gemm: Gemm, cfg: AcceleratorConfig, schedule: Schedule, *, a_addr, b_addr, c_addr,
               bias_addr=None, scratch_addr=None, requant=None, im2col=None, a_stride=None,
               c_stride=None) -> InstructionStream:
    """Tiled ``C = requant(A @ B + bias)``; returns a stream (buffers left to the caller)."""
    check_legal(schedule, cfg)
    d = cfg.dim
    bm, bk, bn = gemm.blocks(d)
    s = schedule
    ti, tj, tk = min(s.tile_i, bm), min(s.tile_j, bn), min(s.tile_k, bk)
    nti, ntj, ntk = math.ceil(bm / ti), math.ceil(bn / tj), math.ceil(bk / tk)
    nbuf = 2 if s.double_buffer else 1
    a_rows, b_rows = s.tile_i * s.tile_k * d, s.tile_k * s.tile_j * d
    a_base = [n * (a_rows + b_rows) for n in range(nbuf)]
    b_base = [n * (a_rows + b_rows) + a_rows for n in range(nbuf)]
    c_stride = c_stride or gemm.n
    a_stride = a_stride or gemm.k

    st = InstructionStream()
    emit = st.append
    emit(ConfigEx(requant))
    emit(ConfigLd(0, a_stride, "i8", im2col=im2col))
    emit(ConfigLd(1, gemm.n, "i8"))
    emit(ConfigSt(0, c_stride))
    emit(ConfigSt(1, 4 * gemm.n))
    slot2 = [None]

    def cfg_slot2(mode):
        if slot2[0] != mode:
            emit(ConfigLd(2, 0 if mode == "bias" else 4 * gemm.n, "i32"))
            slot2[0] = mode

    def ext(total, idx):
        return min(d, total - idx * d)

    a_slots, b_slots = [None] * nbuf, [None] * nbuf
    nxt = {"a": 0, "b": 0}

    def fetch(kind, key, tile_blocks):
        slots = a_slots if kind == "a" else b_slots
        if key in slots:
            return slots.index(key)
        pos = nxt[kind]
        nxt[kind] = (pos + 1) % nbuf
        slots[pos] = key
        base = (a_base if kind == "a" else b_base)[pos]
        for n, (r, c) in enumerate(tile_blocks):
            if kind == "a":
                rows, cols = ext(gemm.m, r), ext(gemm.k, c)
                if im2col is not None:
                    emit(Mvin(a_addr, spad(base + n * d), rows, cols, 0, row0=r * d, col0=c * d))
                else:
                    emit(Mvin(a_addr + r * d * a_stride + c * d, spad(base + n * d), rows, cols, 0))
            else:
                rows, cols = ext(gemm.k, r), ext(gemm.n, c)
                emit(Mvin(b_addr + r * d * gemm.n + c * d, spad(base + n * d), rows, cols, 1))
        return pos

    def tile_range(t, size, total):
        return range(t * size, min((t + 1) * size, total))

    done = {}
    spilled = set()
    cur = None

    def c_blocks(i, j):
        return [(r, c) for r in tile_range(i, ti, bm) for c in tile_range(j, tj, bn)]

    def c_row(i, j, r, c):
        return ((r - i * ti) * tj + (c - j * tj)) * d

    def spill(i, j):
        if scratch_addr is None:
            raise ScheduleError("schedule evicts partial sums but no scratch buffer was provided")
        for r, c in c_blocks(i, j):
            emit(Mvout(acc(c_row(i, j, r, c)), scratch_addr + (r * d * gemm.n + c * d) * 4,
                       ext(gemm.m, r), ext(gemm.n, c), 1, raw=True))
        spilled.add((i, j))

    def enter(i, j):
        """Initialise the accumulator tile; returns whether blocks start with data."""
        if (i, j) in spilled:
            cfg_slot2("spill")
            for r, c in c_blocks(i, j):
                emit(Mvin(scratch_addr + (r * d * gemm.n + c * d) * 4, acc(c_row(i, j, r, c)),
                          ext(gemm.m, r), ext(gemm.n, c), 2))
            return True
        if bias_addr is not None:
            cfg_slot2("bias")
            for r, c in c_blocks(i, j):
                emit(Mvin(bias_addr + c * d * 4, acc(c_row(i, j, r, c)), ext(gemm.m, r), ext(gemm.n, c), 2))
            return True
        return False

    ranges = {"i": range(nti), "j": range(ntj), "k": range(ntk)}
    started = False
    for combo in itertools.product(*(ranges[a] for a in s.loop_order)):
        it = dict(zip(s.loop_order, combo))
        i, j, k = it["i"], it["j"], it["k"]
        if (i, j) != cur:
            if cur is not None and done.get(cur, 0) < ntk:
                spill(*cur)
            cur = (i, j)
            started = enter(i, j)
        ia = fetch("a", (i, k), [(r, c) for r in tile_range(i, ti, bm) for c in tile_range(k, tk, bk)])
        ib = fetch("b", (k, j), [(r, c) for r in tile_range(k, tk, bk) for c in tile_range(j, tj, bn)])
        krange = list(tile_range(k, tk, bk))
        jrange = list(tile_range(j, tj, bn))
        irange = list(tile_range(i, ti, bm))
        for c in jrange:
            for kb in krange:
                nb = (kb - k * tk) * len(jrange) + (c - j * tj)
                emit(Preload(spad(b_base[ib] + nb * d), acc(c_row(i, j, irange[0], c)),
                             ext(gemm.k, kb), ext(gemm.n, c)))
                for n, r in enumerate(irange):
                    na = (r - i * ti) * len(krange) + (kb - k * tk)
                    accumulate = started or kb > 0 or k > 0
                    target = acc(c_row(i, j, r, c)) if n else None
                    emit(Compute(spad(a_base[ia] + na * d), ext(gemm.m, r), ext(gemm.k, kb), accumulate,
                                 target))
        started = True
        done[cur] = done.get(cur, 0) + 1
        if done[cur] == ntk:
            for r, c in c_blocks(i, j):
                emit(Mvout(acc(c_row(i, j, r, c)), c_addr + r * d * c_stride + c * d,
                           ext(gemm.m, r), ext(gemm.n, c), 0))
    emit(Fence())
    st.meta["schedule"] = s.to_dict()
    st.meta["gemm"] = asdict(gemm)
    return st


def spills(gemm: Gemm, cfg: AcceleratorConfig, s: Schedule) -> bool:
    """Whether the loop order evicts unfinished accumulator tiles."""
    bm, bk, bn = gemm.blocks(cfg.dim)
    nti = math.ceil(bm / min(s.tile_i, bm))
    ntj = math.ceil(bn / min(s.tile_j, bn))
    ntk = math.ceil(bk / min(s.tile_k, bk))
    if ntk == 1 or nti * ntj == 1:
        return False
    return s.loop_order[2] != "k"


# ----------------------------------------------------------------------------- conv lowering

def lower_conv(node: Node, cfg: AcceleratorConfig, schedule: Schedule = None, *, in_spec: TensorSpec,
               addrs: dict = None) -> InstructionStream:
    """Lower a quantized Conv2D; ``addrs`` maps x/w/b/y/scratch to DRAM offsets."""
    if node.kind != "Conv2D" or node.output.dtype != DType.i8:
        raise ScheduleError(f"lower_conv needs a quantized Conv2D, got {node.kind} {node.output.dtype}")
    gemm, spec = conv_geometry(node, in_spec)
    schedule = schedule or default_gemm_schedule(gemm, cfg)
    check_legal(schedule, cfg)
    need_scratch = spills(gemm, cfg, schedule)
    if addrs is None:
        lay = Layout()
        addrs = {"x": lay.alloc("x", in_spec.size, in_spec.shape),
                 "w": lay.alloc("w", gemm.k * gemm.n, (gemm.k, gemm.n)),
                 "b": lay.alloc("b", 4 * gemm.n, (gemm.n,), "i32"),
                 "y": lay.alloc("y", node.output.size, node.output.shape)}
        if need_scratch:
            addrs["scratch"] = lay.alloc("scratch", 4 * gemm.m * gemm.n, (gemm.m, gemm.n), "i32")
        buffers = lay.buffers
    else:
        buffers = {}
    st = lower_gemm(gemm, cfg, schedule, a_addr=addrs["x"], b_addr=addrs["w"], c_addr=addrs["y"],
                    bias_addr=addrs.get("b"), scratch_addr=addrs.get("scratch"), requant=node.requant,
                    im2col=spec, a_stride=in_spec.c)
    st.buffers = buffers
    st.meta["node"] = node.id
    return st


# ----------------------------------------------------------------------------- auxiliary ops

def _ring(cfg, regions=8):
    n = max(1, min(regions, cfg.spad_rows // cfg.dim))
    return [r * cfg.dim for r in range(n)]


def _chunks(total, size):
    return [(s, min(size, total - s)) for s in range(0, total, size)]


def lower_maxpool(node, cfg, in_spec, x, y) -> InstructionStream:
    op = node.op
    h, w, c = in_spec.h, in_spec.w, in_spec.c
    ho, wo = node.output.h, node.output.w
    pt, _ = same_pad(h, op.kernel, op.stride, op.padding)
    pl, _ = same_pad(w, op.kernel, op.stride, op.padding)
    d = cfg.dim
    budget = cfg.spad_rows // 2
    if op.kernel * w > budget:
        raise ScheduleError(f"pooling band of {op.kernel}x{w} pixels does not fit the scratchpad")
    st = InstructionStream()
    st.append(ConfigLd(0, c, "i8"))
    st.append(ConfigSt(0, c, Pool(op.kernel, op.stride, h, w, pt, pl)))
    half = 0
    for cb, cc in _chunks(c, d):
        oy = 0
        while oy < ho:
            # grow the group of output rows while the input band fits
            g = 1
            while oy + g < ho and ((oy + g) * op.stride - pt + op.kernel - max(0, oy * op.stride - pt)) * w <= budget:
                g += 1
            lo = max(0, oy * op.stride - pt)
            hi = min(h, (oy + g - 1) * op.stride - pt + op.kernel)
            base = half * budget
            for iy in range(lo, hi):
                for px, n in _chunks(w, d):
                    st.append(Mvin(x + (iy * w + px) * c + cb, spad(base + (iy - lo) * w + px), n, cc, 0))
            for o in range(oy, oy + g):
                for ox, n in _chunks(wo, d):
                    st.append(Mvout(spad(base), y + (o * wo + ox) * c + cb, n, cc, 0, pool_origin=(lo, o, ox)))
            half ^= 1
            oy += g
    st.append(Fence())
    return st


def lower_resize(node, cfg, in_spec, x, y) -> InstructionStream:
    f = node.op.factor
    if not isinstance(f, int) or f < 1:
        raise ScheduleError(f"resize factor {f!r} must be a positive integer")
    h, w, c = in_spec.h, in_spec.w, in_spec.c
    wo = w * f
    st = InstructionStream()
    st.append(ConfigLd(0, c, "i8"))
    st.append(ConfigSt(0, f * c))
    ring = _ring(cfg)
    n_used = 0
    for cb, cc in _chunks(c, cfg.dim):
        for iy in range(h):
            for px, n in _chunks(w, cfg.dim):
                row = ring[n_used % len(ring)]
                n_used += 1
                st.append(Mvin(x + (iy * w + px) * c + cb, spad(row), n, cc, 0))
                for dy in range(f):
                    for dx in range(f):
                        dst = y + ((iy * f + dy) * wo + px * f + dx) * c + cb
                        st.append(Mvout(spad(row), dst, n, cc, 0))
    st.append(Fence())
    return st


def lower_concat(node, cfg, in_specs, xs, y) -> InstructionStream:
    cout = node.output.c
    pixels = node.output.h * node.output.w
    st = InstructionStream()
    st.append(ConfigSt(0, cout))
    ring = _ring(cfg)
    n_used = 0
    off = 0
    for spec, x in zip(in_specs, xs):
        st.append(ConfigLd(0, spec.c, "i8"))
        for cb, cc in _chunks(spec.c, cfg.dim):
            for p0, n in _chunks(pixels, cfg.dim):
                row = ring[n_used % len(ring)]
                n_used += 1
                st.append(Mvin(x + p0 * spec.c + cb, spad(row), n, cc, 0))
                st.append(Mvout(spad(row), y + p0 * cout + off + cb, n, cc, 0))
        off += spec.c
    st.append(Fence())
    return st


def lower_add(node, cfg, in_specs, xs, y, bias_addr) -> InstructionStream:
    c = node.output.c
    pixels = node.output.h * node.output.w
    st = InstructionStream()
    st.append(ConfigEx(node.requant))
    st.append(ConfigLd(0, c, "i8"))
    st.append(ConfigLd(1, 0, "i32"))
    st.append(ConfigSt(0, c))
    regions = max(1, min(8, cfg.acc_rows // cfg.dim))
    n_used = 0
    for cb, cc in _chunks(c, cfg.dim):
        for p0, n in _chunks(pixels, cfg.dim):
            row = (n_used % regions) * cfg.dim
            n_used += 1
            st.append(Mvin(xs[0] + p0 * c + cb, acc(row), n, cc, 0))
            st.append(Mvin(xs[1] + p0 * c + cb, acc(row, True), n, cc, 0))
            st.append(Mvin(bias_addr + cb * 4, acc(row, True), n, cc, 1))
            st.append(Mvout(acc(row), y + p0 * c + cb, n, cc, 0))
    st.append(Fence())
    return st


def lower_quantize(node, cfg, in_spec, x, y) -> InstructionStream:
    """f32 -> i8 conversion performed by the load path."""
    c = in_spec.c
    pixels = in_spec.h * in_spec.w
    qp = node.output.qparams
    st = InstructionStream()
    st.append(ConfigLd(0, 4 * c, "f32", scale=float(qp.scale), zero_point=qp.zero_point))
    st.append(ConfigSt(0, c))
    ring = _ring(cfg)
    n_used = 0
    for cb, cc in _chunks(c, cfg.dim):
        for p0, n in _chunks(pixels, cfg.dim):
            row = ring[n_used % len(ring)]
            n_used += 1
            st.append(Mvin(x + (p0 * c + cb) * 4, spad(row), n, cc, 0))
            st.append(Mvout(spad(row), y + p0 * c + cb, n, cc, 0))
    st.append(Fence())
    return st


def lower_aux(node: Node, cfg: AcceleratorConfig, *, in_specs, addrs: dict = None) -> InstructionStream:
    """Lower MaxPool2D / ResizeNearest / Concat / Add / Quantize; ``addrs`` has x0.., y (and b for Add)."""
    kind = node.kind
    if kind not in ("MaxPool2D", "ResizeNearest", "Concat", "Add", "Quantize"):
        raise ScheduleError(f"{kind} cannot be lowered as an auxiliary op")
    buffers = {}
    if addrs is None:
        lay = Layout()
        addrs = {}
        for n, spec in enumerate(in_specs):
            addrs[f"x{n}"] = lay.alloc(f"x{n}", spec.nbytes, spec.shape, spec.dtype.value)
        addrs["y"] = lay.alloc("y", node.output.nbytes, node.output.shape, node.output.dtype.value)
        if kind == "Add":
            addrs["b"] = lay.alloc("b", 4 * node.output.c, (node.output.c,), "i32")
        buffers = lay.buffers
    xs = [addrs[f"x{n}"] for n in range(len(in_specs))]
    if kind == "MaxPool2D":
        st = lower_maxpool(node, cfg, in_specs[0], xs[0], addrs["y"])
    elif kind == "ResizeNearest":
        st = lower_resize(node, cfg, in_specs[0], xs[0], addrs["y"])
    elif kind == "Concat":
        st = lower_concat(node, cfg, in_specs, xs, addrs["y"])
    elif kind == "Add":
        st = lower_add(node, cfg, in_specs, xs, addrs["y"], addrs["b"])
    else:
        st = lower_quantize(node, cfg, in_specs[0], xs[0], addrs["y"])
    st.buffers = buffers
    st.meta["node"] = node.id
    return st


def lower_node(node: Node, cfg, in_specs, schedule=None, addrs=None) -> InstructionStream:
    if node.kind == "Conv2D":
        return lower_conv(node, cfg, schedule, in_spec=in_specs[0], addrs=addrs)
    return lower_aux(node, cfg, in_specs=in_specs, addrs=addrs)


def identity_requant() -> RequantSpec:
    return RequantSpec(1.0, 0, None)
