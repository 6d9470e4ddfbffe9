"""RISC-style instruction set, instruction streams and the text trace format."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Optional

from ..errors import FeatureDisabledError, SimulationError
from ..graph_ir import RequantSpec

SPAD, ACC = "S", "A"


@dataclass(frozen=True)
class LocalAddr:
    space: str          # SPAD or ACC
    row: int
    accumulate: bool = False

    def __post_init__(self):
        if self.space not in (SPAD, ACC):
            raise ValueError(f"bad local space {self.space!r}")
        if self.row < 0:
            raise ValueError("negative local row")

    def __str__(self):
        return f"{self.space}:{self.row}" + (":acc" if self.accumulate else "")

    @classmethod
    def parse(cls, text):
        parts = text.split(":")
        return cls(parts[0], int(parts[1]), len(parts) > 2 and parts[2] == "acc")


def spad(row) -> LocalAddr:
    return LocalAddr(SPAD, row)


def acc(row, accumulate=False) -> LocalAddr:
    return LocalAddr(ACC, row, accumulate)


@dataclass(frozen=True)
class Im2col:
    """Address generation for gathering convolution patches during Mvin."""
    h: int
    w: int
    c: int
    kh: int
    kw: int
    stride: int
    pad_top: int
    pad_left: int
    out_w: int
    dilation: int = 1
    pad_value: int = 0


@dataclass(frozen=True)
class Pool:
    """Max-pool window applied by Mvout over a band of pixel rows."""
    kernel: int
    stride: int
    in_h: int
    in_w: int
    pad_top: int
    pad_left: int


# ----------------------------------------------------------------------------- instructions

@dataclass(frozen=True)
class ConfigEx:
    requant: Optional[RequantSpec] = None
    transpose_b: bool = False
    normalize: bool = False


@dataclass(frozen=True)
class ConfigLd:
    slot: int = 0
    stride: int = 0                 # bytes between consecutive rows in DRAM
    dtype: str = "i8"               # i8 | i32 | f32
    scale: Optional[float] = None   # f32 source only: quantize on the fly
    zero_point: int = 0
    im2col: Optional[Im2col] = None
    virtual: bool = False


@dataclass(frozen=True)
class ConfigSt:
    slot: int = 0
    stride: int = 0
    pool: Optional[Pool] = None
    virtual: bool = False


@dataclass(frozen=True)
class Mvin:
    dram_addr: int
    local: LocalAddr
    rows: int
    cols: int
    slot: int = 0
    row0: int = 0      # im2col: first output pixel
    col0: int = 0      # im2col: first reduction index


@dataclass(frozen=True)
class Mvout:
    local: LocalAddr
    dram_addr: int
    rows: int
    cols: int
    slot: int = 0
    raw: bool = False              # write i32 accumulators without requantization
    pool_origin: Optional[tuple] = None   # (input row held at local.row, output row, first output col)


@dataclass(frozen=True)
class Preload:
    b_local: Optional[LocalAddr]   # None keeps the latched weights
    c_local: LocalAddr
    rows: int = 0                  # reduction extent of the weight block
    cols: int = 0                  # output-column extent


@dataclass(frozen=True)
class Compute:
    a_local: LocalAddr
    rows: int
    cols: int                      # reduction extent read from each A row
    accumulate: bool = True
    c_local: Optional[LocalAddr] = None   # retarget the output without reloading weights


@dataclass(frozen=True)
class Fence:
    pass


INSTRUCTIONS = {c.__name__: c for c in (ConfigEx, ConfigLd, ConfigSt, Mvin, Mvout, Preload, Compute, Fence)}
CONTROLLER = {"ConfigLd": "load", "Mvin": "load", "ConfigEx": "exec", "Preload": "exec",
              "Compute": "exec", "ConfigSt": "store", "Mvout": "store", "Fence": None}


@dataclass(frozen=True)
class Buffer:
    addr: int
    nbytes: int
    shape: tuple = ()
    dtype: str = "i8"


@dataclass
class InstructionStream:
    instructions: list = field(default_factory=list)
    buffers: dict = field(default_factory=dict)     # name -> Buffer
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.instructions)

    def __len__(self):
        return len(self.instructions)

    def append(self, ins):
        self.instructions.append(ins)

    def extend(self, other):
        self.instructions.extend(other)

    def count(self, kind) -> int:
        return sum(type(i).__name__ == kind for i in self.instructions)

    @property
    def dram_size(self) -> int:
        return max((b.addr + b.nbytes for b in self.buffers.values()), default=0)

    def to_text(self) -> str:
        return "".join(format_instruction(i) + "\n" for i in self.instructions)

    @classmethod
    def from_text(cls, text: str) -> "InstructionStream":
        return cls([parse_instruction(line) for line in text.splitlines() if line.strip()])


# ----------------------------------------------------------------------------- text trace

def _enc(v):
    if isinstance(v, LocalAddr):
        return str(v)
    if dataclasses.is_dataclass(v):
        d = {f.name: getattr(v, f.name) for f in dataclasses.fields(v)}
        if isinstance(v, RequantSpec):
            d["multiplier_f16"] = repr(v.multiplier_f16)
        return json.dumps(d, separators=(",", ":"))
    if isinstance(v, float):
        return json.dumps(repr(v))
    return json.dumps(v, separators=(",", ":"))


_NESTED = {"requant": RequantSpec, "im2col": Im2col, "pool": Pool}


def _dec(name, text):
    if name in ("local", "a_local", "b_local", "c_local"):
        return None if text == "null" else LocalAddr.parse(text)
    v = json.loads(text)
    if v is None:
        return None
    if name in _NESTED:
        if name == "requant":
            clamp = v["activation_clamp"]
            return RequantSpec(float(v["multiplier_f16"]), v["output_zero_point"],
                               None if clamp is None else tuple(clamp))
        return _NESTED[name](**v)
    if name == "scale":
        return float(v)
    if name == "pool_origin":
        return tuple(v)
    return v


def format_instruction(ins) -> str:
    fields = [f"{f.name}={_enc(getattr(ins, f.name)) if getattr(ins, f.name) is not None else 'null'}"
              for f in dataclasses.fields(ins)]
    return " ".join([type(ins).__name__.upper()] + fields)


def parse_instruction(line: str):
    head, *parts = line.split()
    cls = {k.upper(): v for k, v in INSTRUCTIONS.items()}.get(head)
    if cls is None:
        raise SimulationError(f"unknown instruction {head!r}")
    kw = {}
    for p in parts:
        k, _, v = p.partition("=")
        kw[k] = _dec(k, v)
    return cls(**kw)


# ----------------------------------------------------------------------------- validation

def required_features(stream) -> set:
    """Optional accelerator features a stream relies on."""
    need = set()
    for ins in stream:
        if isinstance(ins, ConfigEx):
            if ins.normalize:
                need.add("normalization")
            if ins.transpose_b:
                need.add("transposition")
        elif isinstance(ins, ConfigLd):
            if ins.virtual:
                need.add("virtual_memory")
            if ins.im2col is not None and ins.im2col.dilation != 1:
                need.add("dilation")
        elif isinstance(ins, ConfigSt) and ins.virtual:
            need.add("virtual_memory")
    return need


def validate_stream(cfg, stream) -> None:
    """Static checks: feature availability, block sizes and local address ranges."""
    missing = required_features(stream) & cfg.disabled
    if missing:
        raise FeatureDisabledError(f"stream requires disabled feature(s): {', '.join(sorted(missing))}")
    limits = {SPAD: cfg.spad_rows, ACC: cfg.acc_rows}
    for idx, ins in enumerate(stream):
        kind = type(ins).__name__
        if kind not in INSTRUCTIONS:
            raise SimulationError(f"#{idx}: not an instruction: {ins!r}")
        if isinstance(ins, (ConfigLd, ConfigSt)) and not 0 <= ins.slot <= 2:
            raise SimulationError(f"#{idx}: config slot {ins.slot} out of range")
        if isinstance(ins, (Mvin, Mvout)):
            pooled = isinstance(ins, Mvout) and ins.pool_origin is not None
            if not (1 <= ins.cols <= cfg.dim) or not (1 <= ins.rows <= cfg.dim):
                raise SimulationError(f"#{idx}: {kind} block {ins.rows}x{ins.cols} exceeds dim {cfg.dim}")
            if ins.dram_addr < 0:
                raise SimulationError(f"#{idx}: negative DRAM address")
            if not pooled and ins.local.row + ins.rows > limits[ins.local.space]:
                raise SimulationError(f"#{idx}: {kind} local rows {ins.local} +{ins.rows} out of range")
        elif isinstance(ins, Preload):
            if ins.c_local.space != ACC or ins.c_local.row >= limits[ACC]:
                raise SimulationError(f"#{idx}: Preload destination must be an accumulator row")
            if ins.b_local is not None:
                if ins.b_local.space != SPAD or ins.b_local.row + ins.rows > limits[SPAD]:
                    raise SimulationError(f"#{idx}: Preload weights out of scratchpad range")
                if not (1 <= ins.rows <= cfg.dim and 1 <= ins.cols <= cfg.dim):
                    raise SimulationError(f"#{idx}: Preload block {ins.rows}x{ins.cols} exceeds dim")
        elif isinstance(ins, Compute):
            if ins.a_local.space != SPAD or ins.a_local.row + ins.rows > limits[SPAD]:
                raise SimulationError(f"#{idx}: Compute operand out of scratchpad range")
            if ins.c_local is not None and (ins.c_local.space != ACC or ins.c_local.row + ins.rows > limits[ACC]):
                raise SimulationError(f"#{idx}: Compute destination out of accumulator range")
            if not (1 <= ins.rows <= cfg.dim and 1 <= ins.cols <= cfg.dim):
                raise SimulationError(f"#{idx}: Compute block {ins.rows}x{ins.cols} exceeds dim")
