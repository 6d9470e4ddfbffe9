"""Accelerator configuration and presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

FEATURES = frozenset({"normalization", "transposition", "virtual_memory", "dilation"})


@dataclass(frozen=True)
class AcceleratorConfig:
    """Geometry, memories and timing constants of a weight-stationary array.

    Timing constants (``dram_latency``, ``bus_bytes``) are modelling
    choices; they make cycle counts reproducible, not cycle-exact.
    """
    dim: int = 32
    spad_kib: int = 512
    acc_kib: int = 128
    spad_banks: int = 4
    acc_banks: int = 2
    spad_ports: int = 2
    spad_read_delay: int = 8
    output_bits: int = 18
    max_inflight: int = 32
    bus_bytes: int = 16
    dram_latency: int = 40
    freq_mhz: float = 150.0
    dataflow: str = "WS"
    saturate_outputs: bool = False
    dsp_packing: bool = False
    disabled: frozenset = field(default_factory=frozenset)
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "disabled", frozenset(self.disabled))
        if self.dataflow != "WS":
            raise ValueError("only the weight-stationary dataflow is modelled")
        for f in ("dim", "spad_kib", "acc_kib", "spad_banks", "acc_banks", "spad_ports",
                  "max_inflight", "bus_bytes", "output_bits"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.spad_read_delay < 0 or self.dram_latency < 0 or self.freq_mhz <= 0:
            raise ValueError("delays must be non-negative and the clock positive")
        if (self.spad_kib * 1024) % (self.dim * self.spad_banks):
            raise ValueError("scratchpad capacity must split evenly into rows and banks")
        if (self.acc_kib * 1024) % (4 * self.dim * self.acc_banks):
            raise ValueError("accumulator capacity must split evenly into rows and banks")
        unknown = self.disabled - FEATURES
        if unknown:
            raise ValueError(f"unknown features {sorted(unknown)}; choose from {sorted(FEATURES)}")
        if self.dsp_packing and self.dim % 2:
            raise ValueError("DSP packing needs an even array dimension")

    @property
    def spad_bytes(self) -> int:
        return self.spad_kib * 1024

    @property
    def acc_bytes(self) -> int:
        return self.acc_kib * 1024

    @property
    def spad_rows(self) -> int:
        return self.spad_bytes // self.dim

    @property
    def acc_rows(self) -> int:
        return self.acc_bytes // (4 * self.dim)

    @property
    def spad_bank_rows(self) -> int:
        return self.spad_rows // self.spad_banks

    def replace(self, **kw) -> "AcceleratorConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["disabled"] = sorted(self.disabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AcceleratorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown accelerator config keys {sorted(extra)}")
        return cls(**d)

    def config_hash(self) -> str:
        body = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()[:16]


OURS = AcceleratorConfig(name="ours")
BASELINE = AcceleratorConfig(dim=16, spad_kib=256, acc_kib=64, spad_ports=1, spad_read_delay=4,
                             output_bits=20, max_inflight=16, freq_mhz=100.0, name="baseline")
PRESETS = {"ours": OURS, "baseline": BASELINE}


def get_config(spec) -> AcceleratorConfig:
    """Preset name, JSON file path, dict, or config passthrough."""
    if isinstance(spec, AcceleratorConfig):
        return spec
    if isinstance(spec, dict):
        return AcceleratorConfig.from_dict(spec)
    if spec in PRESETS:
        return PRESETS[spec]
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"accelerator config {spec!r} is neither a preset nor a file")
    return AcceleratorConfig.from_dict(json.loads(path.read_text()))


def feature_flags(cfg: AcceleratorConfig, disable) -> AcceleratorConfig:
    """Return ``cfg`` with the given optional features compiled out."""
    disable = frozenset(disable)
    unknown = disable - FEATURES
    if unknown:
        raise ValueError(f"unknown features {sorted(unknown)}; choose from {sorted(FEATURES)}")
    return cfg.replace(disabled=cfg.disabled | disable)
