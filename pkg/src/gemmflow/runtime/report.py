"""Run reports, detections and their file formats."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

REPORT_FORMAT = "gemmflow-run-report"
DETECTIONS_FORMAT = "gemmflow-detections"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class Detection:
    box: tuple          # x1, y1, x2, y2 in input pixels
    score: float
    class_id: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")

    def to_dict(self):
        return {"box": [float(v) for v in self.box], "score": float(self.score), "class": int(self.class_id)}


def detections_from_nms(rows) -> list:
    """(1, 1, n, 6) NMS output -> Detection list."""
    rows = np.asarray(rows).reshape(-1, 6)
    return [Detection(tuple(float(v) for v in r[:4]), float(r[4]), int(r[5])) for r in rows]


def detections_jsonl(dets, **header) -> str:
    lines = [json.dumps({"format": DETECTIONS_FORMAT, "version": FORMAT_VERSION, **header}, sort_keys=True)]
    lines += [json.dumps(d.to_dict(), sort_keys=True) for d in dets]
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class RunReport:
    accel_cycles: int
    accel_ms: float
    host_ms: float
    transfer_ms: float
    total_ms: float
    gop: float
    power_w: float
    energy_j: float
    efficiency: float        # GOP/s/W
    gop_per_s: float
    layers: tuple = field(default=(), compare=False)   # ((node id, cycles), ...)

    @classmethod
    def build(cls, gop, accel_cycles=0, freq_mhz=150.0, host_ms=0.0, transfer_ms=0.0, power_w=1.0,
              layers=()):
        """Assemble a report; the three phases run back to back."""
        if power_w <= 0:
            raise ValueError("power_w must be positive")
        accel_ms = accel_cycles / (freq_mhz * 1e3)
        total_ms = accel_ms + host_ms + transfer_ms
        total_s = total_ms / 1e3
        energy = power_w * total_s
        efficiency = gop / energy if energy > 0 else 0.0
        # derived from the efficiency so efficiency * power_w == gop_per_s holds exactly
        gop_per_s = efficiency * power_w
        return cls(int(accel_cycles), accel_ms, host_ms, transfer_ms, total_ms, gop, power_w, energy,
                   efficiency, gop_per_s, tuple(layers))

    def to_dict(self, **header) -> dict:
        d = asdict(self)
        d["layers"] = [list(x) for x in self.layers]
        return {"format": REPORT_FORMAT, "version": FORMAT_VERSION, **header, **d}

    def to_json(self, **header) -> str:
        return json.dumps(self.to_dict(**header), indent=1, sort_keys=True) + "\n"

    CSV_FIELDS = ("accel_cycles", "accel_ms", "host_ms", "transfer_ms", "total_ms", "gop", "gop_per_s",
                  "power_w", "energy_j", "efficiency")

    def to_csv(self, **header) -> str:
        buf = io.StringIO()
        cols = ["format", "version"] + sorted(header) + list(self.CSV_FIELDS)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        vals = {"format": REPORT_FORMAT, "version": FORMAT_VERSION, **header}
        w.writerow([vals[c] if c in vals else repr(getattr(self, c)) if isinstance(getattr(self, c), float)
                    else getattr(self, c) for c in cols])
        return buf.getvalue()
