"""Synthetic labeled CAN traffic: periodic background plus injected attacks.

Attack timing follows the Car-hacking captures: DoS frames with id 0x000
every 0.3 ms, fuzzy frames (random id and payload) every 0.5 ms, and spoofed
gear / RPM frames every 1 ms.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterable, List, Optional, Sequence, Union

import numpy as np

from .can_ingest import ATTACK_LABELS, MAX_STD_ID, CanFrame, ClassLabel, LogFormat

logger = logging.getLogger(__name__)

DEFAULT_CYCLE = {
    ClassLabel.DOS: 0.0003,
    ClassLabel.FUZZY: 0.0005,
    ClassLabel.GEAR_SPOOF: 0.001,
    ClassLabel.RPM_SPOOF: 0.001,
}
GEAR_ID = 0x43F
RPM_ID = 0x316
DEFAULT_TARGET = {ClassLabel.DOS: 0x000, ClassLabel.GEAR_SPOOF: GEAR_ID, ClassLabel.RPM_SPOOF: RPM_ID}
TIME_DECIMALS = 6  # microsecond timestamps, like the real captures


@dataclass
class ByteRule:
    """How one payload byte evolves: a constant, a wrapping counter, or uniform noise."""
    kind: str = "constant"
    value: int = 0  # constant value, or counter start
    step: int = 1  # counter increment
    low: int = 0  # noise range, inclusive
    high: int = 255

    def __post_init__(self):
        if self.kind not in ("constant", "counter", "noise"):
            raise ValueError(f"unknown byte rule {self.kind!r}")
        if not (0 <= self.value <= 255 and 0 <= self.low <= self.high <= 255):
            raise ValueError("byte rule values must lie in 0..255")

    @classmethod
    def from_obj(cls, obj) -> "ByteRule":
        if isinstance(obj, int):
            return cls("constant", obj)
        if isinstance(obj, str):
            return cls(obj)
        return cls(**obj)


def C(v):
    return ByteRule("constant", v)


def N(lo=0, hi=255):
    return ByteRule("noise", low=lo, high=hi)


def K(start=0, step=1):
    return ByteRule("counter", start, step)


@dataclass
class IdProfile:
    can_id: int
    period: float  # seconds
    jitter: float = 0.02  # relative, uniform in +-jitter
    payload: List[ByteRule] = field(default_factory=lambda: [C(0)] * 8)


@dataclass
class BusProfile:
    ids: List[IdProfile]

    def __post_init__(self):
        seen = set()
        for p in self.ids:
            if p.period <= 0:
                raise ValueError(f"id 0x{p.can_id:03X}: period must be positive")
            if not 0.0 <= p.jitter <= 0.2:
                raise ValueError(f"id 0x{p.can_id:03X}: jitter must lie in [0, 0.2]")
            if not 0 <= p.can_id <= MAX_STD_ID:
                raise ValueError(f"id 0x{p.can_id:X} exceeds 11-bit range")
            if len(p.payload) > 8:
                raise ValueError(f"id 0x{p.can_id:03X}: payload template longer than 8 bytes")
            if p.can_id in seen:
                raise ValueError(f"duplicate id 0x{p.can_id:03X}")
            seen.add(p.can_id)

    def get(self, can_id: int) -> Optional[IdProfile]:
        return next((p for p in self.ids if p.can_id == can_id), None)

    @classmethod
    def from_obj(cls, obj) -> "BusProfile":
        ids = []
        for e in obj["ids"]:
            cid = e["can_id"]
            ids.append(IdProfile(int(cid, 16) if isinstance(cid, str) else cid, e["period"],
                                 e.get("jitter", 0.02), [ByteRule.from_obj(b) for b in e["payload"]]))
        return cls(ids)


def default_profile() -> BusProfile:
    """Ten background ids with periods between 5 and 100 ms."""
    return BusProfile([
        IdProfile(0x0A0, 0.005, 0.02, [K(0, 1), C(0x12), C(0x00), N(0x40, 0x4F), C(0x00), C(0x00), C(0x80), C(0x00)]),
        IdProfile(0x130, 0.010, 0.02, [C(0x05), C(0x20), N(0x00, 0x0F), C(0x68), K(0, 16), C(0x00), C(0x00), C(0x07)]),
        IdProfile(0x18F, 0.010, 0.02, [C(0xFE), C(0x5B), C(0x00), C(0x00), C(0x00), C(0x3C), K(0, 1), C(0x00)]),
        IdProfile(0x260, 0.020, 0.02, [C(0x19), C(0x21), C(0x22), C(0x30), C(0x08), C(0x8E), N(0x60, 0x6F), K(0, 1)]),
        IdProfile(RPM_ID, 0.010, 0.02, [C(0x05), C(0x21), N(0x60, 0x6F), C(0x09), C(0x21), C(0x21), C(0x00), K(0x60, 1)]),
        IdProfile(0x329, 0.020, 0.02, [C(0x40), N(0xB0, 0xBF), C(0x7F), C(0x14), C(0x11), C(0x20), C(0x00), C(0x14)]),
        IdProfile(GEAR_ID, 0.010, 0.02, [C(0x10), C(0x40), C(0x60), C(0xFF), N(0x70, 0x7F), C(0x49), C(0x00), C(0x00)]),
        IdProfile(0x545, 0.050, 0.02, [C(0xD8), C(0x00), N(0x00, 0x1F), C(0x8A), C(0x00), C(0x00), C(0x00), C(0x00)]),
        IdProfile(0x5F0, 0.100, 0.02, [C(0x01), C(0x00), C(0x00), C(0x00), C(0x00), C(0x00), C(0x00), C(0x00)]),
        IdProfile(0x690, 0.100, 0.02, [C(0x00), C(0x00), K(0, 1), C(0x00), C(0x00), C(0x00), C(0x00), C(0x00)]),
    ])


# forged payloads: fixed bytes that move the gauge, plus one noisy byte
DEFAULT_FORGED = {
    ClassLabel.GEAR_SPOOF: [C(0x01), C(0x45), C(0x60), C(0x00), C(0x00), C(0x00), N(0x00, 0x0F), C(0x00)],
    ClassLabel.RPM_SPOOF: [C(0xFF), C(0xFF), C(0x00), C(0x00), N(0x00, 0x0F), C(0x00), C(0xFF), C(0x00)],
}


@dataclass
class AttackScenario:
    kind: ClassLabel
    start: float
    end: float
    cycle: Optional[float] = None
    target_id: Optional[int] = None
    payload: Optional[List[ByteRule]] = None

    def __post_init__(self):
        self.kind = ClassLabel(self.kind)
        if self.kind == ClassLabel.NORMAL:
            raise ValueError("an attack scenario cannot be Normal")
        if self.cycle is None:
            self.cycle = DEFAULT_CYCLE[self.kind]
        if self.target_id is None:
            self.target_id = DEFAULT_TARGET.get(self.kind)
        if self.payload is None and self.kind in DEFAULT_FORGED:
            self.payload = list(DEFAULT_FORGED[self.kind])
        if not self.start < self.end:
            raise ValueError("scenario start must precede end")
        if not self.cycle > 0:
            raise ValueError("scenario cycle must be positive")

    @property
    def n_injected(self) -> int:
        # tolerance keeps 0.003 / 0.0003 from rounding up to 11
        return max(0, math.ceil((self.end - self.start) / self.cycle - 1e-9))

    @classmethod
    def from_obj(cls, obj) -> "AttackScenario":
        tid = obj.get("target_id")
        if isinstance(tid, str):
            tid = int(tid, 16)
        payload = obj.get("payload")
        return cls(ClassLabel.parse(obj["kind"]), obj["start"], obj["end"], obj.get("cycle"), tid,
                   None if payload is None else [ByteRule.from_obj(b) for b in payload])

    def to_obj(self) -> dict:
        return {"kind": self.kind.display, "start": self.start, "end": self.end, "cycle": self.cycle,
                "target_id": self.target_id, "n_injected": self.n_injected}


def default_scenarios(duration: float) -> List[AttackScenario]:
    """One window per attack type, each a tenth of the capture, spread over the duration."""
    w = duration / 10.0
    starts = (0.1, 0.3, 0.5, 0.7)
    return [AttackScenario(kind, f * duration, f * duration + w)
            for kind, f in zip(ATTACK_LABELS, starts)]


def _payloads(rules: Sequence[ByteRule], n: int, rng: np.random.Generator) -> np.ndarray:
    out = np.zeros((n, len(rules)), dtype=np.uint8)
    k = np.arange(n)
    for j, r in enumerate(rules):
        if r.kind == "constant":
            out[:, j] = r.value
        elif r.kind == "counter":
            out[:, j] = (r.value + r.step * k) % 256
        else:
            out[:, j] = rng.integers(r.low, r.high + 1, size=n)
    return out


def generate(profile: Optional[BusProfile] = None, scenarios: Sequence[AttackScenario] = (),
             duration: float = 10.0, seed: int = 0) -> List[CanFrame]:
    """Labeled traffic over ``[0, duration)``, sorted by time (ties: background first)."""
    profile = profile or default_profile()
    if not duration > 0:
        raise ValueError("duration must be positive")
    for s in scenarios:
        if s.start < 0 or s.end > duration + 1e-12:
            raise ValueError(f"{s.kind.display} window [{s.start}, {s.end}] outside [0, {duration}]")
        if s.kind in (ClassLabel.GEAR_SPOOF, ClassLabel.RPM_SPOOF) and profile.get(s.target_id) is None:
            raise ValueError(f"spoofing target 0x{s.target_id:03X} is not in the bus profile")
    rng = np.random.default_rng(seed)
    # (timestamp, injected, seq, frame)
    rows = []
    seq = 0
    for p in profile.ids:
        t = rng.uniform(0.0, p.period)
        times = []
        while t < duration:
            times.append(t)
            t += p.period * (1.0 + p.jitter * rng.uniform(-1.0, 1.0))
        data = _payloads(p.payload, len(times), rng)
        for t, d in zip(times, data):
            ts = round(t, TIME_DECIMALS)
            rows.append((ts, 0, seq, CanFrame(ts, p.can_id, len(p.payload), d.tobytes(), ClassLabel.NORMAL)))
            seq += 1
    for s in scenarios:
        n = s.n_injected
        times = s.start + s.cycle * np.arange(n)
        if s.kind == ClassLabel.DOS:
            ids = np.full(n, s.target_id)
            data = np.zeros((n, 8), dtype=np.uint8)
        elif s.kind == ClassLabel.FUZZY:
            ids = rng.integers(0, MAX_STD_ID + 1, size=n)
            data = rng.integers(0, 256, size=(n, 8), dtype=np.uint8)
        else:
            ids = np.full(n, s.target_id)
            data = _payloads(s.payload, n, rng)
        for t, cid, d in zip(times, ids, data):
            ts = round(float(t), TIME_DECIMALS)
            rows.append((ts, 1, seq, CanFrame(ts, int(cid), len(d), d.tobytes(), s.kind)))
            seq += 1
    rows.sort(key=lambda r: r[:3])
    return [r[3] for r in rows]


def _flag(label: ClassLabel, fmt: LogFormat, file_label: Optional[ClassLabel]) -> str:
    if label == ClassLabel.NORMAL:
        return next((k for k, v in fmt.flags.items() if v != "@file" and ClassLabel.parse(v) == label),
                    label.display)
    if file_label == label:
        at_file = [k for k, v in fmt.flags.items() if v == "@file"]
        if at_file:
            return at_file[0]
    return label.display


def format_frame(frame: CanFrame, fmt: LogFormat, file_label: Optional[ClassLabel] = None) -> str:
    if (fmt.timestamp_col, fmt.id_col, fmt.dlc_col, fmt.payload_col) != (0, 1, 2, 3) or fmt.flag_col is not None:
        raise ValueError("writing is only supported for the default column layout")
    fields = [repr(frame.timestamp), f"{frame.can_id:04x}", str(frame.dlc)]
    fields += [f"{b:02x}" for b in frame.payload]
    fields.append(_flag(frame.label, fmt, file_label))
    return fmt.delimiter.join(fields)


def write_log(frames: Iterable[CanFrame], fmt: Optional[LogFormat] = None,
              sink: Union[str, Path, IO[str], None] = None, file_label: Optional[ClassLabel] = None,
              header: str = "") -> Optional[str]:
    """Write frames as CSV in the ingestion layout; returns the text when ``sink`` is None.

    The first line is a comment header, which ``parse_log`` skips.
    """
    fmt = fmt or LogFormat()
    head = f"{fmt.comment} timestamp,id,dlc,data...,flag"
    if header:
        head += f" {header}"
    lines = [head] + [format_frame(f, fmt, file_label) for f in frames]
    text = "\n".join(lines) + "\n"
    if sink is None:
        return text
    if isinstance(sink, (str, Path)):
        Path(sink).write_text(text)
    else:
        sink.write(text)
    return None


def load_scenarios(path) -> List[AttackScenario]:
    obj = json.loads(Path(path).read_text())
    items = obj["scenarios"] if isinstance(obj, dict) else obj
    return [AttackScenario.from_obj(o) for o in items]


def load_profile(path) -> BusProfile:
    return BusProfile.from_obj(json.loads(Path(path).read_text()))
