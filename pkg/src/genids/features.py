"""Per-frame model input: 11 ID bits, normalized inter-arrival time, 8 payload bytes."""

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np

from .can_ingest import CanFrame

ID_BITS = 11
PAYLOAD_LEN = 8
FEATURE_DIM = ID_BITS + 1 + PAYLOAD_LEN  # 20

_BIT_WEIGHTS = 1 << np.arange(ID_BITS - 1, -1, -1)  # MSB first


@dataclass(frozen=True)
class FeatureConfig:
    t_max: float = 0.1  # seconds; intervals are clamped to this and scaled to [0, 1]
    pad_byte: int = 0

    def __post_init__(self):
        if not self.t_max > 0:
            raise ValueError("t_max must be positive")
        if not 0 <= self.pad_byte <= 255:
            raise ValueError("pad_byte must be a byte value")

    def digest(self) -> str:
        """Stable hash stored in checkpoints to catch encoding drift."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class IdHistory(Dict[int, float]):
    """Maps CAN id -> timestamp of its most recent frame."""


class NonMonotonicTimestamp(ValueError):
    pass


def id_bits(can_id: int) -> np.ndarray:
    return ((can_id & _BIT_WEIGHTS) > 0).astype(np.float64)


def bits_to_id(bits: Sequence[float]) -> int:
    return int(np.dot(np.asarray(bits) > 0.5, _BIT_WEIGHTS))


def extract(frame: CanFrame, history: IdHistory, cfg: FeatureConfig = FeatureConfig()) -> np.ndarray:
    """Feature vector for ``frame``; updates ``history`` with it."""
    last = history.get(frame.can_id)
    if last is None:
        dt = cfg.t_max
    else:
        dt = frame.timestamp - last
        if dt < 0:
            raise NonMonotonicTimestamp(
                f"non-monotonic timestamp for id 0x{frame.can_id:03X}: {frame.timestamp} < {last}")
    x = np.empty(FEATURE_DIM)
    x[:ID_BITS] = id_bits(frame.can_id)
    x[ID_BITS] = min(dt, cfg.t_max) / cfg.t_max
    payload = frame.payload + bytes([cfg.pad_byte]) * (PAYLOAD_LEN - frame.dlc)
    x[ID_BITS + 1:] = np.frombuffer(payload, dtype=np.uint8) / 255.0
    history[frame.can_id] = frame.timestamp
    return x


def extract_stream(frames: Iterable[CanFrame], cfg: FeatureConfig = FeatureConfig()
                   ) -> Tuple[np.ndarray, np.ndarray]:
    """Fold ``extract`` over a log with a fresh history.

    Returns ``(X, y)`` with ``X`` of shape (n, 20) and integer labels ``y``.
    """
    frames = list(frames)
    n = len(frames)
    ids = np.fromiter((f.can_id for f in frames), dtype=np.int64, count=n)
    ts = np.fromiter((f.timestamp for f in frames), dtype=np.float64, count=n)
    y = np.fromiter((int(f.label) for f in frames), dtype=np.int64, count=n)
    pad = bytes([cfg.pad_byte])
    payload = np.frombuffer(
        b"".join(f.payload + pad * (PAYLOAD_LEN - f.dlc) for f in frames), dtype=np.uint8
    ).reshape(n, PAYLOAD_LEN)

    # per-id previous timestamp, in log order
    dt = np.full(n, cfg.t_max)
    if n:
        order = np.lexsort((np.arange(n), ids))  # group by id, keep log order inside a group
        same = ids[order][1:] == ids[order][:-1]
        gaps = ts[order][1:] - ts[order][:-1]
        if np.any(same & (gaps < 0)):
            k = np.flatnonzero(same & (gaps < 0))[0]
            bad = frames[order[k + 1]]
            raise NonMonotonicTimestamp(
                f"non-monotonic timestamp for id 0x{bad.can_id:03X} at {bad.timestamp}")
        tgt = order[1:][same]
        dt[tgt] = gaps[same]

    X = np.empty((n, FEATURE_DIM))
    X[:, :ID_BITS] = (ids[:, None] & _BIT_WEIGHTS) > 0
    X[:, ID_BITS] = np.minimum(dt, cfg.t_max) / cfg.t_max
    X[:, ID_BITS + 1:] = payload / 255.0
    return X, y
