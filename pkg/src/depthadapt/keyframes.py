"""Keyframe and map-point storage, channels, and the wire format.

The store is the single mutable hub between the producer (renderer or
dataset loader), the trainer, and bundle adjustment: one writer at a time,
snapshot reads for everyone else. Channels deliver published payloads to
subscribers in order and can mirror every record into a message log for
offline replay.

Wire format (little-endian, each record length-prefixed with u32):
keyframe records start with magic ``KFA1``, u64 id, pose as 7 float64
(qw qx qy qz tx ty tz, world-from-camera), u32 H, u32 W, float32 row-major
image, u32 sparse count, then per point float32 u, v, depth and u64
map-point id. Graph records use magic ``KFG1``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from threading import RLock

import numpy as np

from .geometry import PoseSE3

KF_MAGIC = b"KFA1"
GRAPH_MAGIC = b"KFG1"
NO_HOST = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class SparsePoint:
    """One sparse depth measurement inside a keyframe."""

    u: float
    v: float
    depth: float
    map_point_id: int


@dataclass
class Keyframe:
    """A posed grayscale image with sparse depth anchors."""

    id: int
    pose: PoseSE3  # world-from-camera
    image: np.ndarray  # float32 (H, W) in [0, 1]
    sparse: list[SparsePoint] = field(default_factory=list)
    timestamp: float = 0.0
    gt_depth: np.ndarray | None = None  # evaluation only, never trained on
    gt_pose: PoseSE3 | None = None
    last_val_loss: float | None = None

    def sparse_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(coords (N, 2), depths (N,), ids (N,)) as numpy arrays."""
        if not self.sparse:
            return (np.zeros((0, 2)), np.zeros(0), np.zeros(0, dtype=np.int64))
        coords = np.array([[p.u, p.v] for p in self.sparse], dtype=np.float64)
        depths = np.array([p.depth for p in self.sparse], dtype=np.float64)
        ids = np.array([p.map_point_id for p in self.sparse], dtype=np.int64)
        return coords, depths, ids


@dataclass
class MapPoint:
    """A 3D landmark with its observations (keyframe id -> pixel)."""

    id: int
    position: np.ndarray  # world, float64 (3,)
    observations: dict[int, tuple[float, float]] = field(default_factory=dict)
    host_keyframe: int | None = None
    culled: bool = False


@dataclass(frozen=True)
class KeyframeGraph:
    """Immutable snapshot of poses and landmarks, tagged with a sequence number."""

    seq: int
    poses: tuple[tuple[int, PoseSE3], ...]
    points: tuple[tuple[int, tuple[float, float, float], int, bool], ...]
    # points entries: (id, position, host id or -1, culled)


class Channel:
    """Ordered single-producer broadcast to callable subscribers.

    A subscriber that raises is dropped with a warning so one bad consumer
    cannot wedge the producer. An optional encoder mirrors records into a
    message log.
    """

    def __init__(self, name: str, encoder=None, log_path=None):
        self.name = name
        self._subscribers: list = []
        self._encoder = encoder
        self._log = open(log_path, "ab") if log_path else None

    def subscribe(self, fn) -> None:
        self._subscribers.append(fn)

    def publish(self, payload) -> None:
        if self._log is not None and self._encoder is not None:
            record = self._encoder(payload)
            self._log.write(struct.pack("<I", len(record)))
            self._log.write(record)
            self._log.flush()
        dead = []
        for fn in self._subscribers:
            try:
                fn(payload)
            except Exception as exc:  # noqa: BLE001 - isolate bad consumers
                warnings.warn(f"channel {self.name}: dropping subscriber after {exc!r}")
                dead.append(fn)
        for fn in dead:
            self._subscribers.remove(fn)

    def close(self) -> None:
        if self._log is not None:
            self._log.close()
            self._log = None


def encode_keyframe(kf: Keyframe) -> bytes:
    img = np.ascontiguousarray(kf.image, dtype="<f4")
    h, w = img.shape
    parts = [KF_MAGIC,
             struct.pack("<Q", kf.id),
             np.asarray(np.concatenate([kf.pose.q, kf.pose.t]), dtype="<f8").tobytes(),
             struct.pack("<II", h, w),
             img.tobytes(),
             struct.pack("<I", len(kf.sparse))]
    for p in kf.sparse:
        parts.append(struct.pack("<fff", p.u, p.v, p.depth))
        parts.append(struct.pack("<Q", p.map_point_id))
    return b"".join(parts)


def decode_keyframe(record: bytes) -> Keyframe:
    if record[:4] != KF_MAGIC:
        raise ValueError(f"bad keyframe record magic {record[:4]!r}")
    off = 4
    (kid,) = struct.unpack_from("<Q", record, off)
    off += 8
    pose_vals = np.frombuffer(record, dtype="<f8", count=7, offset=off)
    off += 56
    h, w = struct.unpack_from("<II", record, off)
    off += 8
    img = np.frombuffer(record, dtype="<f4", count=h * w, offset=off).reshape(h, w).copy()
    off += h * w * 4
    (count,) = struct.unpack_from("<I", record, off)
    off += 4
    sparse = []
    for _ in range(count):
        u, v, d = struct.unpack_from("<fff", record, off)
        off += 12
        (mid,) = struct.unpack_from("<Q", record, off)
        off += 8
        sparse.append(SparsePoint(u, v, d, mid))
    pose = PoseSE3(pose_vals[:4], pose_vals[4:])
    return Keyframe(id=kid, pose=pose, image=img, sparse=sparse)


def encode_graph(graph: KeyframeGraph) -> bytes:
    parts = [GRAPH_MAGIC, struct.pack("<Q", graph.seq), struct.pack("<I", len(graph.poses))]
    for kid, pose in graph.poses:
        parts.append(struct.pack("<Q", kid))
        parts.append(np.asarray(np.concatenate([pose.q, pose.t]), dtype="<f8").tobytes())
    parts.append(struct.pack("<I", len(graph.points)))
    for pid, pos, host, culled in graph.points:
        parts.append(struct.pack("<Q", pid))
        parts.append(np.asarray(pos, dtype="<f8").tobytes())
        parts.append(struct.pack("<QB", int(host) if host >= 0 else int(NO_HOST), int(culled)))
    return b"".join(parts)


def decode_graph(record: bytes) -> KeyframeGraph:
    if record[:4] != GRAPH_MAGIC:
        raise ValueError(f"bad graph record magic {record[:4]!r}")
    off = 4
    (seq,) = struct.unpack_from("<Q", record, off)
    off += 8
    (np_poses,) = struct.unpack_from("<I", record, off)
    off += 4
    poses = []
    for _ in range(np_poses):
        (kid,) = struct.unpack_from("<Q", record, off)
        off += 8
        vals = np.frombuffer(record, dtype="<f8", count=7, offset=off)
        off += 56
        poses.append((kid, PoseSE3(vals[:4], vals[4:])))
    (n_pts,) = struct.unpack_from("<I", record, off)
    off += 4
    points = []
    for _ in range(n_pts):
        (pid,) = struct.unpack_from("<Q", record, off)
        off += 8
        pos = tuple(np.frombuffer(record, dtype="<f8", count=3, offset=off))
        off += 24
        host_raw, culled = struct.unpack_from("<QB", record, off)
        off += 9
        host = -1 if host_raw == int(NO_HOST) else int(host_raw)
        points.append((pid, pos, host, bool(culled)))
    return KeyframeGraph(seq=seq, poses=tuple(poses), points=tuple(points))


def read_message_log(path) -> list[bytes]:
    """All length-prefixed records from a channel log, in write order."""
    records = []
    with open(path, "rb") as f:
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated record length prefix")
            (n,) = struct.unpack("<I", head)
            body = f.read(n)
            if len(body) != n:
                raise ValueError("truncated record body")
            records.append(body)
    return records


class KeyframeStore:
    """Keyframes and map points behind a single-writer lock."""

    def __init__(self):
        self._lock = RLock()
        self.keyframes: dict[int, Keyframe] = {}
        self.map_points: dict[int, MapPoint] = {}
        self.graph_seq = 0

    def add_keyframe(self, kf: Keyframe) -> None:
        with self._lock:
            if kf.id in self.keyframes:
                raise ValueError(f"duplicate keyframe id {kf.id}")
            self.keyframes[kf.id] = kf
            for p in kf.sparse:
                mp = self.map_points.get(p.map_point_id)
                if mp is not None and kf.id not in mp.observations:
                    mp.observations[kf.id] = (p.u, p.v)

    def add_map_point(self, mp: MapPoint) -> None:
        with self._lock:
            self.map_points[mp.id] = mp

    def ordered_ids(self) -> list[int]:
        with self._lock:
            return sorted(self.keyframes)

    def latest(self) -> Keyframe:
        with self._lock:
            return self.keyframes[max(self.keyframes)]

    def neighbors(self, kf_id: int) -> list[Keyframe]:
        """Adjacent-in-sequence keyframes that exist, previous then next."""
        with self._lock:
            ids = sorted(self.keyframes)
            pos = ids.index(kf_id)
            out = []
            if pos > 0:
                out.append(self.keyframes[ids[pos - 1]])
            if pos + 1 < len(ids):
                out.append(self.keyframes[ids[pos + 1]])
            return out

    def live_points(self) -> list[MapPoint]:
        with self._lock:
            return [mp for mp in self.map_points.values() if not mp.culled]

    def snapshot(self) -> KeyframeGraph:
        """Checksum-stable immutable view of poses and landmarks."""
        with self._lock:
            self.graph_seq += 1
            poses = tuple((kid, self.keyframes[kid].pose.copy()) for kid in sorted(self.keyframes))
            points = tuple(
                (mp.id, tuple(float(x) for x in mp.position),
                 -1 if mp.host_keyframe is None else mp.host_keyframe, mp.culled)
                for mp in (self.map_points[i] for i in sorted(self.map_points)))
            return KeyframeGraph(seq=self.graph_seq, poses=poses, points=points)

    def apply_graph(self, graph: KeyframeGraph) -> None:
        """Adopt updated poses and landmark states from a snapshot."""
        with self._lock:
            for kid, pose in graph.poses:
                if kid in self.keyframes:
                    self.keyframes[kid].pose = pose.copy()
            for pid, pos, host, culled in graph.points:
                mp = self.map_points.get(pid)
                if mp is None:
                    continue
                mp.position = np.asarray(pos, dtype=np.float64)
                mp.host_keyframe = None if host < 0 else host
                mp.culled = culled
