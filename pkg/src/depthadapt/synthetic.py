"""Synthetic desk-scale scenes: renderer, trajectory, and sparse map.

A scene is an axis-aligned room with a few axis-aligned boxes, textured by
smooth sinusoid fields evaluated at the ray hit point, viewed from a
parametric look-at trajectory. Rendering is plain ray casting with the ray
parameter equal to camera-space depth, so the depth image falls out of the
intersection test directly. Every rendered depth lies in (0, 20].

The sparse front end mimics a feature-based mapper: each frame associates
existing landmarks into a pixel grid (one per cell, capped at ``max_fts``)
and spawns new landmarks in empty cells. Landmark estimates carry
multiplicative depth noise and keyframe poses carry twist noise; ground
truth is kept alongside for evaluation only. Generation is deterministic in
the scene seed, frame by frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, PoseSE3, se3_exp
from .keyframes import Keyframe, MapPoint, SparsePoint

DEPTH_CAP = 20.0
_T_EPS = 1e-6


@dataclass(frozen=True)
class Box:
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]


@dataclass
class TrajectorySpec:
    """Per-axis position p(s) = base + ramp*s + amp*sin(2*pi*(freq*s + phase))."""

    base: tuple[float, float, float]
    ramp: tuple[float, float, float]
    amp: tuple[float, float, float]
    freq: tuple[float, float, float]
    phase: tuple[float, float, float]
    target: tuple[float, float, float]
    target_sweep: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SceneSpec:
    name: str
    room: Box
    boxes: tuple[Box, ...]
    trajectory: TrajectorySpec
    texture_seed: int
    width: int = 64
    height: int = 48
    focal: float = 60.0
    image_noise: float = 0.0  # sigma_I, additive on [0, 1] intensities
    depth_noise: float = 0.0  # sigma_d, multiplicative on sparse depths
    pose_noise: float = 0.0  # sigma_T, twist components
    grid_size: int = 20
    max_fts: int = 500
    seed: int = 0
    texture_freq: tuple[float, float] = (8.0, 30.0)  # rad/m band of the sinusoids


def env_a(**overrides) -> SceneSpec:
    spec = SceneSpec(
        name="env_a",
        room=Box((-2.4, -1.2, -0.6), (2.4, 1.2, 6.0)),
        boxes=(
            Box((-1.5, 0.2, 2.0), (-0.7, 1.2, 2.8)),
            Box((0.4, -0.1, 2.6), (1.3, 1.2, 3.4)),
            Box((-0.3, 0.5, 1.6), (0.5, 1.2, 2.2)),
        ),
        trajectory=TrajectorySpec(
            base=(0.0, 0.0, 0.0), ramp=(0.0, 0.0, 0.3),
            amp=(0.45, 0.08, 0.0), freq=(0.75, 1.5, 0.0), phase=(0.0, 0.25, 0.0),
            target=(0.0, 0.15, 3.4), target_sweep=(0.5, 0.0, 0.0)),
        texture_seed=101,
    )
    return _override(spec, overrides)


def env_b(**overrides) -> SceneSpec:
    spec = SceneSpec(
        name="env_b",
        room=Box((-2.0, -1.1, -0.6), (2.0, 1.3, 4.6)),
        boxes=(
            Box((-1.4, 0.4, 1.2), (-0.8, 1.3, 1.8)),
            Box((0.7, 0.1, 1.8), (1.5, 1.3, 2.5)),
            Box((-0.5, -0.7, 2.4), (0.4, -0.1, 3.0)),
            Box((0.0, 0.7, 1.0), (0.5, 1.3, 1.4)),
        ),
        trajectory=TrajectorySpec(
            base=(-0.3, 0.05, 0.0), ramp=(0.5, 0.0, 0.25),
            amp=(0.1, 0.1, 0.12), freq=(1.0, 2.0, 1.0), phase=(0.5, 0.0, 0.25),
            target=(0.1, 0.3, 2.4), target_sweep=(-0.6, 0.0, 0.0)),
        texture_seed=202,
    )
    return _override(spec, overrides)


_PRESETS = {"env_a": env_a, "env_b": env_b}


def scene_preset(name: str, **overrides) -> SceneSpec:
    if name not in _PRESETS:
        raise ValueError(f"unknown scene preset {name!r}, have {sorted(_PRESETS)}")
    return _PRESETS[name](**overrides)


def _override(spec: SceneSpec, overrides: dict) -> SceneSpec:
    for key, value in overrides.items():
        if not hasattr(spec, key):
            raise ValueError(f"unknown scene field {key!r}")
        setattr(spec, key, value)
    return spec


class _Texture:
    """Smooth sinusoid intensity field, one parameter set per primitive."""

    def __init__(self, seed: int, n_primitives: int, freq_band=(8.0, 30.0)):
        rng = np.random.default_rng(seed)
        self.waves = []
        for _ in range(n_primitives):
            dirs = rng.normal(size=(3, 3))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            freqs = rng.uniform(freq_band[0], freq_band[1], size=3)
            phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
            amps = np.array([0.18, 0.14, 0.10])
            self.waves.append((dirs * freqs[:, None], phases, amps))

    def eval(self, points: np.ndarray, prim: np.ndarray) -> np.ndarray:
        out = np.full(points.shape[:-1], 0.5)
        for k, (kvecs, phases, amps) in enumerate(self.waves):
            mask = prim == k
            if not np.any(mask):
                continue
            pts = points[mask]
            val = 0.5 + sum(a * np.sin(pts @ kv + p)
                            for kv, p, a in zip(kvecs, phases, amps))
            out[mask] = val
        return np.clip(out, 0.02, 0.98)


def look_at(position: np.ndarray, target: np.ndarray) -> PoseSE3:
    """World-from-camera pose, x right, y down, z toward the target."""
    fwd = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
    fwd = fwd / np.linalg.norm(fwd)
    down = np.array([0.0, 1.0, 0.0])
    right = np.cross(down, fwd)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down_cam = np.cross(fwd, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down_cam, fwd, position
    return PoseSE3.from_matrix(m)


class SyntheticScene:
    """Deterministic keyframe source over a fixed scene."""

    def __init__(self, spec: SceneSpec, n_frames: int):
        if spec.width % 8 or spec.height % 8:
            raise ValueError("image size must be divisible by 8")
        self.spec = spec
        self.n_frames = int(n_frames)
        self.intrinsics = Intrinsics(
            fx=spec.focal, fy=spec.focal,
            cx=(spec.width - 1) / 2.0, cy=(spec.height - 1) / 2.0,
            width=spec.width, height=spec.height)
        self.texture = _Texture(spec.texture_seed, 6 + len(spec.boxes),
                                freq_band=spec.texture_freq)
        self.map_points: dict[int, MapPoint] = {}
        self.true_positions: dict[int, np.ndarray] = {}
        self._next_point_id = 0
        self._cache: dict[int, Keyframe] = {}

    # ---- trajectory ----

    def gt_pose(self, index: int) -> PoseSE3:
        s = index / max(1, self.n_frames - 1)
        tr = self.spec.trajectory
        base, ramp = np.asarray(tr.base), np.asarray(tr.ramp)
        amp, freq, phase = np.asarray(tr.amp), np.asarray(tr.freq), np.asarray(tr.phase)
        pos = base + ramp * s + amp * np.sin(2.0 * np.pi * (freq * s + phase))
        target = np.asarray(tr.target) + np.asarray(tr.target_sweep) * (s - 0.5)
        return look_at(pos, target)

    def gt_trajectory(self) -> list[tuple[float, PoseSE3]]:
        return [(float(i), self.gt_pose(i)) for i in range(self.n_frames)]

    # ---- rendering ----

    def render_clean(self, pose_wc: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
        """(intensity, depth) images for a camera pose; depth in (0, 20]."""
        K = self.intrinsics
        rays_cam = K.rays().reshape(-1, 3)
        r = pose_wc.rotation()
        origin = pose_wc.t
        dirs = rays_cam @ r.T
        n = dirs.shape[0]
        best_t = np.full(n, np.inf)
        best_prim = np.zeros(n, dtype=np.int64)

        safe = np.where(np.abs(dirs) > 1e-12, dirs, 1e-12)
        room = self.spec.room
        lo, hi = np.asarray(room.lo), np.asarray(room.hi)
        # Camera sits inside the room, so the exit distance per axis is the
        # far slab in the direction of travel; the room hit is their minimum.
        far = np.where(dirs > 0, hi, lo)
        t_axes = (far - origin) / safe
        axis = np.argmin(t_axes, axis=1)
        t_room = t_axes[np.arange(n), axis]
        sign_pos = dirs[np.arange(n), axis] > 0
        prim_room = axis * 2 + sign_pos.astype(np.int64)
        best_t = t_room
        best_prim = prim_room

        for bi, box in enumerate(self.spec.boxes):
            blo, bhi = np.asarray(box.lo), np.asarray(box.hi)
            t1 = (blo - origin) / safe
            t2 = (bhi - origin) / safe
            t_near = np.minimum(t1, t2).max(axis=1)
            t_far = np.maximum(t1, t2).min(axis=1)
            hit = (t_near <= t_far) & (t_near > _T_EPS) & (t_near < best_t)
            best_t = np.where(hit, t_near, best_t)
            best_prim = np.where(hit, 6 + bi, best_prim)

        depth = np.clip(best_t, None, DEPTH_CAP)
        points = origin + dirs * depth[:, None]
        shade = self.texture.eval(points, best_prim)
        h, w = K.height, K.width
        return (shade.reshape(h, w).astype(np.float32),
                depth.reshape(h, w).astype(np.float32))

    # ---- keyframe generation with the sparse map ----

    def keyframe(self, index: int) -> Keyframe:
        """Render (and cache) the keyframe for a frame index."""
        if index >= self.n_frames or index < 0:
            raise IndexError(f"frame {index} outside 0..{self.n_frames - 1}")
        for i in range(index + 1):
            if i not in self._cache:
                self._cache[i] = self._generate(i)
        return self._cache[index]

    def _rng(self, index: int, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.spec.seed, self.spec.texture_seed, index, stream])

    def _generate(self, index: int) -> Keyframe:
        spec = self.spec
        K = self.intrinsics
        gt_pose = self.gt_pose(index)
        shade, depth = self.render_clean(gt_pose)

        image = shade
        if spec.image_noise > 0:
            noise = self._rng(index, 1).normal(0.0, spec.image_noise, size=shade.shape)
            image = np.clip(shade + noise, 0.0, 1.0).astype(np.float32)

        pose = gt_pose
        if spec.pose_noise > 0:
            xi = self._rng(index, 2).normal(0.0, spec.pose_noise, size=6)
            pose = gt_pose.compose(se3_exp(xi))

        g = spec.grid_size
        cells_x = max(1, K.width // g)
        cells_y = max(1, K.height // g)
        occupancy: dict[tuple[int, int], int] = {}

        # Associate existing landmarks first: estimated position through the
        # stored pose for the measurement, true position through the true
        # pose for the visibility test.
        t_cw = pose.inverse()
        t_cw_true = gt_pose.inverse()
        sparse: list[SparsePoint] = []
        for pid in sorted(self.map_points):
            mp = self.map_points[pid]
            if mp.culled:
                continue
            x_est = t_cw.apply(mp.position)
            if x_est[2] <= 1e-6:
                continue
            u = K.fx * x_est[0] / x_est[2] + K.cx
            v = K.fy * x_est[1] / x_est[2] + K.cy
            if not (0 <= u <= K.width - 1 and 0 <= v <= K.height - 1):
                continue
            x_true = t_cw_true.apply(self.true_positions[pid])
            if x_true[2] <= 1e-6:
                continue
            ut = K.fx * x_true[0] / x_true[2] + K.cx
            vt = K.fy * x_true[1] / x_true[2] + K.cy
            if not (0 <= ut <= K.width - 1 and 0 <= vt <= K.height - 1):
                continue
            iu, iv = int(round(ut)), int(round(vt))
            if abs(x_true[2] - depth[iv, iu]) > max(0.05, 0.03 * x_true[2]):
                continue  # occluded in this view
            cell = (int(v) // g, int(u) // g)
            if cell in occupancy or len(sparse) >= spec.max_fts:
                continue
            occupancy[cell] = pid
            sparse.append(SparsePoint(float(u), float(v), float(x_est[2]), pid))
            mp.observations[index] = (float(u), float(v))

        # Spawn new landmarks in empty grid cells.
        depth_rng = self._rng(index, 3)
        for cy in range(cells_y):
            for cx in range(cells_x):
                if (cy, cx) in occupancy or len(sparse) >= spec.max_fts:
                    continue
                u = min(cx * g + g // 2, K.width - 1)
                v = min(cy * g + g // 2, K.height - 1)
                d_true = float(depth[v, u])
                ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
                x_true = gt_pose.apply(ray * d_true)
                d_est = d_true
                if spec.depth_noise > 0:
                    d_est = d_true * (1.0 + spec.depth_noise * depth_rng.standard_normal())
                    d_est = float(np.clip(d_est, 0.05, DEPTH_CAP))
                x_est = pose.apply(ray * d_est)
                pid = self._next_point_id
                self._next_point_id += 1
                mp = MapPoint(id=pid, position=x_est,
                              observations={index: (float(u), float(v))})
                self.map_points[pid] = mp
                self.true_positions[pid] = x_true
                occupancy[(cy, cx)] = pid
                sparse.append(SparsePoint(float(u), float(v), float(d_est), pid))

        return Keyframe(id=index, pose=pose, image=image, sparse=sparse,
                        timestamp=float(index), gt_depth=depth, gt_pose=gt_pose)


def feed_store(scene: SyntheticScene, store, upto: int) -> None:
    """Push the first ``upto`` keyframes and their landmarks into a store.

    The store receives its own MapPoint records (observations are wired by
    add_keyframe); Keyframe objects are shared with the scene cache.
    """
    for i in range(upto):
        kf = scene.keyframe(i)
        for p in kf.sparse:
            if p.map_point_id not in store.map_points:
                src = scene.map_points[p.map_point_id]
                store.add_map_point(MapPoint(id=src.id, position=src.position.copy(),
                                             observations={}))
        store.add_keyframe(kf)
