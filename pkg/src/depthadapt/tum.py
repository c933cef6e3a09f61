"""Loader for TUM RGB-D style sequence directories.

Expects ``rgb.txt``, ``depth.txt``, and ``groundtruth.txt`` index files
(lines of ``timestamp value...``, ``#`` comments ignored). RGB and depth
frames are associated to the nearest timestamp within a tolerance; frames
without a partner are skipped. Depth PNGs are 16-bit with 5000 units per
meter. Ground-truth lines are ``timestamp tx ty tz qx qy qz qw``
(world-from-camera). Every k-th associated frame is promoted to a keyframe.

ICL-NUIM sequences exported in this layout load through the same path.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .geometry import Intrinsics, PoseSE3
from .keyframes import Keyframe, MapPoint, SparsePoint

DEPTH_SCALE = 5000.0
DEFAULT_TOLERANCE = 0.02


@dataclass
class TumConfig:
    directory: str
    intrinsics: Intrinsics
    keyframe_stride: int = 5
    tolerance: float = DEFAULT_TOLERANCE
    grid_size: int = 20
    max_fts: int = 500
    depth_noise: float = 0.0
    seed: int = 0


def read_index(path) -> list[tuple[float, str]]:
    """(timestamp, path) pairs from an rgb.txt / depth.txt style file."""
    entries = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            entries.append((float(parts[0]), parts[1]))
    entries.sort(key=lambda e: e[0])
    return entries


def read_trajectory(path) -> list[tuple[float, PoseSE3]]:
    """(timestamp, world-from-camera pose) pairs from groundtruth.txt."""
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            t, tx, ty, tz, qx, qy, qz, qw = vals[:8]
            out.append((t, PoseSE3(np.array([qw, qx, qy, qz]), np.array([tx, ty, tz]))))
    out.sort(key=lambda e: e[0])
    return out


def associate(ref_times: list[float], query_times: list[float],
              tolerance: float) -> list[tuple[int, int]]:
    """Nearest-timestamp matches (ref index, query index) within tolerance.

    Greedy in reference order; each query entry is used at most once.
    """
    matches = []
    used = set()
    qt = np.asarray(query_times)
    for i, t in enumerate(ref_times):
        if qt.size == 0:
            break
        j = int(np.argmin(np.abs(qt - t)))
        if abs(qt[j] - t) <= tolerance and j not in used:
            matches.append((i, j))
            used.add(j)
    return matches


def _load_gray(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img, dtype=np.float32) / 255.0


def _load_depth(path) -> np.ndarray:
    img = np.asarray(Image.open(path))
    return img.astype(np.float32) / DEPTH_SCALE


def _crop_to_multiple(img: np.ndarray, multiple: int = 8) -> np.ndarray:
    h, w = img.shape[:2]
    return img[:h - h % multiple if h % multiple else h,
               :w - w % multiple if w % multiple else w]


def load_sequence(cfg: TumConfig) -> tuple[list[Keyframe], dict[int, MapPoint], list[tuple[float, PoseSE3]]]:
    """Keyframes, map points, and the ground-truth trajectory for a sequence.

    Sparse points are sampled from the depth image on a ``grid_size`` pixel
    grid, standing in for a feature front end; points at the same grid cell
    across consecutive keyframes are not associated (each keyframe spawns its
    own landmarks, capped at ``max_fts``).
    """
    root = cfg.directory
    for name in ("rgb.txt", "depth.txt", "groundtruth.txt"):
        if not os.path.exists(os.path.join(root, name)):
            raise FileNotFoundError(f"missing {name} under {root}")
    rgb = read_index(os.path.join(root, "rgb.txt"))
    depth = read_index(os.path.join(root, "depth.txt"))
    gt = read_trajectory(os.path.join(root, "groundtruth.txt"))

    pairs = associate([t for t, _ in rgb], [t for t, _ in depth], cfg.tolerance)
    gt_times = [t for t, _ in gt]
    keyframes: list[Keyframe] = []
    map_points: dict[int, MapPoint] = {}
    rng = np.random.default_rng(cfg.seed)
    next_pid = 0
    K = cfg.intrinsics

    for n, (ri, di) in enumerate(pairs):
        if n % cfg.keyframe_stride:
            continue
        t_rgb = rgb[ri][0]
        gmatches = associate([t_rgb], gt_times, cfg.tolerance)
        if not gmatches:
            continue
        pose = gt[gmatches[0][1]][1]
        image = _crop_to_multiple(_load_gray(os.path.join(root, rgb[ri][1])))
        dimg = _crop_to_multiple(_load_depth(os.path.join(root, depth[di][1])))
        if image.shape != dimg.shape:
            raise ValueError(f"rgb/depth size mismatch at t={t_rgb}: {image.shape} vs {dimg.shape}")
        h, w = image.shape
        kid = len(keyframes)
        sparse = []
        g = cfg.grid_size
        for cy in range(max(1, h // g)):
            for cx in range(max(1, w // g)):
                if len(sparse) >= cfg.max_fts:
                    break
                u = min(cx * g + g // 2, w - 1)
                v = min(cy * g + g // 2, h - 1)
                d = float(dimg[v, u])
                if d <= 0.0:
                    continue  # missing depth reading
                if cfg.depth_noise > 0:
                    d = float(max(0.05, d * (1.0 + cfg.depth_noise * rng.standard_normal())))
                ray = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
                pos = pose.apply(ray * d)
                map_points[next_pid] = MapPoint(id=next_pid, position=pos,
                                                observations={kid: (float(u), float(v))})
                sparse.append(SparsePoint(float(u), float(v), d, next_pid))
                next_pid += 1
        keyframes.append(Keyframe(id=kid, pose=pose, image=image, sparse=sparse,
                                  timestamp=t_rgb, gt_depth=dimg, gt_pose=pose.copy()))
    return keyframes, map_points, gt
