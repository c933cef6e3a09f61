"""Depth and trajectory metrics.

Three quantities summarize a run: the percentage of depth pixels within a
relative error band (after an optional scale correction), the scale
invariant error e_si = std(log z - log z*), and absolute trajectory RMSE
after closed-form least-squares alignment. e_si is identical whether fed
depths or inverse depths, since inversion only flips the sign of every log
ratio.

Scale correction comes in two flavors because rescaled evaluations appear
with two different conventions: a global least-squares fit on inverse depth
(global_lsq) and median scaling (global_median pools all frames,
per_frame_median rescales each frame independently).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, PoseSE3
from .keyframes import KeyframeStore
from .tum import associate

SCALING_MODES = ("none", "global_median", "global_lsq", "per_frame_median")
ALIGN_MODES = ("none", "se3", "sim3")


@dataclass(frozen=True)
class DepthEvalConfig:
    rel_threshold: float = 0.1
    scaling: str = "none"
    min_depth: float = 0.1
    max_depth: float = 20.0

    def __post_init__(self):
        if self.rel_threshold <= 0:
            raise ValueError("rel_threshold must be positive")
        if self.scaling not in SCALING_MODES:
            raise ValueError(f"unknown scaling mode {self.scaling!r}")
        if not 0 < self.min_depth < self.max_depth:
            raise ValueError("need 0 < min_depth < max_depth")


def _valid_mask(gt: np.ndarray, cfg: DepthEvalConfig) -> np.ndarray:
    return np.isfinite(gt) & (gt >= cfg.min_depth) & (gt <= cfg.max_depth)


def _scale_factor(pred: np.ndarray, gt: np.ndarray, mode: str) -> float:
    """Multiplier s such that s * pred is the corrected prediction."""
    if mode == "none":
        return 1.0
    if np.any(pred <= 0):
        raise ValueError("scale correction requires positive predictions")
    if mode in ("global_median", "per_frame_median"):
        return float(np.median(gt) / np.median(pred))
    # Least squares on inverse depth: a = argmin sum (a/pred - 1/gt)^2,
    # corrected depth = pred / a.
    ip, ig = 1.0 / pred, 1.0 / gt
    a = float(np.dot(ip, ig) / np.dot(ip, ip))
    return 1.0 / a


def percent_correct(pred: np.ndarray, gt: np.ndarray,
                    cfg: DepthEvalConfig = DepthEvalConfig(),
                    scale: float | None = None) -> float:
    """Percentage of valid pixels with |pred - gt| / gt below the threshold.

    ``scale`` overrides the per-call scale estimate (used by the batch
    evaluator to apply one global factor across frames).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    mask = _valid_mask(gt, cfg)
    if not np.any(mask):
        raise ValueError("no valid ground-truth pixels")
    p, g = pred[mask], gt[mask]
    if scale is None:
        scale = _scale_factor(p, g, cfg.scaling)
    rel = np.abs(scale * p - g) / g
    return 100.0 * float(np.mean(rel < cfg.rel_threshold))


def scale_invariant_error(z: np.ndarray, z_gt: np.ndarray,
                          mask: np.ndarray | None = None) -> float:
    """Standard deviation of log(z / z_gt): sqrt(mean(d^2) - mean(d)^2)."""
    z = np.asarray(z, dtype=np.float64).ravel()
    z_gt = np.asarray(z_gt, dtype=np.float64).ravel()
    if z.shape != z_gt.shape:
        raise ValueError("shapes differ")
    if mask is not None:
        sel = np.asarray(mask, dtype=bool).ravel()
        z, z_gt = z[sel], z_gt[sel]
    if z.size < 2:
        raise ValueError("need at least two samples")
    if np.any(z <= 0) or np.any(z_gt <= 0):
        raise ValueError("depths must be positive")
    d = np.log(z) - np.log(z_gt)
    var = float(np.mean(d * d) - np.mean(d) ** 2)
    return float(np.sqrt(max(var, 0.0)))


@dataclass
class FrameDepthMetrics:
    index: int
    percent_correct: float
    e_si: float
    valid_pixels: int


@dataclass
class DepthEvalResult:
    frames: list[FrameDepthMetrics] = field(default_factory=list)
    mean_percent_correct: float = 0.0
    mean_e_si: float = 0.0
    scale: float | None = None  # set for global scaling modes


def evaluate_depth(preds, gts, cfg: DepthEvalConfig = DepthEvalConfig()) -> DepthEvalResult:
    """Per-frame metrics plus means; global modes share one scale factor."""
    preds = [np.asarray(p, dtype=np.float64) for p in preds]
    gts = [np.asarray(g, dtype=np.float64) for g in gts]
    if len(preds) != len(gts) or not preds:
        raise ValueError("need equal nonzero numbers of predictions and ground truths")

    result = DepthEvalResult()
    if cfg.scaling in ("global_median", "global_lsq"):
        pooled_p, pooled_g = [], []
        for p, g in zip(preds, gts):
            m = _valid_mask(g, cfg)
            pooled_p.append(p[m])
            pooled_g.append(g[m])
        allp, allg = np.concatenate(pooled_p), np.concatenate(pooled_g)
        if allp.size == 0:
            raise ValueError("no valid ground-truth pixels")
        result.scale = _scale_factor(allp, allg, cfg.scaling)

    for i, (p, g) in enumerate(zip(preds, gts)):
        m = _valid_mask(g, cfg)
        if cfg.scaling in ("none", "per_frame_median"):
            frame_scale = _scale_factor(p[m], g[m], cfg.scaling) if np.any(m) else 1.0
        else:
            frame_scale = result.scale
        pc = percent_correct(p, g, cfg, scale=frame_scale)
        esi = scale_invariant_error(frame_scale * p, g, mask=m)
        result.frames.append(FrameDepthMetrics(index=i, percent_correct=pc, e_si=esi,
                                               valid_pixels=int(np.sum(m))))
    result.mean_percent_correct = float(np.mean([f.percent_correct for f in result.frames]))
    result.mean_e_si = float(np.mean([f.e_si for f in result.frames]))
    return result


@dataclass(frozen=True)
class Trajectory:
    times: tuple[float, ...]
    poses: tuple[PoseSE3, ...]

    def __post_init__(self):
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses length mismatch")
        t = np.asarray(self.times)
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_pairs(cls, pairs) -> "Trajectory":
        ts, ps = [], []
        for t, p in pairs:
            ts.append(float(t))
            ps.append(p.copy())
        return cls(times=tuple(ts), poses=tuple(ps))

    def positions(self) -> np.ndarray:
        return np.stack([p.t for p in self.poses]) if self.poses else np.zeros((0, 3))

    def __len__(self) -> int:
        return len(self.times)


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Closed-form (s, R, t) minimizing sum ||dst - (s R src + t)||^2."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    s_fix = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s_fix[-1] = -1.0
    rot = u @ np.diag(s_fix) @ vt
    if with_scale:
        var_s = float(np.mean(np.sum(xs * xs, axis=1)))
        if var_s <= 0:
            raise ValueError("degenerate source positions (zero variance)")
        scale = float(np.sum(d * s_fix) / var_s)
    else:
        scale = 1.0
    trans = mu_d - scale * rot @ mu_s
    return scale, rot, trans


def ate_rmse(est: Trajectory, gt: Trajectory, align: str = "se3",
             tolerance: float = 0.02) -> float:
    """RMSE of translation residuals after trajectory alignment.

    Pose pairs are associated by nearest timestamp within ``tolerance``.
    ``align`` is none (direct residuals), se3, or sim3 (adds the scale a
    monocular estimate cannot observe).
    """
    if align not in ALIGN_MODES:
        raise ValueError(f"unknown alignment mode {align!r}")
    matches = associate(list(gt.times), list(est.times), tolerance)
    if len(matches) < 3:
        raise ValueError(f"need at least 3 associated pose pairs, got {len(matches)}")
    gi = np.array([m[0] for m in matches])
    ei = np.array([m[1] for m in matches])
    p_est = est.positions()[ei]
    p_gt = gt.positions()[gi]
    if align == "none":
        resid = p_gt - p_est
    else:
        s, rot, trans = umeyama(p_est, p_gt, with_scale=(align == "sim3"))
        resid = p_gt - (s * (p_est @ rot.T) + trans)
    return float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


def _bilinear_scalar(img: np.ndarray, u: float, v: float) -> float | None:
    h, w = img.shape
    if not (0 <= u <= w - 1 and 0 <= v <= h - 1):
        return None
    x0 = int(np.clip(np.floor(u), 0, w - 2))
    y0 = int(np.clip(np.floor(v), 0, h - 2))
    fu, fv = u - x0, v - y0
    return float(img[y0, x0] * (1 - fu) * (1 - fv) + img[y0, x0 + 1] * fu * (1 - fv)
                 + img[y0 + 1, x0] * (1 - fu) * fv + img[y0 + 1, x0 + 1] * fu * fv)


def map_depth_error(store: KeyframeStore, K: Intrinsics,
                    gt_depths: dict[int, np.ndarray] | None = None) -> float:
    """e_si between live map-point host depths and ground truth.

    Each surviving point is projected into its host keyframe; its camera
    z-depth is compared against the ground-truth depth image read
    bilinearly at the same subpixel. ``gt_depths`` overrides the per
    keyframe ``gt_depth`` attribute.
    """
    z, z_gt = [], []
    for mp in store.live_points():
        if mp.host_keyframe is None:
            continue
        kf = store.keyframes.get(mp.host_keyframe)
        if kf is None:
            continue
        gt = gt_depths.get(mp.host_keyframe) if gt_depths is not None else kf.gt_depth
        if gt is None:
            continue
        x = kf.pose.inverse().apply(mp.position)
        if x[2] <= 1e-9:
            continue
        u = K.fx * x[0] / x[2] + K.cx
        v = K.fy * x[1] / x[2] + K.cy
        val = _bilinear_scalar(np.asarray(gt, dtype=np.float64), float(u), float(v))
        if val is None or val <= 0:
            continue
        z.append(float(x[2]))
        z_gt.append(val)
    if len(z) < 2:
        raise ValueError("no valid map-point depth pairs")
    return scale_invariant_error(np.asarray(z), np.asarray(z_gt))
