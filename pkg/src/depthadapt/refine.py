"""Depth-gated map culling and global photometric bundle adjustment.

Culling compares each landmark's depth in its host keyframe against the
network prediction read at the same subpixel: keep when the gap is inside a
relative band (|d_mp - d_cnn| < gamma * d_cnn) or when the prediction is
beyond d_max and therefore untrusted. The host is the observing keyframe
with the lowest cached validation loss, ties broken toward the lower id.

Bundle adjustment is direct: each landmark anchors a 3x3 patch at its host
pixel with one shared inverse depth (fronto-parallel patch), and each edge
scores that patch against another keyframe by warping and bilinear
sampling. Edges come from existing observations first, then the nearest
keyframes by pose distance, up to five per landmark; landmarks with fewer
than two valid edges are dropped. Levenberg-Marquardt with analytic
Jacobians and a Schur complement over the landmark block; the first
keyframe is frozen as gauge; normal equations run in float64; a candidate
step is rejected if it fails to decrease the cost, drives an inverse depth
out of (0, inf), or invalidates any edge's reprojection (so the
least-squares support never changes under an accepted step).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, PoseSE3, pose_distance, se3_exp
from .keyframes import KeyframeStore, MapPoint

_PATCH = np.array([(du, dv) for dv in (-1, 0, 1) for du in (-1, 0, 1)], dtype=np.float64)
_RHO_MAX = 1.0e3
_Z_MIN = 1e-6


@dataclass(frozen=True)
class CullConfig:
    gamma: float = 0.5
    d_max: float = 1.5


@dataclass
class CullReport:
    kept: int = 0
    culled: int = 0
    skipped: int = 0  # no host, no depth map, or invalid host projection


def cull_check(d_mp: float, d_cnn: float, cfg: CullConfig) -> bool:
    """True to keep the landmark."""
    return abs(d_mp - d_cnn) < cfg.gamma * d_cnn or d_cnn > cfg.d_max


def select_host(store: KeyframeStore, mp: MapPoint) -> int | None:
    """Observing keyframe with the lowest cached validation loss.

    Keyframes without a cached loss do not compete; with no candidates at
    all the choice is deferred (None).
    """
    best = None
    for kid in sorted(mp.observations):
        kf = store.keyframes.get(kid)
        if kf is None or kf.last_val_loss is None:
            continue
        key = (kf.last_val_loss, kid)
        if best is None or key < best[0]:
            best = (key, kid)
    return None if best is None else best[1]


def assign_hosts(store: KeyframeStore) -> int:
    """Pick hosts for all live landmarks; returns how many were deferred."""
    deferred = 0
    for mp in store.live_points():
        host = select_host(store, mp)
        if host is None:
            deferred += 1
        mp.host_keyframe = host
    return deferred


def _bilinear(img: np.ndarray, u, v):
    """Bilinear read of a single image; returns (values, valid)."""
    h, w = img.shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fu = np.clip(u - x0, 0.0, 1.0)
    fv = np.clip(v - y0, 0.0, 1.0)
    val = (img[y0, x0] * (1 - fu) * (1 - fv) + img[y0, x0 + 1] * fu * (1 - fv)
           + img[y0 + 1, x0] * (1 - fu) * fv + img[y0 + 1, x0 + 1] * fu * fv)
    return val, valid


def _bilinear_stack(stack: np.ndarray, idx: np.ndarray, u: np.ndarray, v: np.ndarray,
                    with_grad: bool = False):
    """Bilinear read from per-sample images of a (P, H, W) stack.

    ``with_grad`` also returns the exact derivative of the interpolant
    (du, dv). Using the interpolant's own derivative, not a smoothed
    gradient image, keeps the least-squares linearization consistent with
    the sampled residual, so the optimizer can converge to machine
    precision instead of stalling at the mismatch scale.
    """
    _, h, w = stack.shape
    valid = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    x0 = np.clip(np.floor(u), 0, w - 2).astype(np.int64)
    y0 = np.clip(np.floor(v), 0, h - 2).astype(np.int64)
    fu = np.clip(u - x0, 0.0, 1.0)
    fv = np.clip(v - y0, 0.0, 1.0)
    i00 = stack[idx, y0, x0]
    i01 = stack[idx, y0, x0 + 1]
    i10 = stack[idx, y0 + 1, x0]
    i11 = stack[idx, y0 + 1, x0 + 1]
    val = i00 * (1 - fu) * (1 - fv) + i01 * fu * (1 - fv) + i10 * (1 - fu) * fv + i11 * fu * fv
    if not with_grad:
        return val, valid
    du = (i01 - i00) * (1 - fv) + (i11 - i10) * fv
    dv = (i10 - i00) * (1 - fu) + (i11 - i01) * fu
    return val, valid, du, dv


def cull_map(store: KeyframeStore, depth_maps: dict[int, np.ndarray],
             K: Intrinsics, cfg: CullConfig) -> CullReport:
    """Apply the depth gate to every live landmark with a host.

    ``depth_maps`` holds one predicted (H, W) depth image per keyframe id.
    Landmarks without a host, without a depth map, or with an invalid host
    projection are kept and counted as skipped.
    """
    report = CullReport()
    for mp in store.live_points():
        if mp.host_keyframe is None or mp.host_keyframe not in depth_maps:
            report.skipped += 1
            continue
        kf = store.keyframes[mp.host_keyframe]
        x = kf.pose.inverse().apply(mp.position)
        if x[2] <= _Z_MIN:
            report.skipped += 1
            continue
        u = K.fx * x[0] / x[2] + K.cx
        v = K.fy * x[1] / x[2] + K.cy
        val, ok = _bilinear(depth_maps[mp.host_keyframe], u, v)
        if not bool(ok):
            report.skipped += 1
            continue
        if cull_check(float(x[2]), float(val), cfg):
            report.kept += 1
        else:
            mp.culled = True
            report.culled += 1
    return report


@dataclass
class BALandmark:
    point_id: int
    host: int  # keyframe slot in the problem
    anchor: tuple[float, float]  # host pixel (u, v)
    inv_depth: float


@dataclass
class BAProblem:
    kf_ids: list[int]
    poses_cw: list[PoseSE3]  # camera-from-world, optimization frame
    images: np.ndarray  # (P, H, W) float64 grayscale
    intrinsics: Intrinsics
    landmarks: list[BALandmark]
    edge_landmark: np.ndarray  # (E,) landmark index
    edge_target: np.ndarray  # (E,) keyframe slot
    rays: np.ndarray  # (L, 9, 3) host patch rays, z = 1
    ref: np.ndarray  # (E, 9) reference patch per edge (host intensities)
    dropped: int = 0


@dataclass(frozen=True)
class BAOptions:
    max_iters: int = 25
    init_lambda: float = 1e-4
    lambda_up: float = 10.0
    lambda_down: float = 1.0 / 3.0
    tol: float = 1e-8  # relative cost decrease
    lambda_max: float = 1e10
    huber_delta: float = 0.0  # 0 disables the robust kernel
    freeze_poses: bool = False
    max_edges_per_point: int = 5
    build_margin: float = 0.0  # extra in-image border required when selecting edges


@dataclass
class IterationRecord:
    iteration: int
    cost: float
    lam: float
    accepted: bool
    step_norm: float


@dataclass
class BAResult:
    initial_cost: float
    final_cost: float
    iterations: list[IterationRecord] = field(default_factory=list)
    poses_wc: dict[int, PoseSE3] = field(default_factory=dict)
    points: dict[int, tuple[np.ndarray, float]] = field(default_factory=dict)
    dropped: int = 0


def _patch_coords(anchor: tuple[float, float]) -> np.ndarray:
    return np.asarray(anchor, dtype=np.float64)[None, :] + _PATCH


def _edge_valid_mask(K: Intrinsics, pose_cw_t: PoseSE3, pose_cw_h: PoseSE3,
                     rays: np.ndarray, rho: float, margin: float = 0.0) -> bool:
    """All nine warped patch samples valid in the target view."""
    rel_r = pose_cw_t.rotation() @ pose_cw_h.rotation().T
    rel_t = pose_cw_t.t - rel_r @ pose_cw_h.t
    x = (rays / rho) @ rel_r.T + rel_t
    z = x[:, 2]
    if np.any(z <= _Z_MIN):
        return False
    u = K.fx * x[:, 0] / z + K.cx
    v = K.fy * x[:, 1] / z + K.cy
    return bool(np.all((u >= margin) & (u <= K.width - 1 - margin)
                       & (v >= margin) & (v <= K.height - 1 - margin)))


def build_ba(store: KeyframeStore, K: Intrinsics,
             options: BAOptions = BAOptions()) -> BAProblem:
    """Assemble the global problem from live hosted landmarks.

    Edge order per landmark: existing observations by keyframe id, then
    remaining keyframes by pose distance to the host, each validity-checked,
    capped at ``max_edges_per_point``. Landmarks with fewer than two valid
    edges are dropped and counted.
    """
    kf_ids = store.ordered_ids()
    if len(kf_ids) < 2:
        raise ValueError("bundle adjustment needs at least two keyframes")
    slot = {kid: i for i, kid in enumerate(kf_ids)}
    poses_cw = [store.keyframes[kid].pose.inverse() for kid in kf_ids]
    images = np.stack([store.keyframes[kid].image.astype(np.float64) for kid in kf_ids])

    landmarks: list[BALandmark] = []
    rays_list, ref_list = [], []
    e_lm, e_tgt = [], []
    dropped = 0
    cap = options.max_edges_per_point

    for mp in store.live_points():
        if mp.host_keyframe is None or mp.host_keyframe not in slot:
            dropped += 1
            continue
        hslot = slot[mp.host_keyframe]
        anchor = mp.observations.get(mp.host_keyframe)
        if anchor is None:
            dropped += 1
            continue
        x_host = poses_cw[hslot].apply(mp.position)
        if x_host[2] <= _Z_MIN:
            dropped += 1
            continue
        rho = 1.0 / float(x_host[2])
        coords = _patch_coords(anchor)
        ref, ok = _bilinear(images[hslot], coords[:, 0], coords[:, 1])
        if not np.all(ok):
            dropped += 1
            continue
        rays = np.stack([(coords[:, 0] - K.cx) / K.fx,
                         (coords[:, 1] - K.cy) / K.fy,
                         np.ones(coords.shape[0])], axis=1)
        host_pose = poses_cw[hslot]
        edges = []
        seen = {hslot}
        candidates = [slot[k] for k in sorted(mp.observations) if k in slot and slot[k] != hslot]
        others = sorted((s for s in range(len(kf_ids)) if s not in set(candidates) | seen),
                        key=lambda s: (pose_distance(store.keyframes[kf_ids[hslot]].pose,
                                                     store.keyframes[kf_ids[s]].pose), s))
        for cand in candidates + others:
            if len(edges) >= cap:
                break
            if cand in seen:
                continue
            seen.add(cand)
            if _edge_valid_mask(K, poses_cw[cand], host_pose, rays, rho,
                                margin=options.build_margin):
                edges.append(cand)
        if len(edges) < 2:
            dropped += 1
            continue
        lm_idx = len(landmarks)
        landmarks.append(BALandmark(point_id=mp.id, host=hslot,
                                    anchor=(float(anchor[0]), float(anchor[1])),
                                    inv_depth=rho))
        rays_list.append(rays)
        ref_list.extend([ref] * len(edges))
        e_lm.extend([lm_idx] * len(edges))
        e_tgt.extend(edges)

    rays_arr = np.stack(rays_list) if rays_list else np.zeros((0, 9, 3))
    ref_arr = np.stack(ref_list) if ref_list else np.zeros((0, 9))
    return BAProblem(kf_ids=kf_ids, poses_cw=poses_cw, images=images, intrinsics=K,
                     landmarks=landmarks,
                     edge_landmark=np.asarray(e_lm, dtype=np.int64),
                     edge_target=np.asarray(e_tgt, dtype=np.int64),
                     rays=rays_arr, ref=ref_arr, dropped=dropped)


def _pose_arrays(poses_cw: list[PoseSE3]):
    r_cw = np.stack([p.rotation() for p in poses_cw])
    t_cw = np.stack([p.t for p in poses_cw])
    r_wc = r_cw.transpose(0, 2, 1)
    t_wc = -np.einsum("pij,pj->pi", r_wc, t_cw)
    return r_cw, t_cw, r_wc, t_wc


def _evaluate(problem: BAProblem, poses_cw: list[PoseSE3], rho: np.ndarray,
              huber_delta: float, with_jacobians: bool):
    """Residuals (and optionally Jacobian blocks) for the current state.

    Returns None if any edge's reprojection is invalid, which callers treat
    as an inadmissible state.
    """
    K = problem.intrinsics
    el, et = problem.edge_landmark, problem.edge_target
    if el.size == 0:
        raise ValueError("bundle adjustment problem has no edges")
    hosts = np.array([problem.landmarks[i].host for i in range(len(problem.landmarks))])
    eh = hosts[el]
    r_cw, t_cw, r_wc, t_wc = _pose_arrays(poses_cw)

    ra = np.einsum("eij,ejk->eik", r_cw[et], r_wc[eh])
    ta = np.einsum("eij,ej->ei", r_cw[et], t_wc[eh]) + t_cw[et]

    x_h = problem.rays[el] / rho[el][:, None, None]  # (E, 9, 3)
    x_t = np.einsum("eij,ekj->eki", ra, x_h) + ta[:, None, :]
    z = x_t[..., 2]
    if np.any(z <= _Z_MIN):
        return None
    u = K.fx * x_t[..., 0] / z + K.cx
    v = K.fy * x_t[..., 1] / z + K.cy

    idx = np.repeat(et[:, None], 9, axis=1)
    if with_jacobians:
        sampled, ok, gx, gy = _bilinear_stack(problem.images, idx, u, v, with_grad=True)
    else:
        sampled, ok = _bilinear_stack(problem.images, idx, u, v)
    if not np.all(ok):
        return None
    resid = problem.ref - sampled  # (E, 9)

    weights = np.ones_like(resid)
    if huber_delta > 0:
        absr = np.abs(resid)
        outer = absr > huber_delta
        weights[outer] = huber_delta / absr[outer]
        cost = float(np.sum(np.where(outer, 2 * huber_delta * absr - huber_delta ** 2,
                                     resid ** 2)))
    else:
        cost = float(np.sum(resid ** 2))

    if not with_jacobians:
        return cost, resid, weights, None

    # d resid / d u = -dI_target/du at the sample.
    dr_du = -gx
    dr_dv = -gy

    zinv = 1.0 / z
    du_dx = np.stack([K.fx * zinv, np.zeros_like(z), -K.fx * x_t[..., 0] * zinv ** 2], axis=-1)
    dv_dx = np.stack([np.zeros_like(z), K.fy * zinv, -K.fy * x_t[..., 1] * zinv ** 2], axis=-1)
    dr_dx = dr_du[..., None] * du_dx + dr_dv[..., None] * dv_dx  # (E, 9, 3)

    # Left-multiplicative update on camera-from-world poses:
    # target: dx/d(delta_t) = [I | -skew(x_t)]
    # host:   dx/d(delta_h) = [-R_A | R_A skew(x_h)]
    def skew_batch(p):
        s = np.zeros(p.shape[:-1] + (3, 3))
        s[..., 0, 1] = -p[..., 2]
        s[..., 0, 2] = p[..., 1]
        s[..., 1, 0] = p[..., 2]
        s[..., 1, 2] = -p[..., 0]
        s[..., 2, 0] = -p[..., 1]
        s[..., 2, 1] = p[..., 0]
        return s

    j_t = np.concatenate([dr_dx, np.einsum("eki,ekij->ekj", -dr_dx, skew_batch(x_t))],
                         axis=-1)  # (E, 9, 6)
    dr_dx_h = -np.einsum("eki,eij->ekj", dr_dx, ra)
    j_h = np.concatenate([dr_dx_h,
                          np.einsum("eki,ekij->ekj", -dr_dx_h, skew_batch(x_h))], axis=-1)
    # dx_t/d rho = R_A @ (-x_h / rho) = -(x_t - t_A) / rho
    dx_drho = -(x_t - ta[:, None, :]) / rho[el][:, None, None]
    j_rho = np.einsum("eki,eki->ek", dr_dx, dx_drho)  # (E, 9)

    return cost, resid, weights, (j_t, j_h, j_rho, eh)


def _assemble(problem: BAProblem, poses_cw, rho, options: BAOptions):
    """Normal equations: (H_pp, H_pl, H_ll, b_p, b_l, cost) or None if invalid."""
    out = _evaluate(problem, poses_cw, rho, options.huber_delta, with_jacobians=True)
    if out is None:
        return None
    cost, resid, weights, (j_t, j_h, j_rho, eh) = out
    n_pose = 0 if options.freeze_poses else (len(problem.poses_cw) - 1) * 6
    n_lm = len(problem.landmarks)
    hpp = np.zeros((n_pose, n_pose))
    hpl = np.zeros((n_pose, n_lm))
    hll = np.zeros(n_lm)
    bp = np.zeros(n_pose)
    bl = np.zeros(n_lm)

    el, et = problem.edge_landmark, problem.edge_target
    sw = np.sqrt(weights)
    rw = resid * sw
    jt = j_t * sw[..., None]
    jh = j_h * sw[..., None]
    jr = j_rho * sw

    def var(slot_):
        # First keyframe is the gauge; its 6 dof are fixed.
        return -1 if (options.freeze_poses or slot_ == 0) else (slot_ - 1) * 6

    for e in range(el.size):
        lm = el[e]
        vt, vh = var(et[e]), var(eh[e])
        jre = jr[e]
        hll[lm] += jre @ jre
        bl[lm] -= jre @ rw[e]
        if vt >= 0:
            hpp[vt:vt + 6, vt:vt + 6] += jt[e].T @ jt[e]
            bp[vt:vt + 6] -= jt[e].T @ rw[e]
            hpl[vt:vt + 6, lm] += jt[e].T @ jre
        if vh >= 0:
            hpp[vh:vh + 6, vh:vh + 6] += jh[e].T @ jh[e]
            bp[vh:vh + 6] -= jh[e].T @ rw[e]
            hpl[vh:vh + 6, lm] += jh[e].T @ jre
        if vt >= 0 and vh >= 0:
            block = jt[e].T @ jh[e]
            hpp[vt:vt + 6, vh:vh + 6] += block
            hpp[vh:vh + 6, vt:vt + 6] += block.T
    return hpp, hpl, hll, bp, bl, cost


def solve_damped(hpp, hpl, hll, bp, bl, lam: float, schur: bool = True):
    """One damped normal-equation solve; returns (delta_pose, delta_lm).

    Marquardt scaling: the damping adds lam * diag(H) (with a small floor)
    to both blocks. The Schur path eliminates the landmark block; the dense
    path solves the full system and exists to cross-check it.
    """
    dp_diag = np.maximum(np.diag(hpp), 1e-12) if hpp.size else np.zeros(0)
    dl_diag = np.maximum(hll, 1e-12)
    hpp_d = hpp + np.diag(lam * dp_diag) if hpp.size else hpp
    hll_d = hll + lam * dl_diag
    if schur:
        if hpp.size == 0:
            return np.zeros(0), bl / hll_d
        inv_ll = 1.0 / hll_d
        s = hpp_d - (hpl * inv_ll) @ hpl.T
        rhs = bp - hpl @ (bl * inv_ll)
        dpose = np.linalg.solve(s, rhs)
        dlm = (bl - hpl.T @ dpose) * inv_ll
        return dpose, dlm
    n_p, n_l = bp.size, bl.size
    h = np.zeros((n_p + n_l, n_p + n_l))
    h[:n_p, :n_p] = hpp_d
    h[:n_p, n_p:] = hpl
    h[n_p:, :n_p] = hpl.T
    h[n_p:, n_p:] = np.diag(hll_d)
    delta = np.linalg.solve(h, np.concatenate([bp, bl]))
    return delta[:n_p], delta[n_p:]


def reset_reference(problem: BAProblem) -> None:
    """Overwrite reference patches with current-state target samples.

    Makes the stored state an exact zero-residual optimum, turning it into
    a fixed point the solver must not move away from. Rendered images
    cannot provide this exactly (interpolation error across views), so
    consistency is imposed here when a test needs it.
    """
    rho = np.array([lm.inv_depth for lm in problem.landmarks], dtype=np.float64)
    out = _evaluate(problem, problem.poses_cw, rho, 0.0, with_jacobians=False)
    if out is None:
        raise ValueError("current state has invalid reprojections")
    _, resid, _, _ = out
    problem.ref = problem.ref - resid


def solve_ba(problem: BAProblem, options: BAOptions = BAOptions()) -> BAResult:
    """Levenberg-Marquardt over poses and inverse depths."""
    if not problem.landmarks:
        raise ValueError("bundle adjustment problem has no landmarks")
    poses = [p.copy() for p in problem.poses_cw]
    rho = np.array([lm.inv_depth for lm in problem.landmarks], dtype=np.float64)
    first = _evaluate(problem, poses, rho, options.huber_delta, with_jacobians=False)
    if first is None:
        raise ValueError("initial state has invalid reprojections")
    cost = first[0]
    result = BAResult(initial_cost=cost, final_cost=cost, dropped=problem.dropped)
    lam = options.init_lambda

    for it in range(options.max_iters):
        system = _assemble(problem, poses, rho, options)
        if system is None:
            raise ValueError("state with invalid reprojections was accepted")
        hpp, hpl, hll, bp, bl, cost = system
        accepted = False
        step_norm = 0.0
        while lam <= options.lambda_max:
            try:
                dpose, dlm = solve_damped(hpp, hpl, hll, bp, bl, lam, schur=True)
            except np.linalg.LinAlgError:
                lam *= options.lambda_up
                continue
            new_rho = rho + dlm
            if np.all(new_rho > 0) and np.all(new_rho < _RHO_MAX):
                new_poses = poses if options.freeze_poses else [
                    poses[0].copy()] + [se3_exp(dpose[(s - 1) * 6:s * 6]).compose(poses[s])
                                        for s in range(1, len(poses))]
                trial = _evaluate(problem, new_poses, new_rho, options.huber_delta,
                                  with_jacobians=False)
                if trial is not None and trial[0] < cost:
                    step_norm = float(np.linalg.norm(np.concatenate([dpose, dlm])))
                    poses, rho = new_poses, new_rho
                    new_cost = trial[0]
                    accepted = True
                    lam = max(lam * options.lambda_down, 1e-12)
                    break
            lam *= options.lambda_up
        result.iterations.append(IterationRecord(iteration=it, cost=cost, lam=lam,
                                                 accepted=accepted, step_norm=step_norm))
        if not accepted:
            break
        converged = (cost - new_cost) <= options.tol * max(cost, 1e-30)
        cost = new_cost
        if converged:
            break

    result.final_cost = cost
    for i, kid in enumerate(problem.kf_ids):
        result.poses_wc[kid] = poses[i].inverse()
    for i, lm in enumerate(problem.landmarks):
        ray = problem.rays[i, 4]  # patch center
        x_host = ray / rho[i]
        pos = poses[lm.host].inverse().apply(x_host)
        result.points[lm.point_id] = (pos, float(rho[i]))
    return result


def apply_ba_result(store: KeyframeStore, result: BAResult) -> None:
    """Write optimized poses and landmark positions back into the store."""
    for kid, pose_wc in result.poses_wc.items():
        if kid in store.keyframes:
            store.keyframes[kid].pose = pose_wc.copy()
    for pid, (pos, _) in result.points.items():
        mp = store.map_points.get(pid)
        if mp is not None:
            mp.position = np.asarray(pos, dtype=np.float64)
