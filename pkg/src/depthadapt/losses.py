"""Training and validation losses for online depth adaptation.

The photometric term reconstructs a keyframe from each sequence neighbor by
warping through the predicted depth, scores the reconstruction with a
0.85/0.15 SSIM + L1 mix, and keeps the per-pixel minimum over neighbors so
occlusions in one neighbor do not poison the other. Pixels whose warp lands
outside a neighbor get value 0 and an invalid flag; the final average runs
over pixels valid in at least one neighbor.

The sparse term is an L1 gap in inverse depth against the keyframe's sparse
map anchors, read from the prediction bilinearly. The smoothness term is an
edge-weighted L1 on forward differences of the depth map (optionally of the
inverse depth). Totals combine as photo + l1 * sparse + l2 * smooth,
averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp
from .geometry import Intrinsics, Z_EPS, relative_pose, reproject_map
from .keyframes import Keyframe

_BIG = 1.0e6


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 0.1  # sparse depth
    lambda2: float = 0.1  # smoothness
    alpha: float = 0.85  # SSIM share of the photometric mix
    smooth_on_disparity: bool = False


@dataclass
class LossBreakdown:
    photo: float
    sparse_depth: float
    smooth: float
    total: float
    valid_pixel_count: int
    valid_sparse_count: int


def _box3(x):
    """3x3 box filter on an (H, W) tensor via a constant convolution kernel."""
    h, w = np.shape(x.data if isinstance(x, tp.Tensor) else x)
    k = np.full((1, 1, 3, 3), 1.0 / 9.0, dtype=np.float32)
    y = tp.conv2d(tp.reshape(x, (1, 1, h, w)), k, None, stride=1, pad=1)
    return tp.reshape(y, (h, w))


def ssim(a, b, c1: float = 0.01 ** 2, c2: float = 0.03 ** 2):
    """Structural similarity map over 3x3 box-filtered statistics."""
    mu_a = _box3(a)
    mu_b = _box3(b)
    mu_aa = _box3(tp.mul(a, a))
    mu_bb = _box3(tp.mul(b, b))
    mu_ab = _box3(tp.mul(a, b))
    var_a = tp.sub(mu_aa, tp.mul(mu_a, mu_a))
    var_b = tp.sub(mu_bb, tp.mul(mu_b, mu_b))
    cov = tp.sub(mu_ab, tp.mul(mu_a, mu_b))
    num = tp.mul(tp.add(tp.mul(tp.mul(mu_a, mu_b), 2.0), c1),
                 tp.add(tp.mul(cov, 2.0), c2))
    den = tp.mul(tp.add(tp.add(tp.mul(mu_a, mu_a), tp.mul(mu_b, mu_b)), c1),
                 tp.add(tp.add(var_a, var_b), c2))
    return tp.mul(num, tp.reciprocal(den))


def photometric_error_map(target, recon, alpha: float):
    """Per-pixel (alpha/2)(1 - SSIM) + (1 - alpha) L1 between two images."""
    s = ssim(target, recon)
    term_ssim = tp.mul(tp.sub(1.0, s), 0.5 * alpha)
    term_l1 = tp.mul(tp.abs_(tp.sub(target, recon)), 1.0 - alpha)
    return tp.add(term_ssim, term_l1)


def photometric_loss(kf: Keyframe, neighbors: list[Keyframe], depth, K: Intrinsics,
                     weights: LossWeights = LossWeights()):
    """Min-over-neighbors photometric reconstruction loss.

    ``depth`` is the (H, W) prediction for ``kf`` (tensor while training).
    Returns (scalar loss, valid pixel count). With no neighbors or no valid
    pixels the loss is exactly zero and the count reports 0.
    """
    h, w = kf.image.shape
    n = h * w
    per_neighbor = []
    masks = []
    for nb in neighbors:
        t_rel = relative_pose(kf.pose, nb.pose)
        u, v, z = reproject_map(K, t_rel, depth)
        coords = tp.stack_uv(tp.reshape(u, (n,)), tp.reshape(v, (n,)))
        samples, in_image = tp.bilinear_sample(nb.image.astype(np.float32), coords)
        zv = z.data if isinstance(z, tp.Tensor) else z
        valid = (in_image & (zv.reshape(n) > Z_EPS)).reshape(h, w)
        target = kf.image.astype(np.float32)
        vmask = valid.astype(np.float32)
        # Fill invalid samples with the target so their garbage values cannot
        # leak into valid pixels through the SSIM window.
        recon = tp.add(tp.mul(tp.reshape(samples, (h, w)), vmask),
                       target * (1.0 - vmask))
        pe = photometric_error_map(target, recon, weights.alpha)
        # Invalid pixels ride a large constant so the per-pixel minimum
        # always prefers any valid neighbor.
        pe_masked = tp.add(tp.mul(pe, vmask), (1.0 - vmask) * _BIG)
        per_neighbor.append(pe_masked)
        masks.append(valid)
    if not per_neighbor:
        return 0.0, 0
    combined = per_neighbor[0]
    for pe in per_neighbor[1:]:
        combined = tp.minimum(combined, pe)
    union = np.logical_or.reduce(masks)
    count = int(union.sum())
    if count == 0:
        return 0.0, 0
    scale = union.astype(np.float32) / count
    return tp.sum_(tp.mul(combined, scale)), count


def sparse_depth_loss(kf: Keyframe, depth):
    """Mean L1 gap in inverse depth at the keyframe's sparse anchors.

    The prediction is read bilinearly at each anchor's subpixel location.
    Anchors whose read is invalid (outside the bilinear lattice) are dropped
    from the mean. Returns (scalar loss, used anchor count).
    """
    coords, depths, _ = kf.sparse_arrays()
    if coords.shape[0] == 0:
        return 0.0, 0
    samples, valid = tp.bilinear_sample(depth, coords.astype(np.float32))
    count = int(valid.sum())
    if count == 0:
        return 0.0, 0
    inv_sparse = np.zeros(depths.shape[0], dtype=np.float32)
    inv_sparse[valid] = (1.0 / depths[valid]).astype(np.float32)
    # Invalid samples hold value 0; shift them to 1 before inverting so the
    # reciprocal stays finite, then mask them out of the mean.
    vmask = valid.astype(np.float32)
    safe = tp.add(tp.mul(samples, vmask), 1.0 - vmask)
    gap = tp.abs_(tp.sub(tp.reciprocal(safe), inv_sparse))
    return tp.sum_(tp.mul(gap, vmask / count)), count


def smoothness_loss(kf: Keyframe, depth, weights: LossWeights = LossWeights()):
    """Edge-aware first-order smoothness of the depth map.

    Forward differences; the x term drops the last column and the y term the
    last row. Each term is averaged over its own support and weighted by
    exp(-|image gradient|).
    """
    img = kf.image.astype(np.float32)
    target = tp.reciprocal(depth) if weights.smooth_on_disparity else depth
    wx = np.exp(-np.abs(img[:, 1:] - img[:, :-1]))
    wy = np.exp(-np.abs(img[1:, :] - img[:-1, :]))
    term_x = tp.mean(tp.mul(tp.abs_(tp.diff_x(target)), wx))
    term_y = tp.mean(tp.mul(tp.abs_(tp.diff_y(target)), wy))
    return tp.add(term_x, term_y)


def train_loss(batch: list[tuple[Keyframe, list[Keyframe], object]], K: Intrinsics,
               weights: LossWeights = LossWeights()):
    """Combined loss over a batch of (keyframe, neighbors, depth) triples.

    Returns (scalar tensor, LossBreakdown). Each component is averaged over
    the batch first; the total is photo + lambda1 * sparse + lambda2 * smooth
    of those averages.
    """
    if not batch:
        raise ValueError("empty training batch")
    photos, sparses, smooths = [], [], []
    px_count, sp_count = 0, 0
    for kf, neighbors, depth in batch:
        p, cpx = photometric_loss(kf, neighbors, depth, K, weights)
        s, csp = sparse_depth_loss(kf, depth)
        m = smoothness_loss(kf, depth, weights)
        photos.append(p)
        sparses.append(s)
        smooths.append(m)
        px_count += cpx
        sp_count += csp

    def average(parts):
        total = parts[0]
        for p in parts[1:]:
            total = tp.add(total, p)
        return tp.mul(total, 1.0 / len(parts))

    photo = average(photos)
    sparse = average(sparses)
    smooth = average(smooths)
    total = tp.add(tp.add(photo, tp.mul(sparse, weights.lambda1)),
                   tp.mul(smooth, weights.lambda2))

    def scalar(x):
        return float(x.data) if isinstance(x, tp.Tensor) else float(x)

    breakdown = LossBreakdown(photo=scalar(photo), sparse_depth=scalar(sparse),
                              smooth=scalar(smooth), total=scalar(total),
                              valid_pixel_count=px_count, valid_sparse_count=sp_count)
    return total, breakdown


def validation_loss(kf: Keyframe, depth_map: np.ndarray) -> float:
    """Sparse inverse-depth fit of an unrecorded prediction; cached on the keyframe."""
    loss, count = sparse_depth_loss(kf, np.asarray(depth_map, dtype=np.float32))
    value = float(loss.data) if isinstance(loss, tp.Tensor) else float(loss)
    kf.last_val_loss = value if count > 0 else 0.0
    return kf.last_val_loss