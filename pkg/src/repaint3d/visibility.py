"""Occlusion masks, visibility maps and their timestep-dependent binarisation.

Array conventions:

* occlusion mask: bool (H, W), True where the novel view sees surface that
  the reference view(s) did not;
* visibility map: float (h, w) in [0, 1]; 0 = must be fully repainted,
  1 = keep, values in between = best previous view cosine;
* repaint mask: bool (h, w), True = preserve (take the inverted latent),
  False = repaint (take the freshly denoised latent).
"""

from __future__ import annotations

import numpy as np

from .geometry import (
    CameraView,
    GBuffer,
    PointCloud3D,
    back_project_depth,
    depth_normals,
    pixel_grid,
    project,
    splat_points,
    view_cosine,
)

GRAZING_COS = 0.05
TAU_FRACTION = 0.01
SURFACE_EPS = 5e-3
SILHOUETTE_CAP = 1.0
# surfel dilation in source pixels; closes resampling pinholes without
# bleeding far across depth edges
SPLAT_RADIUS = 0.25


def default_tau(bounding_radius: float) -> float:
    return TAU_FRACTION * bounding_radius


def _check_depth(cam: CameraView, depth: np.ndarray) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != cam.shape:
        raise ValueError(f"depth raster {depth.shape} does not match camera resolution {cam.shape}")
    return depth


def _intrinsics(cam: CameraView) -> np.ndarray:
    return np.array([[cam.fx, 0.0, cam.cx], [0.0, cam.fy, cam.cy], [0.0, 0.0, 1.0]])


def silhouette_extents(cam: CameraView, depth: np.ndarray, normals: np.ndarray, cap: float = SILHOUETTE_CAP) -> np.ndarray:
    """Extra source-pixel reach of boundary surfels towards the silhouette.

    Returns (H, W, 4) extents for the -u, +u, -v, +v sides.  A pixel whose
    neighbour on one side is background is extended on that side by the
    estimated distance to the limb: with grazing cosine ``c`` and a normal
    turning by ``g`` radians per pixel, a locally spherical surface runs
    out after about ``c / (2 g)`` pixels.
    """
    h, w = depth.shape
    valid = np.isfinite(depth)
    pts, _ = back_project_depth(depth, cam)
    to_cam = cam.center - np.where(valid[..., None], pts, 0.0)
    to_cam /= np.maximum(np.linalg.norm(to_cam, axis=-1, keepdims=True), 1e-12)
    cos = np.clip(np.sum(normals * to_cam, axis=-1), 0.0, 1.0)
    pad_valid = np.pad(valid, 1)
    pad_n = np.pad(normals, ((1, 1), (1, 1), (0, 0)))
    ext = np.zeros((h, w, 4))
    for k, (dy, dx) in enumerate(((0, -1), (0, 1), (-1, 0), (1, 0))):
        ahead = pad_valid[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
        behind = pad_valid[1 - dy:1 - dy + h, 1 - dx:1 - dx + w]
        turn = np.arccos(np.clip(np.sum(normals * pad_n[1 - dy:1 - dy + h, 1 - dx:1 - dx + w], -1), -1.0, 1.0))
        reach = np.divide(cos, 2.0 * turn, out=np.zeros((h, w)), where=turn > 1e-9)
        ext[..., k] = np.where(valid & ~ahead & behind, np.clip(reach, 0.0, cap), 0.0)
    return ext


def surfel_footprints(src_cam: CameraView, pixels: np.ndarray, points: np.ndarray, normals: np.ndarray,
                      dst_cam: CameraView, extents: np.ndarray | None = None, half: float = 0.5) -> np.ndarray:
    """Per-point homography from destination pixels to offsets from the
    point's own source pixel, induced by the point's tangent plane.

    ``extents`` (N, 4) stretches each source pixel asymmetrically (see
    :func:`silhouette_extents`); the result is normalised so the covered
    region is always ``|offset| <= half``.  Degenerate planes (through the
    source centre) get a plain square around the projected point instead."""
    rel_r = dst_cam.rotation @ src_cam.rotation.T
    rel_t = dst_cam.translation - rel_r @ src_cam.translation
    n_s = normals @ src_cam.rotation.T
    dist = np.sum(n_s * src_cam.world_to_camera(points), axis=1)
    ok = (np.linalg.norm(n_s, axis=1) > 0.5) & (np.abs(dist) > 1e-12)
    dist = np.where(ok, dist, 1.0)
    # x_dst ~ K_d (R + t n^T / d) K_s^-1 x_src
    m = rel_r[None] + rel_t[None, :, None] * (n_s / dist[:, None])[:, None, :]
    h_sd = _intrinsics(dst_cam) @ m @ np.linalg.inv(_intrinsics(src_cam))
    det = np.linalg.det(h_sd)
    ok &= np.isfinite(det) & (np.abs(det) > 1e-12)
    h_sd[~ok] = np.eye(3)
    h_ds = np.linalg.inv(h_sd)
    # fix the projective sign so that points in front of both cameras map to w > 0
    proj, _ = project(points, dst_cam)
    w = np.einsum("ni,ni->n", h_ds[:, 2], np.concatenate([np.nan_to_num(proj), np.ones((len(points), 1))], 1))
    h_ds *= np.where(w < 0, -1.0, 1.0)[:, None, None]
    shift = np.zeros((len(points), 3, 3))
    shift[:, 0, 0] = shift[:, 1, 1] = shift[:, 2, 2] = 1.0
    shift[:, 0, 2] = -pixels[:, 0]
    shift[:, 1, 2] = -pixels[:, 1]
    fp = shift @ h_ds
    if extents is not None:
        e = np.asarray(extents, dtype=np.float64)
        lo_u, hi_u = -half - e[:, 0], half + e[:, 1]
        lo_v, hi_v = -half - e[:, 2], half + e[:, 3]
        box = np.zeros((len(points), 3, 3))
        box[:, 0, 0] = 2 * half / (hi_u - lo_u)
        box[:, 0, 2] = -box[:, 0, 0] * (hi_u + lo_u) / 2
        box[:, 1, 1] = 2 * half / (hi_v - lo_v)
        box[:, 1, 2] = -box[:, 1, 1] * (hi_v + lo_v) / 2
        box[:, 2, 2] = 1.0
        fp = box @ fp
    # fallback: unit square around the projected point in the destination
    fb = np.zeros((len(points), 3, 3))
    fb[:, 0, 0] = fb[:, 1, 1] = fb[:, 2, 2] = 1.0
    fb[:, 0, 2] = -np.nan_to_num(proj[:, 0])
    fb[:, 1, 2] = -np.nan_to_num(proj[:, 1])
    return np.where(ok[:, None, None], fp, fb)


def reproject(src_cam: CameraView, src_depth, dst_cam: CameraView, attributes=None, src_normals=None,
              radius: float = SPLAT_RADIUS) -> GBuffer:
    """Back-project a depth map and splat the points, as tangent-plane surfels
    sized to their source pixel, into another view.  Surfels on the
    silhouette are stretched towards the estimated limb."""
    src_depth = _check_depth(src_cam, src_depth)
    pts, valid = back_project_depth(src_depth, src_cam)
    if src_normals is None or not np.any(np.linalg.norm(src_normals, axis=-1)[valid] > 0.5):
        src_normals = depth_normals(src_depth, src_cam)
    normals = np.asarray(src_normals, dtype=np.float64)[valid]
    attr = None if attributes is None else np.asarray(attributes, dtype=np.float64).reshape(src_depth.shape + (-1,))[valid]
    cloud = PointCloud3D(pts[valid], attr)
    src_normals = np.asarray(src_normals, dtype=np.float64)
    ext = silhouette_extents(src_cam, src_depth, src_normals)[valid]
    fp = surfel_footprints(src_cam, pixel_grid(src_cam)[valid], cloud.points, normals, dst_cam,
                           extents=ext, half=0.5 * (radius + 1))
    return splat_points(cloud, dst_cam, radius=radius, normals=normals, footprint=fp, surface_eps=SURFACE_EPS)


def occlusion_mask(ref, novel, tau: float, ref_normals=None, radius: float = SPLAT_RADIUS) -> np.ndarray:
    """Pixels of the novel view whose depth disagrees with the reference depth
    map re-rendered from the novel camera.

    ``ref`` and ``novel`` are ``(CameraView, depth)`` pairs.  A novel pixel is
    occluded iff it holds surface and the re-rendered depth is missing or
    differs by more than ``tau``.
    """
    ref_cam, ref_depth = ref
    novel_cam, novel_depth = novel
    ref_depth = _check_depth(ref_cam, ref_depth)
    novel_depth = _check_depth(novel_cam, novel_depth)
    if ref_cam.shape != novel_cam.shape:
        raise ValueError("reference and novel views must share a resolution")
    warped = reproject(ref_cam, ref_depth, novel_cam, src_normals=ref_normals, radius=radius).depth
    fg = np.isfinite(novel_depth)
    with np.errstate(invalid="ignore"):
        far = ~np.isfinite(warped) | (np.abs(novel_depth - warped) > tau)
    return fg & far


def intersect(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a & b


def best_previous_cosine(novel_cam: CameraView, novel_depth, prev_views, tau: float, radius: float = SPLAT_RADIUS):
    """Largest non-grazing cos(theta) any previous view had on the surface seen
    at each novel pixel.  Returns ``(best_cos, observed)``."""
    novel_depth = _check_depth(novel_cam, novel_depth)
    best = np.zeros(novel_cam.shape)
    observed = np.zeros(novel_cam.shape, dtype=bool)
    for cam, gbuf in prev_views:
        cos = gbuf.extras.get("cos_theta")
        if cos is None:
            cos = view_cosine(gbuf.normal, gbuf.depth, cam)
        # surfel planes come from the depth map itself so neighbouring surfels tile
        warped = reproject(cam, gbuf.depth, novel_cam, attributes=cos, radius=radius)
        cos_prev = warped.attributes[..., 0]
        with np.errstate(invalid="ignore"):
            agree = np.isfinite(warped.depth) & (np.abs(warped.depth - novel_depth) <= tau)
            agree &= cos_prev >= GRAZING_COS
        best = np.where(agree & (cos_prev > best), cos_prev, best)
        observed |= agree
    return best, observed


def visibility_values(novel, prev_views, occ, tau: float, radius: float = SPLAT_RADIUS) -> np.ndarray:
    """Full-resolution visibility: 0 on occlusions (and on surface no earlier
    view observed at a usable angle), 1 where the current view is no better
    than the best previous one, otherwise that best previous cosine.
    Background pixels are 1."""
    cam, gbuf = novel
    occ = np.asarray(occ, dtype=bool)
    if occ.shape != cam.shape:
        raise ValueError("occlusion mask resolution does not match the novel view")
    cos_now = gbuf.extras.get("cos_theta")
    if cos_now is None:
        cos_now = view_cosine(gbuf.normal, gbuf.depth, cam)
    fg = gbuf.foreground
    best, observed = best_previous_cosine(cam, gbuf.depth, prev_views, tau, radius)
    values = np.where(cos_now <= best, 1.0, best)
    values = np.where(observed, values, 0.0)
    values = np.where(occ, 0.0, values)
    return np.where(fg, values, 1.0)


def downsample_visibility(values: np.ndarray, occ: np.ndarray, foreground: np.ndarray, size: int = 64) -> np.ndarray:
    """Average-pool to ``size`` x ``size`` over foreground pixels.  Any occluded
    pixel forces its pooled texel to 0; all-background texels become 1."""
    h, w = values.shape
    if h % size or w % size:
        raise ValueError(f"raster {values.shape} is not an integer multiple of {size}")
    fy, fx = h // size, w // size

    def blocks(a):
        return a.reshape(size, fy, size, fx).swapaxes(1, 2).reshape(size, size, fy * fx)

    fg = blocks(foreground.astype(np.float64))
    total = fg.sum(-1)
    mean = np.where(total > 0, (blocks(values) * fg).sum(-1) / np.maximum(total, 1), 1.0)
    return np.where(blocks(occ.astype(bool)).any(-1), 0.0, mean)


def visibility_map(novel, prev_views, occ, tau: float, size: int = 64, radius: float = SPLAT_RADIUS) -> np.ndarray:
    """Pooled visibility map for ``novel = (CameraView, GBuffer)`` given the
    previously refined ``(CameraView, GBuffer)`` views and the novel occlusion mask."""
    values = visibility_values(novel, prev_views, occ, tau, radius)
    return downsample_visibility(values, occ, novel[1].foreground, size)


def binarize(v: np.ndarray, t: float, T: float) -> np.ndarray:
    """Preserve mask at timestep ``t``: True iff visibility > 1 - t / T."""
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")
    return np.asarray(v) > 1.0 - t / T
