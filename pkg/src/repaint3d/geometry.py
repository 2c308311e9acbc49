"""Pinhole cameras, projection, back-projection and z-buffered point splatting.

Conventions used throughout the package:

* right-handed world frame with +y up;
* camera frame with +x right, +y down (image rows), +z forward;
* pixel ``(u, v)`` is (column, row) and the centre of raster cell
  ``[row, col]`` sits at integer coordinates ``u = col, v = row``;
* depth is the camera-space z coordinate, not the ray length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_SENTINEL = np.inf
TEXEL_SENTINEL = -1
ORTHO_TOL = 1e-9
MAX_FOOTPRINT = 32


def _check_rotation(rotation: np.ndarray) -> None:
    if rotation.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if not err <= ORTHO_TOL:
        raise ValueError(f"rotation is not orthonormal (max |R^T R - I| = {err:.3g})")
    if np.linalg.det(rotation) < 0:
        raise ValueError("rotation must be proper (det = +1)")


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with a world-to-camera rigid pose.

    ``x_cam = rotation @ x_world + translation``.  Azimuth and elevation
    (degrees) are bookkeeping used by the view scheduler.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int
    azimuth: float = 0.0
    elevation: float = 0.0

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(rot)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def resized(self, width: int, height: int) -> "CameraView":
        """Same pose and field of view at a different raster resolution."""
        sx = width / self.width
        sy = height / self.height
        return CameraView(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            rotation=self.rotation,
            translation=self.translation,
            width=width,
            height=height,
            azimuth=self.azimuth,
            elevation=self.elevation,
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation and translation for a camera at ``eye``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    norm = np.linalg.norm(right)
    if norm < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    right /= norm
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    # re-orthonormalise so the tolerance check holds after composition
    u, _, vt = np.linalg.svd(rotation)
    rotation = u @ vt
    return rotation, -rotation @ eye


def orbit_camera(
    azimuth: float,
    elevation: float = 0.0,
    radius: float = 3.0,
    fov: float = 45.0,
    width: int = 256,
    height: int | None = None,
    target=(0.0, 0.0, 0.0),
) -> CameraView:
    """Camera on a sphere around ``target`` looking at it.

    Azimuth 0 places the camera on the +z axis; positive azimuth rotates it
    counter-clockwise seen from above (+y).  ``fov`` is the vertical field of
    view in degrees.
    """
    height = width if height is None else height
    a, e = np.deg2rad(azimuth), np.deg2rad(elevation)
    target = np.asarray(target, dtype=np.float64)
    eye = target + radius * np.array([np.sin(a) * np.cos(e), np.sin(e), np.cos(a) * np.cos(e)])
    rotation, translation = look_at(eye, target)
    focal = 0.5 * height / np.tan(0.5 * np.deg2rad(fov))
    return CameraView(
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        rotation=rotation,
        translation=translation,
        width=width,
        height=height,
        azimuth=float(azimuth),
        elevation=float(elevation),
    )


def project(points, cam: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Project world points (..., 3) to pixels (..., 2) and camera depths (...).

    Points with depth <= 0 lie behind the camera; their pixel is NaN.
    Pixels outside the raster are returned unclipped.
    """
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(points)):
        raise ValueError("points must be finite")
    pc = cam.world_to_camera(points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / z + cam.cx
        v = cam.fy * pc[..., 1] / z + cam.cy
    pixel = np.stack([u, v], axis=-1)
    pixel[z <= 0] = np.nan
    return pixel, z


def camera_rays(pixels, cam: CameraView) -> np.ndarray:
    """Camera-space ray directions with unit z component for pixels (..., 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    x = (pixels[..., 0] - cam.cx) / cam.fx
    y = (pixels[..., 1] - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def back_project(pixels, depth, cam: CameraView) -> np.ndarray:
    """Lift pixels (..., 2) at camera depth(s) to world points (..., 3)."""
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(depth > 0):
        raise ValueError("back_project requires strictly positive depth")
    pc = camera_rays(pixels, cam) * depth[..., None]
    return cam.camera_to_world(pc)


def pixel_grid(cam: CameraView) -> np.ndarray:
    """(H, W, 2) array of pixel-centre coordinates (u, v)."""
    v, u = np.mgrid[0 : cam.height, 0 : cam.width].astype(np.float64)
    return np.stack([u, v], axis=-1)


def back_project_depth(depth: np.ndarray, cam: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Back-project a full depth map; returns world points (H, W, 3) and validity."""
    depth = np.asarray(depth, dtype=np.float64)
    if depth.shape != cam.shape:
        raise ValueError(f"depth shape {depth.shape} does not match camera {cam.shape}")
    valid = np.isfinite(depth) & (depth > 0)
    pc = camera_rays(pixel_grid(cam), cam) * np.where(valid, depth, 0.0)[..., None]
    return cam.camera_to_world(pc), valid


def depth_normals(depth: np.ndarray, cam: CameraView) -> np.ndarray:
    """World-space unit normals from a depth map via cross products of
    back-projected neighbour differences.  Central differences where both
    neighbours hold surface, one-sided ones on silhouettes; sentinel (zero)
    where an axis has no neighbour at all.  Normals face the camera."""
    pts, valid = back_project_depth(depth, cam)
    pts = np.where(valid[..., None], pts, 0.0)

    def diff(axis):
        p = np.moveaxis(pts, axis, 0)
        m = np.moveaxis(valid, axis, 0)
        fwd = np.zeros_like(p)
        bwd = np.zeros_like(p)
        has_f = np.zeros(m.shape, dtype=bool)
        has_b = np.zeros(m.shape, dtype=bool)
        fwd[:-1] = p[1:] - p[:-1]
        has_f[:-1] = m[1:] & m[:-1]
        bwd[1:] = p[1:] - p[:-1]
        has_b[1:] = m[1:] & m[:-1]
        d = np.where((has_f & has_b)[..., None], 0.5 * (fwd + bwd), np.where(has_f[..., None], fwd, bwd))
        return np.moveaxis(d, 0, axis), np.moveaxis(has_f | has_b, 0, axis)

    dx, okx = diff(1)
    dy, oky = diff(0)
    n = np.cross(dx, dy)
    norm = np.linalg.norm(n, axis=-1)
    ok = valid & okx & oky & (norm > 1e-20)
    n = n / np.where(ok, norm, 1.0)[..., None]
    flip = np.sum(n * (cam.center - pts), axis=-1) < 0
    n[flip] *= -1
    n[~ok] = 0.0
    return n


def view_cosine(normals: np.ndarray, depth: np.ndarray, cam: CameraView) -> np.ndarray:
    """Per-pixel cos(theta) = max(0, n . (-v)) between the unit surface normal
    and the direction from the fragment back to the camera.  Zero where the
    pixel holds no surface."""
    pts, valid = back_project_depth(depth, cam)
    to_cam = cam.center - pts
    to_cam /= np.maximum(np.linalg.norm(to_cam, axis=-1, keepdims=True), 1e-30)
    cos = np.sum(np.asarray(normals) * to_cam, axis=-1)
    has_normal = np.linalg.norm(normals, axis=-1) > 0.5
    return np.where(valid & has_normal, np.clip(cos, 0.0, 1.0), 0.0)


@dataclass
class PointCloud3D:
    """World-space points with a per-point attribute payload (N, k)."""

    points: np.ndarray
    attributes: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.attributes is None:
            self.attributes = np.zeros((len(self.points), 0))
        self.attributes = np.asarray(self.attributes, dtype=np.float64)
        if self.attributes.ndim == 1:
            self.attributes = self.attributes[:, None]
        if len(self.attributes) != len(self.points):
            raise ValueError("points and attributes must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class GBuffer:
    """Per-pixel rasters emitted by the renderers.

    Sentinels: depth ``inf``, normal ``(0, 0, 0)``, texel id ``-1``, extra
    attributes ``nan``.
    """

    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    normal: np.ndarray
    texel_id: np.ndarray | None = None
    attributes: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        hw = self.depth.shape
        for name in ("color", "alpha", "normal", "texel_id", "attributes"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[:2] != hw:
                raise ValueError(f"{name} raster {arr.shape[:2]} does not match depth {hw}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    @property
    def foreground(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @classmethod
    def empty(cls, height: int, width: int, background=(0.0, 0.0, 0.0), channels: int = 0) -> "GBuffer":
        return cls(
            color=np.broadcast_to(np.asarray(background, dtype=np.float64), (height, width, 3)).copy(),
            depth=np.full((height, width), DEPTH_SENTINEL),
            alpha=np.zeros((height, width)),
            normal=np.zeros((height, width, 3)),
            texel_id=np.full((height, width), TEXEL_SENTINEL, dtype=np.int64),
            attributes=np.full((height, width, channels), np.nan) if channels else None,
        )


def box_pixels(x0, x1, y0, y1):
    """Enumerate integer pixels of inclusive boxes; returns (owner, u, v)."""
    bw = np.maximum(x1 - x0 + 1, 0)
    counts = bw * np.maximum(y1 - y0 + 1, 0)
    owner = np.repeat(np.arange(len(counts)), counts)
    local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    return owner, x0[owner] + local % bw[owner], y0[owner] + local // bw[owner]


def splat_points(
    pts: PointCloud3D,
    cam: CameraView,
    radius: int = 1,
    normals: np.ndarray | None = None,
    footprint: np.ndarray | None = None,
    surface_eps: float = 0.0,
) -> GBuffer:
    """Z-buffered point rendering.

    By default each point covers the ``(2 * radius + 1)^2`` pixel square
    around its rounded projection.  ``footprint`` (N, 3, 3) instead gives,
    per point, a homography from homogeneous target pixels to the point's
    own source-pixel offsets (for a surfel, the plane-induced homography
    between the two views).  A pixel is covered when both offsets lie within
    ``0.5 * (radius + 1)``: the source pixel dilated by half a pixel per unit
    of radius.  Slanted depth maps then tile the target without holes.

    When world ``normals`` are given, every covered pixel receives the depth
    where its ray meets the point's tangent plane; grazing surfels fall back
    to the point depth.

    Visibility is resolved per pixel among the covering points whose depth
    is within a relative ``surface_eps`` of the nearest one (the same
    surface); the winner is the one whose own centre lies closest to the
    pixel, ties broken by depth then by point index.  The winner supplies
    depth and attributes.  With the default ``surface_eps = 0`` this is a
    plain z-buffer: depth is the per-pixel minimum.
    """
    h, w = cam.shape
    k = pts.attributes.shape[1]
    out = GBuffer.empty(h, w, channels=k)
    out.extras["point_id"] = np.full((h, w), -1, dtype=np.int64)
    if len(pts) == 0:
        return out
    pc = cam.world_to_camera(pts.points)
    front = pc[:, 2] > 1e-9
    idx = np.nonzero(front)[0]
    pc = pc[idx]
    z = pc[:, 2]
    u = cam.fx * pc[:, 0] / z + cam.cx
    v = cam.fy * pc[:, 1] / z + cam.cy

    if footprint is None:
        ui = np.floor(u + 0.5).astype(np.int64)
        vi = np.floor(v + 0.5).astype(np.int64)
        owner, cu, cv = box_pixels(ui - radius, ui + radius, vi - radius, vi + radius)
        inside = (cu >= 0) & (cu < w) & (cv >= 0) & (cv < h)
        owner, cu, cv = owner[inside], cu[inside], cv[inside]
        ring = (cu - u[owner]) ** 2 + (cv - v[owner]) ** 2
    else:
        fp = np.asarray(footprint, dtype=np.float64)[idx]
        half = 0.5 * (radius + 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.linalg.inv(fp)
            corners = np.array([[-half, -half, 1], [half, -half, 1], [half, half, 1], [-half, half, 1]]).T
            mapped = inv @ corners
            cu_ = mapped[:, 0] / mapped[:, 2]
            cv_ = mapped[:, 1] / mapped[:, 2]
        bounded = np.all(mapped[:, 2] > 0, axis=1) & np.all(np.isfinite(cu_) & np.isfinite(cv_), axis=1)
        lo_u = np.where(bounded, cu_.min(1), -np.inf)
        hi_u = np.where(bounded, cu_.max(1), np.inf)
        lo_v = np.where(bounded, cv_.min(1), -np.inf)
        hi_v = np.where(bounded, cv_.max(1), np.inf)
        x0 = np.maximum(np.ceil(np.maximum(lo_u, u - MAX_FOOTPRINT)), 0).astype(np.int64)
        x1 = np.minimum(np.floor(np.minimum(hi_u, u + MAX_FOOTPRINT)), w - 1).astype(np.int64)
        y0 = np.maximum(np.ceil(np.maximum(lo_v, v - MAX_FOOTPRINT)), 0).astype(np.int64)
        y1 = np.minimum(np.floor(np.minimum(hi_v, v + MAX_FOOTPRINT)), h - 1).astype(np.int64)
        owner, cu, cv = box_pixels(x0, x1, y0, y1)
        hom = np.stack([cu, cv, np.ones(len(cu))], axis=-1).astype(np.float64)
        s = np.einsum("nij,nj->ni", fp[owner], hom)
        with np.errstate(divide="ignore", invalid="ignore"):
            loc = s[:, :2] / s[:, 2:]
        inside = (s[:, 2] > 0) & np.all(np.abs(loc) <= half, axis=1)
        owner, cu, cv = owner[inside], cu[inside], cv[inside]
        ring = np.sum(loc[inside] ** 2, axis=1)
    if len(owner) == 0:
        return out

    cz = z[owner]
    if normals is not None:
        nc = np.asarray(normals, dtype=np.float64)[idx] @ cam.rotation.T
        rays = camera_rays(np.stack([cu, cv], axis=-1).astype(np.float64), cam)
        n_c = nc[owner]
        denom = np.sum(n_c * rays, axis=-1)
        cos_ray = np.abs(denom) / np.linalg.norm(rays, axis=-1)
        ok = (np.linalg.norm(n_c, axis=-1) > 0.5) & (cos_ray > 0.1)
        with np.errstate(divide="ignore", invalid="ignore"):
            plane_z = np.sum(n_c * pc[owner], axis=-1) / denom
        ok &= np.isfinite(plane_z) & (plane_z > 0)
        cz = np.where(ok, plane_z, cz)

    pix = cv * w + cu
    point_id = idx[owner]
    zmin = np.full(h * w, np.inf)
    np.minimum.at(zmin, pix, cz)
    eligible = cz <= zmin[pix] * (1.0 + surface_eps)
    pix_e, ring_e, cz_e, pid_e = pix[eligible], ring[eligible], cz[eligible], point_id[eligible]
    order = np.lexsort((pid_e, cz_e, ring_e, pix_e))
    pix_s = pix_e[order]
    first = np.ones(len(pix_s), dtype=bool)
    first[1:] = pix_s[1:] != pix_s[:-1]
    win_pix = pix_s[first]
    win_pid = pid_e[order][first]

    out.depth.reshape(-1)[win_pix] = cz_e[order][first]
    out.alpha.reshape(-1)[win_pix] = 1.0
    if k:
        out.attributes.reshape(-1, k)[win_pix] = pts.attributes[win_pid]
    if normals is not None:
        out.normal.reshape(-1, 3)[win_pix] = np.asarray(normals, dtype=np.float64)[win_pid]
    out.extras["point_id"].reshape(-1)[win_pix] = win_pid
    return out
