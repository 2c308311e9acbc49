"""Software Gaussian splatting with analytic colour/opacity gradients.

Per pixel ``p`` the Gaussians, sorted front to back, composite as

    C(p) = sum_i c_i a_i prod_{j<i} (1 - a_j) + background * prod_j (1 - a_j)
    a_i  = o_i exp(-0.5 (p - m_i)^T S_i^{-1} (p - m_i))

with ``m_i`` and ``S_i`` the screen-space mean and 2x2 covariance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import DEPTH_SENTINEL, CameraView, GBuffer, depth_normals

log = logging.getLogger(__name__)

ALPHA_MAX = 0.999
ALPHA_FLOOR = 1e-3
LOWPASS = 0.3
NEAR = 1e-2
EXTENT_SIGMAS = 3.5


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from unit quaternions (..., 4) in wxyz order."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


@dataclass(frozen=True)
class Gaussian:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    opacity: float

    def __post_init__(self):
        for name in ("mu", "scale", "rotation", "color"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        _validate(self.mu[None], self.scale[None], self.rotation[None], self.color[None],
                  np.array([self.opacity], dtype=np.float64))


def _validate(mu, scale, rotation, color, opacity):
    n = len(mu)
    if not (mu.shape == (n, 3) and scale.shape == (n, 3) and rotation.shape == (n, 4)
            and color.shape == (n, 3) and opacity.shape == (n,)):
        raise ValueError("inconsistent Gaussian parameter shapes")
    for arr in (mu, scale, rotation, color, opacity):
        if not np.all(np.isfinite(arr)):
            raise ValueError("Gaussian parameters must be finite")
    if np.any(scale <= 0):
        raise ValueError("Gaussian scales must be positive")
    if np.any(np.abs(np.linalg.norm(rotation, axis=-1) - 1.0) > 1e-9):
        raise ValueError("Gaussian rotations must be unit quaternions")
    if np.any((opacity < 0) | (opacity > 1)) or np.any((color < 0) | (color > 1)):
        raise ValueError("opacity and color channels must lie in [0, 1]")


class GaussianCloud:
    """Ordered set of anisotropic 3D Gaussians stored as parameter arrays."""

    def __init__(self, mu, scale, rotation, color, opacity):
        self.mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        self.scale = np.asarray(scale, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.asarray(rotation, dtype=np.float64).reshape(-1, 4)
        self.color = np.asarray(color, dtype=np.float64).reshape(-1, 3)
        self.opacity = np.asarray(opacity, dtype=np.float64).reshape(-1)
        _validate(self.mu, self.scale, self.rotation, self.color, self.opacity)

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianCloud":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            np.stack([g.mu for g in gaussians]),
            np.stack([g.scale for g in gaussians]),
            np.stack([g.rotation for g in gaussians]),
            np.stack([g.color for g in gaussians]),
            np.array([g.opacity for g in gaussians]),
        )

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0))

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i) -> Gaussian:
        return Gaussian(self.mu[i], self.scale[i], self.rotation[i], self.color[i], float(self.opacity[i]))

    @property
    def gaussians(self) -> list[Gaussian]:
        return [self[i] for i in range(len(self))]

    def subset(self, index) -> "GaussianCloud":
        return GaussianCloud(self.mu[index], self.scale[index], self.rotation[index],
                             self.color[index], self.opacity[index])

    def replace(self, **kw) -> "GaussianCloud":
        params = dict(mu=self.mu, scale=self.scale, rotation=self.rotation,
                      color=self.color, opacity=self.opacity)
        params.update(kw)
        return GaussianCloud(**params)

    def bounding_radius(self) -> float:
        if len(self) == 0:
            return 0.0
        return float(np.linalg.norm(self.mu - self.mu.mean(0), axis=1).max())


def covariance(g: Gaussian | GaussianCloud) -> np.ndarray:
    """3D covariance R S S^T R^T, shape (3, 3) or (N, 3, 3)."""
    rot = quat_to_rotmat(g.rotation)
    m = rot * np.asarray(g.scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def sort_front_to_back(cloud: GaussianCloud, cam: CameraView) -> np.ndarray:
    """Stable permutation ordering Gaussians by camera depth, ties by index."""
    z = cam.world_to_camera(cloud.mu)[:, 2] if len(cloud) else np.zeros(0)
    return np.argsort(z, kind="stable")


@dataclass
class _Footprint:
    index: int
    rows: slice
    cols: slice
    power: np.ndarray   # exp(-0.5 d^T S^-1 d) on the patch
    depth: float


def _project(cloud: GaussianCloud, cam: CameraView) -> list[_Footprint]:
    h, w = cam.shape
    if len(cloud) == 0:
        return []
    pc = cam.world_to_camera(cloud.mu)
    cov_c = cam.rotation @ covariance(cloud) @ cam.rotation.T
    out = []
    for i in sort_front_to_back(cloud, cam):
        x, y, z = pc[i]
        if z <= NEAR:
            continue
        jac = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2],
                        [0.0, cam.fy / z, -cam.fy * y / z**2]])
        cov2 = jac @ cov_c[i] @ jac.T + LOWPASS * np.eye(2)
        det = cov2[0, 0] * cov2[1, 1] - cov2[0, 1] ** 2
        if not (np.isfinite(det) and det > 1e-12):
            log.warning("skipping Gaussian %d: singular projected covariance", i)
            continue
        inv = np.array([[cov2[1, 1], -cov2[0, 1]], [-cov2[0, 1], cov2[0, 0]]]) / det
        mu2 = np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])
        ru = EXTENT_SIGMAS * np.sqrt(cov2[0, 0])
        rv = EXTENT_SIGMAS * np.sqrt(cov2[1, 1])
        c0, c1 = max(int(np.ceil(mu2[0] - ru)), 0), min(int(np.floor(mu2[0] + ru)), w - 1)
        r0, r1 = max(int(np.ceil(mu2[1] - rv)), 0), min(int(np.floor(mu2[1] + rv)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        du = np.arange(c0, c1 + 1) - mu2[0]
        dv = np.arange(r0, r1 + 1) - mu2[1]
        du, dv = np.meshgrid(du, dv, indexing="xy")
        q = inv[0, 0] * du * du + 2 * inv[0, 1] * du * dv + inv[1, 1] * dv * dv
        out.append(_Footprint(i, slice(r0, r1 + 1), slice(c0, c1 + 1), np.exp(-0.5 * q), z))
    return out


def render(cloud: GaussianCloud, cam: CameraView, background=(0.0, 0.0, 0.0)) -> GBuffer:
    """Composite the cloud front to back into a G-buffer.

    Depth is the compositing-weight mean of Gaussian camera depths (sentinel
    where coverage is below ``ALPHA_FLOOR``); normals come from the depth map.
    """
    h, w = cam.shape
    bg = np.asarray(background, dtype=np.float64)
    color = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    trans = np.ones((h, w))
    for fp in _project(cloud, cam):
        a = np.minimum(cloud.opacity[fp.index] * fp.power, ALPHA_MAX)
        t = trans[fp.rows, fp.cols]
        wgt = a * t
        color[fp.rows, fp.cols] += wgt[..., None] * cloud.color[fp.index]
        depth_acc[fp.rows, fp.cols] += wgt * fp.depth
        trans[fp.rows, fp.cols] = t * (1.0 - a)
    alpha = 1.0 - trans
    color += trans[..., None] * bg
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = np.where(alpha >= ALPHA_FLOOR, depth_acc / alpha, DEPTH_SENTINEL)
    return GBuffer(color=color, depth=depth, alpha=alpha, normal=depth_normals(depth, cam))


def render_backward(cloud: GaussianCloud, cam: CameraView, background, dL_dColor) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss with respect to Gaussian colours (N, 3) and
    opacities (N,), given its gradient with respect to the rendered colour."""
    h, w = cam.shape
    g = np.asarray(dL_dColor, dtype=np.float64)
    if g.shape != (h, w, 3):
        raise ValueError(f"dL_dColor must have shape {(h, w, 3)}, got {g.shape}")
    bg = np.asarray(background, dtype=np.float64)
    d_color = np.zeros((len(cloud), 3))
    d_opacity = np.zeros(len(cloud))
    fps = _project(cloud, cam)

    # forward again, keeping the transmittance seen by every Gaussian
    trans = np.ones((h, w))
    saved = []
    for fp in fps:
        raw = cloud.opacity[fp.index] * fp.power
        a = np.minimum(raw, ALPHA_MAX)
        t = trans[fp.rows, fp.cols].copy()
        saved.append((a, t, raw < ALPHA_MAX))
        trans[fp.rows, fp.cols] = t * (1.0 - a)

    # behind[p] accumulates the colour composited behind the current Gaussian
    behind = trans[..., None] * bg
    for fp, (a, t, unclamped) in zip(reversed(fps), reversed(saved)):
        gp = g[fp.rows, fp.cols]
        c = cloud.color[fp.index]
        wgt = a * t
        d_color[fp.index] = np.einsum("hw,hwc->c", wgt, gp)
        b = behind[fp.rows, fp.cols]
        dC_da = t[..., None] * c - b / (1.0 - a)[..., None]
        dL_da = np.sum(gp * dC_da, axis=-1)
        d_opacity[fp.index] = np.sum(dL_da * fp.power * unclamped)
        behind[fp.rows, fp.cols] = b + wgt[..., None] * c
    return d_color, d_opacity


def refine_colors(cloud: GaussianCloud, views, steps: int = 200, lr: float = 0.5, background=(0.0, 0.0, 0.0)) -> GaussianCloud:
    """Masked-MSE gradient descent on Gaussian colours over several views.

    ``views`` holds ``(camera, target image, mask)`` triples.  Steps are
    normalised per Gaussian by its accumulated compositing weight.
    """
    colors = cloud.color.copy()
    weights = np.zeros(len(cloud))
    for cam, _, mask in views:
        n = max(int(np.sum(mask)), 1)
        ones = np.repeat(np.asarray(mask, dtype=np.float64)[..., None], 3, axis=-1) * (2.0 / (3 * n))
        wc, _ = render_backward(cloud, cam, background, ones)
        weights += wc[:, 0]
    active = weights > 0
    for _ in range(steps):
        cur = cloud.replace(color=colors)
        grad = np.zeros_like(colors)
        for cam, target, mask in views:
            n = max(int(np.sum(mask)), 1)
            img = render(cur, cam, background).color
            dl = 2.0 * (img - target) * np.asarray(mask, dtype=np.float64)[..., None] / (3 * n)
            grad += render_backward(cur, cam, background, dl)[0]
        colors[active] -= lr * grad[active] / weights[active, None]
        np.clip(colors, 0.0, 1.0, out=colors)
    return cloud.replace(color=colors)

