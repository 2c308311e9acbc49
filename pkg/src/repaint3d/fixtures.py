"""Procedural meshes, textures and analytic sphere rasters for tests and demos."""

from __future__ import annotations

import numpy as np

from .geometry import DEPTH_SENTINEL, CameraView, GBuffer, camera_rays, pixel_grid, view_cosine
from .meshtex import TexturedMesh


def pattern_texture(height: int = 256, width: int = 512, seed: int = 0) -> np.ndarray:
    """Smooth, band-limited RGB pattern in [0.1, 0.9]."""
    rng = np.random.default_rng(seed)
    v, u = np.mgrid[0:height, 0:width]
    u = (u + 0.5) / width
    v = (v + 0.5) / height
    tex = np.zeros((height, width, 3))
    for c in range(3):
        acc = np.zeros((height, width))
        for _ in range(4):
            ku, kv = rng.integers(1, 5), rng.integers(1, 4)
            phase = rng.uniform(0, 2 * np.pi, 2)
            acc += np.sin(2 * np.pi * ku * u + phase[0]) * np.cos(np.pi * kv * v + phase[1])
        tex[..., c] = acc / 4.0
    return 0.5 + 0.4 * np.clip(tex, -1, 1)


def uv_sphere(radius: float = 1.0, n_lat: int = 32, n_lon: int = 64, texture=None, center=(0, 0, 0)) -> TexturedMesh:
    """Latitude/longitude sphere.  u follows azimuth from +z towards +x,
    v = 1 at the north (+y) pole.  The seam column is duplicated."""
    theta = np.linspace(0.0, np.pi, n_lat + 1)
    phi = np.linspace(0.0, 2 * np.pi, n_lon + 1)
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    normals = np.stack([np.sin(th) * np.sin(ph), np.cos(th), np.sin(th) * np.cos(ph)], -1).reshape(-1, 3)
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    uvs = np.stack([ph / (2 * np.pi), 1.0 - th / np.pi], -1).reshape(-1, 2)
    idx = np.arange((n_lat + 1) * (n_lon + 1)).reshape(n_lat + 1, n_lon + 1)
    a, b = idx[:-1, :-1], idx[:-1, 1:]
    c, d = idx[1:, :-1], idx[1:, 1:]
    faces = np.concatenate([np.stack([a, c, b], -1)[1:], np.stack([b, c, d], -1)[:-1]], axis=0).reshape(-1, 3)
    texture = pattern_texture() if texture is None else texture
    return TexturedMesh(radius * normals + np.asarray(center, dtype=np.float64), faces, normals, uvs, texture)


def cube(size: float = 1.0, texture=None) -> TexturedMesh:
    """Axis-aligned cube with per-face normals (24 vertices, 12 triangles);
    each face owns one cell of a 3x2 UV atlas."""
    h = size / 2.0
    axes = [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]
    verts, norms, uvs, faces = [], [], [], []
    for k, (axis, sign) in enumerate(axes):
        n = np.zeros(3)
        n[axis] = sign
        t1 = np.zeros(3)
        t1[(axis + 1) % 3] = 1
        t2 = np.cross(n, t1)
        cu, cv = k % 3, k // 3
        base = len(verts)
        for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
            verts.append(h * (n + su * t1 + sv * t2))
            norms.append(n)
            uvs.append(((cu + 0.5 + 0.45 * su) / 3.0, (cv + 0.5 + 0.45 * sv) / 2.0))
        faces += [(base, base + 1, base + 2), (base, base + 2, base + 3)]
    texture = pattern_texture(128, 192) if texture is None else texture
    return TexturedMesh(np.array(verts), np.array(faces), np.array(norms), np.array(uvs), texture)


def single_triangle(vertices, uvs=None, texture=None, normal=None) -> TexturedMesh:
    vertices = np.asarray(vertices, dtype=np.float64)
    if normal is None:
        normal = np.cross(vertices[1] - vertices[0], vertices[2] - vertices[0])
    normal = np.asarray(normal, dtype=np.float64) / np.linalg.norm(normal)
    uvs = np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]) if uvs is None else uvs
    texture = np.full((8, 8, 3), 0.5) if texture is None else texture
    return TexturedMesh(vertices, [[0, 1, 2]], np.repeat(normal[None], 3, 0), uvs, texture)


def sphere_hit(cam: CameraView, radius: float = 1.0, center=(0.0, 0.0, 0.0)):
    """Exact ray/sphere intersection for every pixel centre.

    Returns camera depth (sentinel on misses), world points and outward
    unit normals (zero on misses)."""
    center = np.asarray(center, dtype=np.float64)
    rays = camera_rays(pixel_grid(cam), cam) @ cam.rotation   # world directions, camera-z = 1
    origin = cam.center
    oc = origin - center
    a = np.sum(rays * rays, -1)
    b = 2 * np.sum(rays * oc, -1)
    c = oc @ oc - radius**2
    disc = b * b - 4 * a * c
    hit = disc >= 0
    s = np.where(hit, (-b - np.sqrt(np.where(hit, disc, 0))) / (2 * a), np.inf)
    hit &= s > 0
    depth = np.where(hit, s, DEPTH_SENTINEL)
    pts = origin + rays * np.where(hit, s, 0)[..., None]
    normals = np.where(hit[..., None], (pts - center) / radius, 0.0)
    return depth, pts, normals


def sphere_visible_from(points: np.ndarray, normals: np.ndarray, cam: CameraView) -> np.ndarray:
    """Whether convex-sphere surface points face ``cam`` (self-occlusion only)."""
    return np.sum(normals * (cam.center - points), -1) > 0


def sphere_gbuffer(cam: CameraView, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> GBuffer:
    """Analytic G-buffer of a sphere: exact depth, normals and cos(theta)."""
    depth, pts, normals = sphere_hit(cam, radius, center)
    h, w = cam.shape
    gbuf = GBuffer.empty(h, w)
    fg = np.isfinite(depth)
    gbuf.depth = depth
    gbuf.normal = normals
    gbuf.alpha = fg.astype(np.float64)
    gbuf.extras["cos_theta"] = view_cosine(normals, depth, cam)
    return gbuf


def degrade_texture(texture: np.ndarray, seed: int = 0, blur: int = 9) -> np.ndarray:
    """Coarse-stage stand-in: box-blurred, contrast-reduced, colour-shifted copy."""
    tex = np.asarray(texture, dtype=np.float64)
    kernel = np.ones(blur) / blur
    pad = blur // 2
    out = np.pad(tex, ((0, 0), (pad, pad), (0, 0)), mode="wrap")
    out = np.apply_along_axis(lambda r: np.convolve(r, kernel, mode="valid"), 1, out)
    out = np.pad(out, ((pad, pad), (0, 0), (0, 0)), mode="edge")
    out = np.apply_along_axis(lambda c: np.convolve(c, kernel, mode="valid"), 0, out)
    shift = np.random.default_rng(seed).uniform(-0.08, 0.08, 3)
    return np.clip(0.5 + 0.7 * (out - 0.5) + shift, 0.0, 1.0)


def sphere_scene(resolution: int = 256, seed: int = 0, camera_distance: float = 3.0, fov: float = 45.0):
    """Synthetic refinement problem: a sphere whose true texture produces the
    reference image at azimuth 0, and a degraded coarse copy.

    Returns ``(coarse_mesh, reference_image, target_mesh)``."""
    from .geometry import orbit_camera
    from .meshtex import rasterize

    target = uv_sphere(texture=pattern_texture(seed=seed))
    coarse = target.with_texture(degrade_texture(target.texture, seed))
    cam = orbit_camera(0.0, 0.0, camera_distance, fov, resolution)
    return coarse, rasterize(target, cam).color, target


def gaussian_sphere(count: int = 2000, radius: float = 1.0, seed: int = 0, texture=None):
    """Flat Gaussians tiling a sphere (Fibonacci lattice), coloured from a
    lat/long texture with the same UV convention as :func:`uv_sphere`."""
    from .splat import GaussianCloud

    k = np.arange(count) + 0.5
    y = 1.0 - 2.0 * k / count
    ring = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * k
    normals = np.stack([ring * np.sin(phi), y, ring * np.cos(phi)], -1)
    texture = pattern_texture(seed=seed) if texture is None else texture
    th, tw = texture.shape[:2]
    u = np.mod(phi, 2 * np.pi) / (2 * np.pi)
    v = 1.0 - np.arccos(np.clip(y, -1, 1)) / np.pi
    colors = texture[np.clip(((1 - v) * th).astype(int), 0, th - 1), np.clip((u * tw).astype(int), 0, tw - 1)]
    # quaternion (wxyz) turning +z onto each normal
    q = np.concatenate([1.0 + normals[:, 2:3], -normals[:, 1:2], normals[:, 0:1], np.zeros((count, 1))], -1)
    flip = q[:, 0] < 1e-9
    q[flip] = [0.0, 1.0, 0.0, 0.0]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    spacing = radius * np.sqrt(4 * np.pi / count)
    scale = np.tile([0.6 * spacing, 0.6 * spacing, 0.05 * spacing], (count, 1))
    return GaussianCloud(radius * normals, scale, q, np.clip(colors, 0, 1), np.full(count, 0.9))
