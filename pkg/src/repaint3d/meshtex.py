"""Textured-mesh rasterisation, bilinear texture sampling and its adjoint,
and masked-MSE texture refinement."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy import sparse

from .errors import EmptyMaskWarning, NumericalError
from .geometry import DEPTH_SENTINEL, TEXEL_SENTINEL, CameraView, GBuffer, view_cosine

NEAR = 1e-6
CHUNK = 1 << 21


@dataclass
class TexturedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    normals: np.ndarray
    uvs: np.ndarray
    texture: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        self.texture = np.asarray(self.texture, dtype=np.float64)
        nv = len(self.vertices)
        if len(self.normals) != nv or len(self.uvs) != nv:
            raise ValueError("vertices, normals and uvs must have equal length")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= nv):
            raise ValueError("face index out of range")
        if np.any(np.abs(np.linalg.norm(self.normals, axis=1) - 1.0) > 1e-6):
            raise ValueError("vertex normals must be unit length")
        if np.any((self.uvs < 0) | (self.uvs > 1)):
            raise ValueError("uvs must lie in [0, 1]")
        if self.texture.ndim != 3 or self.texture.shape[2] != 3:
            raise ValueError("texture must be an (H, W, 3) raster")

    @property
    def texture_shape(self) -> tuple[int, int]:
        return self.texture.shape[:2]

    def with_texture(self, texture) -> "TexturedMesh":
        return replace(self, texture=np.asarray(texture, dtype=np.float64))

    def bounding_radius(self) -> float:
        c = 0.5 * (self.vertices.min(0) + self.vertices.max(0))
        return float(np.linalg.norm(self.vertices - c, axis=1).max())


@dataclass
class Fragments:
    """Visible-surface record per pixel: face id (-1 for background),
    perspective-correct barycentrics and camera depth."""

    face: np.ndarray
    bary: np.ndarray
    depth: np.ndarray

    @property
    def covered(self) -> np.ndarray:
        return self.face >= 0


@dataclass
class TexelGradient:
    grad: np.ndarray
    weight: np.ndarray


def _screen(mesh: TexturedMesh, cam: CameraView):
    pc = cam.world_to_camera(mesh.vertices)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return u, v, z


def rasterize_fragments(mesh: TexturedMesh, cam: CameraView) -> Fragments:
    """Z-buffered triangle coverage at integer pixel centres.

    Triangles with a vertex at or behind the near plane and zero-area
    triangles are skipped.  Depth ties resolve to the lower face index.
    """
    h, w = cam.shape
    best_z = np.full(h * w, np.inf)
    best_f = np.full(h * w, -1, dtype=np.int64)
    frags = Fragments(np.full((h, w), -1, dtype=np.int64), np.zeros((h, w, 3)), np.full((h, w), DEPTH_SENTINEL))
    if len(mesh.faces) == 0:
        return frags
    u, v, z = _screen(mesh, cam)
    f = mesh.faces
    zf = z[f]
    uf, vf = u[f], v[f]
    area = (uf[:, 1] - uf[:, 0]) * (vf[:, 2] - vf[:, 0]) - (uf[:, 2] - uf[:, 0]) * (vf[:, 1] - vf[:, 0])
    keep = np.all(zf > NEAR, axis=1) & (np.abs(area) > 1e-12) & np.isfinite(area)
    x0 = np.maximum(np.ceil(uf.min(1)), 0)
    x1 = np.minimum(np.floor(uf.max(1)), w - 1)
    y0 = np.maximum(np.ceil(vf.min(1)), 0)
    y1 = np.minimum(np.floor(vf.max(1)), h - 1)
    keep &= (x1 >= x0) & (y1 >= y0)
    fid = np.nonzero(keep)[0]
    if len(fid) == 0:
        return frags
    x0, x1, y0, y1 = (a[fid].astype(np.int64) for a in (x0, x1, y0, y1))
    bw = x1 - x0 + 1
    counts = bw * (y1 - y0 + 1)

    start = 0
    cum = np.cumsum(counts)
    while start < len(fid):
        base = cum[start - 1] if start else 0
        stop = max(int(np.searchsorted(cum, base + CHUNK, side="right")), start + 1)
        sl = slice(start, stop)
        n = counts[sl]
        rep = np.repeat(np.arange(start, stop), n)
        local = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
        px = x0[rep] + local % bw[rep]
        py = y0[rep] + local // bw[rep]
        face = fid[rep]
        lam = _barycentric(uf[face], vf[face], area[face], px, py)
        inside = np.all(lam >= -1e-10, axis=1)
        face, px, py, lam = face[inside], px[inside], py[inside], lam[inside]
        inv_z = np.sum(lam / zf[face], axis=1)
        depth = 1.0 / inv_z
        pix = py * w + px
        order = np.lexsort((face, depth, pix))
        pix_s = pix[order]
        first = np.ones(len(pix_s), dtype=bool)
        first[1:] = pix_s[1:] != pix_s[:-1]
        sel = order[first]
        p, d, fc = pix[sel], depth[sel], face[sel]
        better = d < best_z[p]
        best_z[p[better]] = d[better]
        best_f[p[better]] = fc[better]
        start = stop

    covered = best_f >= 0
    pix = np.nonzero(covered)[0]
    face = best_f[pix]
    lam = _barycentric(uf[face], vf[face], area[face], (pix % w).astype(np.float64), (pix // w).astype(np.float64))
    lam = np.clip(lam, 0.0, None)
    pw = lam / zf[face]
    bary = pw / pw.sum(1, keepdims=True)
    frags.face.reshape(-1)[pix] = face
    frags.bary.reshape(-1, 3)[pix] = bary
    frags.depth.reshape(-1)[pix] = best_z[pix]
    return frags


def _barycentric(uf, vf, area, px, py):
    x0, x1, x2 = uf[:, 0] - px, uf[:, 1] - px, uf[:, 2] - px
    y0, y1, y2 = vf[:, 0] - py, vf[:, 1] - py, vf[:, 2] - py
    l0 = (x1 * y2 - x2 * y1) / area
    l1 = (x2 * y0 - x0 * y2) / area
    return np.stack([l0, l1, 1.0 - l0 - l1], axis=1)


def _interp(frags: Fragments, attr: np.ndarray, faces: np.ndarray) -> np.ndarray:
    cov = frags.covered
    out = np.zeros(frags.face.shape + attr.shape[1:])
    f = faces[frags.face[cov]]
    out[cov] = np.einsum("nk,nk...->n...", frags.bary[cov], attr[f])
    return out


@dataclass
class SampleMap:
    """Bilinear footprint of covered pixels in texture space."""

    pixels: np.ndarray      # flat pixel index (n,)
    texels: np.ndarray      # flat texel indices (n, 4)
    weights: np.ndarray     # bilinear weights (n, 4), rows sum to 1
    nearest: np.ndarray     # nearest texel per pixel (n,)
    shape: tuple            # image (H, W)


def uv_to_texel(uv: np.ndarray, tex_shape) -> tuple[np.ndarray, np.ndarray]:
    """Continuous texel coordinates (x, y); texel centres are integers,
    v = 1 is the top row."""
    th, tw = tex_shape
    return uv[..., 0] * tw - 0.5, (1.0 - uv[..., 1]) * th - 0.5


def bilinear_footprint(uv: np.ndarray, tex_shape):
    th, tw = tex_shape
    x, y = uv_to_texel(uv, tex_shape)
    x = np.clip(x, 0.0, tw - 1)
    y = np.clip(y, 0.0, th - 1)
    xa = np.floor(x).astype(np.int64)
    ya = np.floor(y).astype(np.int64)
    xb = np.minimum(xa + 1, tw - 1)
    yb = np.minimum(ya + 1, th - 1)
    fx, fy = x - xa, y - ya
    texels = np.stack([ya * tw + xa, ya * tw + xb, yb * tw + xa, yb * tw + xb], axis=-1)
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    nearest = np.clip(np.floor(y + 0.5), 0, th - 1).astype(np.int64) * tw + np.clip(np.floor(x + 0.5), 0, tw - 1).astype(np.int64)
    return texels, weights, nearest


def sample_map(mesh: TexturedMesh, cam: CameraView, frags: Fragments | None = None) -> SampleMap:
    frags = rasterize_fragments(mesh, cam) if frags is None else frags
    uv = _interp(frags, mesh.uvs, mesh.faces)
    cov = frags.covered.reshape(-1)
    texels, weights, nearest = bilinear_footprint(uv.reshape(-1, 2)[cov], mesh.texture_shape)
    return SampleMap(np.nonzero(cov)[0], texels, weights, nearest, frags.face.shape)


def sample_texture(texture: np.ndarray, smap: SampleMap, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    h, w = smap.shape
    img = np.broadcast_to(np.asarray(background, dtype=np.float64), (h * w, 3)).copy()
    flat = texture.reshape(-1, 3)
    img[smap.pixels] = np.einsum("nk,nkc->nc", smap.weights, flat[smap.texels])
    return img.reshape(h, w, 3)


def scatter_to_texels(smap: SampleMap, dL_dColor: np.ndarray, tex_shape, pixel_weight=None) -> TexelGradient:
    th, tw = tex_shape
    g = np.asarray(dL_dColor, dtype=np.float64).reshape(-1, 3)[smap.pixels]
    pw = np.ones(len(smap.pixels)) if pixel_weight is None else np.asarray(pixel_weight, dtype=np.float64).reshape(-1)[smap.pixels]
    idx = smap.texels.reshape(-1)
    grad = np.stack(
        [np.bincount(idx, weights=(smap.weights * g[:, c, None]).reshape(-1), minlength=th * tw) for c in range(3)],
        axis=-1,
    )
    weight = np.bincount(idx, weights=(smap.weights * pw[:, None]).reshape(-1), minlength=th * tw)
    return TexelGradient(grad.reshape(th, tw, 3), weight.reshape(th, tw))


def rasterize(mesh: TexturedMesh, cam: CameraView, background=(0.0, 0.0, 0.0)) -> GBuffer:
    """G-buffer with bilinearly sampled colour, camera depth, interpolated unit
    world normal, nearest texel id and ``extras['cos_theta']``."""
    frags = rasterize_fragments(mesh, cam)
    smap = sample_map(mesh, cam, frags)
    h, w = cam.shape
    normal = _interp(frags, mesh.normals, mesh.faces)
    norm = np.linalg.norm(normal, axis=-1, keepdims=True)
    normal = np.where(norm > 1e-12, normal / np.maximum(norm, 1e-12), 0.0)
    texel_id = np.full(h * w, TEXEL_SENTINEL, dtype=np.int64)
    texel_id[smap.pixels] = smap.nearest
    gbuf = GBuffer(
        color=sample_texture(mesh.texture, smap, background),
        depth=frags.depth.copy(),
        alpha=frags.covered.astype(np.float64),
        normal=normal,
        texel_id=texel_id.reshape(h, w),
    )
    gbuf.extras["cos_theta"] = view_cosine(gbuf.normal, gbuf.depth, cam)
    gbuf.extras["face_id"] = frags.face
    return gbuf


def mse_loss(rendered, target, mask=None) -> float:
    """Mean over masked pixels and colour channels of the squared difference."""
    img = rendered.color if isinstance(rendered, GBuffer) else np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if img.shape != target.shape:
        raise ValueError(f"shape mismatch: {img.shape} vs {target.shape}")
    mask = np.ones(img.shape[:2], dtype=bool) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != img.shape[:2]:
        raise ValueError("mask shape does not match image")
    n = int(mask.sum())
    if n == 0:
        warnings.warn("mse_loss over an empty mask", EmptyMaskWarning, stacklevel=2)
        return 0.0
    diff = (img - target)[mask]
    return float(np.mean(diff * diff))


def texture_backward(mesh: TexturedMesh, cam: CameraView, dL_dColor, pixel_weight=None) -> TexelGradient:
    """Adjoint of bilinear texture sampling: each covered pixel scatters its
    upstream gradient to its four texel neighbours with the sampling weights."""
    h, w = cam.shape
    if np.shape(dL_dColor) != (h, w, 3):
        raise ValueError(f"dL_dColor must have shape {(h, w, 3)}")
    return scatter_to_texels(sample_map(mesh, cam), dL_dColor, mesh.texture_shape, pixel_weight)


def refine_texture(mesh: TexturedMesh, views, steps: int = 200, lr: float = 0.5, history: list | None = None,
                   background=(0.0, 0.0, 0.0)) -> TexturedMesh:
    """Minimise the summed masked MSE over ``views`` by texel gradient descent.

    ``views`` holds ``(camera, target image, mask)`` triples.  Each step is
    divided per texel by the loss-weighted bilinear mass the texel receives,
    which makes ``lr <= 1`` a monotone (Jacobi-preconditioned) descent.
    Texels no view samples are left untouched; values are clamped to [0, 1].
    If ``history`` is given, the loss before every step and the final loss
    are appended to it.
    """
    views = list(views)
    if not views:
        raise ValueError("refine_texture needs at least one view")
    shape = mesh.texture_shape
    ntex = shape[0] * shape[1]
    bg = np.asarray(background, dtype=np.float64)
    blocks, targets, row_w = [], [], []
    offset = 0.0  # masked background pixels add a texture-independent constant
    for cam, target, mask in views:
        smap = sample_map(mesh, cam)
        mask = np.asarray(mask).astype(bool)
        target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
        n = int(mask.sum())
        if n == 0:
            continue
        outside = mask.reshape(-1).copy()
        outside[smap.pixels] = False
        offset += float(np.sum((target[outside] - bg) ** 2)) / (3 * n)
        keep = mask.reshape(-1)[smap.pixels]
        rows = np.repeat(np.arange(int(keep.sum())), 4)
        blocks.append(sparse.csr_matrix((smap.weights[keep].reshape(-1), (rows, smap.texels[keep].reshape(-1))),
                                        shape=(int(keep.sum()), ntex)))
        targets.append(target[smap.pixels[keep]])
        row_w.append(np.full(int(keep.sum()), 1.0 / (3 * n)))
    if not blocks:
        if history is not None:
            history.append(offset)
        return mesh.with_texture(mesh.texture.copy())
    a = sparse.vstack(blocks).tocsr()
    at = a.T.tocsr()
    y = np.concatenate(targets)
    w = np.concatenate(row_w)
    weight = at @ (2.0 * w)
    active = weight > 0
    tex = mesh.texture.reshape(-1, 3).copy()

    def loss_of(t):
        r = a @ t - y
        loss = float(np.sum(w[:, None] * r * r)) + offset
        if not np.isfinite(loss):
            raise NumericalError("texture refinement produced a non-finite loss")
        return loss, r

    for _ in range(steps):
        loss, r = loss_of(tex)
        if history is not None:
            history.append(loss)
        grad = at @ (2.0 * w[:, None] * r)
        tex[active] -= lr * grad[active] / weight[active, None]
        np.clip(tex, 0.0, 1.0, out=tex)
    if history is not None:
        history.append(loss_of(tex)[0])
    tex = tex.reshape(shape + (3,))
    return mesh.with_texture(tex)
