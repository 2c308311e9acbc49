"""File formats: Gaussian PLY, OBJ/MTL/PNG meshes, PNG images and PFM rasters."""

from __future__ import annotations

import logging
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .meshtex import TexturedMesh
from .splat import GaussianCloud

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
PNG_COMPRESSION = 6

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_GAUSSIAN_FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


# ---------------------------------------------------------------- images

def save_png(path, image) -> None:
    """Write a float image in [0, 1] ((H, W) or (H, W, 3)) as 8-bit PNG."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"cannot write an image of shape {img.shape}")
    data = np.round(np.clip(np.nan_to_num(img), 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG", optimize=False, compress_level=PNG_COMPRESSION)


def load_png(path, mode: str = "RGB") -> np.ndarray:
    try:
        with Image.open(path) as im:
            data = np.asarray(im.convert(mode), dtype=np.float64) / 255.0
    except (OSError, SyntaxError) as exc:
        raise DataError(f"{path}: not a readable image ({exc})") from exc
    return data


def save_pfm(path, frames) -> None:
    """Write one raster or a list of rasters ((H, W) or (H, W, 3)) as
    consecutive little-endian PFM frames."""
    if isinstance(frames, np.ndarray):
        frames = [frames]
    with open(path, "wb") as f:
        for frame in frames:
            arr = np.asarray(frame, dtype=np.float32)
            if arr.ndim == 3 and arr.shape[2] == 1:
                arr = arr[..., 0]
            if arr.ndim == 2:
                tag = b"Pf"
            elif arr.ndim == 3 and arr.shape[2] == 3:
                tag = b"PF"
            else:
                raise ValueError(f"PFM frames must be (H, W) or (H, W, 3), got {arr.shape}")
            h, w = arr.shape[:2]
            f.write(tag + b"\n" + f"{w} {h}\n-1.0\n".encode())
            f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def load_pfm_stack(path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    frames = []
    pos = 0
    header = re.compile(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s")
    while pos < len(data):
        if not data[pos:].strip():
            break
        m = header.match(data, pos)
        if not m:
            raise DataError(f"{path}: malformed PFM header", offset=pos)
        color = m.group(1) == b"PF"
        w, h = int(m.group(2)), int(m.group(3))
        try:
            scale = float(m.group(4))
        except ValueError:
            raise DataError(f"{path}: bad PFM scale", offset=m.start(4)) from None
        if scale == 0:
            raise DataError(f"{path}: PFM scale must be non-zero", offset=m.start(4))
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if color else 1)
        start = m.end()
        end = start + 4 * count
        if end > len(data):
            raise DataError(f"{path}: truncated PFM raster", offset=len(data))
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=start).astype(np.float64)
        arr = arr.reshape((h, w, 3) if color else (h, w))[::-1].copy()
        frames.append(arr)
        pos = end
    if not frames:
        raise DataError(f"{path}: empty PFM file", offset=0)
    return frames


def load_pfm(path) -> np.ndarray:
    return load_pfm_stack(path)[0]


# ---------------------------------------------------------------- Gaussians

def _parse_ply_header(data: bytes, path):
    if not data.startswith(b"ply\n"):
        raise DataError(f"{path}: missing 'ply' magic", offset=0)
    end = data.find(b"end_header\n")
    if end < 0:
        raise DataError(f"{path}: header has no end_header line", offset=len(data))
    body = end + len(b"end_header\n")
    fmt = None
    elements = []
    pos = 4
    for line in data[4:end].split(b"\n"):
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            pass
        elif words[0] == "format":
            if len(words) != 3:
                raise DataError(f"{path}: malformed format line", offset=pos)
            fmt = words[1]
        elif words[0] == "element":
            if len(words) != 3 or not words[2].isdigit():
                raise DataError(f"{path}: malformed element line", offset=pos)
            elements.append((words[1], int(words[2]), []))
        elif words[0] == "property":
            if not elements:
                raise DataError(f"{path}: property before any element", offset=pos)
            if len(words) == 3 and words[1] in _PLY_TYPES:
                elements[-1][2].append((words[2], _PLY_TYPES[words[1]]))
            elif len(words) >= 2 and words[1] == "list":
                raise DataError(f"{path}: list properties are not supported", offset=pos)
            else:
                raise DataError(f"{path}: malformed property line", offset=pos)
        else:
            raise DataError(f"{path}: unexpected header line {line[:40]!r}", offset=pos)
        pos += len(line) + 1
    if fmt != "binary_little_endian":
        raise DataError(f"{path}: only binary_little_endian PLY is supported (got {fmt})", offset=0)
    return elements, body


def load_gaussians(path) -> GaussianCloud:
    """Read a splatting PLY: log scales, wxyz quaternions, SH-DC colours and
    logit opacities are mapped to linear parameters."""
    data = Path(path).read_bytes()
    elements, pos = _parse_ply_header(data, path)
    vertex = None
    for name, count, props in elements:
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        if name == "vertex":
            vertex = (count, props, dtype, pos)
        pos += count * dtype.itemsize
    if vertex is None:
        raise DataError(f"{path}: no vertex element", offset=0)
    count, props, dtype, start = vertex
    names = [p for p, _ in props]
    missing = [f for f in _GAUSSIAN_FIELDS if f not in names]
    if missing:
        raise DataError(f"{path}: missing properties {', '.join(missing)}", offset=0)
    if any(n.startswith("f_rest_") for n in names):
        log.warning("%s: higher-order SH coefficients ignored", path)
    if start + count * dtype.itemsize > len(data):
        raise DataError(f"{path}: vertex data truncated", offset=len(data))
    rec = np.frombuffer(data, dtype=dtype, count=count, offset=start)
    cols = {f: rec[f].astype(np.float64) for f in _GAUSSIAN_FIELDS}
    for f in _GAUSSIAN_FIELDS:
        bad = np.nonzero(~np.isfinite(cols[f]))[0]
        if len(bad):
            offset = start + int(bad[0]) * dtype.itemsize + dtype.fields[f][1]
            raise DataError(f"{path}: non-finite {f} in vertex {int(bad[0])}", offset=offset)
    rot = np.stack([cols[f"rot_{i}"] for i in range(4)], -1)
    norm = np.linalg.norm(rot, axis=-1, keepdims=True)
    if np.any(norm == 0):
        bad = int(np.nonzero(norm[:, 0] == 0)[0][0])
        raise DataError(f"{path}: zero quaternion in vertex {bad}", offset=start + bad * dtype.itemsize)
    dc = np.stack([cols[f"f_dc_{i}"] for i in range(3)], -1)
    return GaussianCloud(
        mu=np.stack([cols["x"], cols["y"], cols["z"]], -1),
        scale=np.exp(np.stack([cols[f"scale_{i}"] for i in range(3)], -1)),
        rotation=rot / norm,
        color=np.clip(0.5 + SH_C0 * dc, 0.0, 1.0),
        opacity=1.0 / (1.0 + np.exp(-cols["opacity"])),
    )


def save_gaussians(path, cloud: GaussianCloud) -> None:
    n = len(cloud)
    fields = ["x", "y", "z", "nx", "ny", "nz"] + _GAUSSIAN_FIELDS[3:]
    rec = np.zeros(n, dtype=[(f, "<f4") for f in fields])
    rec["x"], rec["y"], rec["z"] = cloud.mu.T
    for i in range(3):
        rec[f"f_dc_{i}"] = (cloud.color[:, i] - 0.5) / SH_C0
        rec[f"scale_{i}"] = np.log(cloud.scale[:, i])
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotation[:, i]
    with np.errstate(divide="ignore"):
        op = np.clip(cloud.opacity, 1e-7, 1 - 1e-7)
        rec["opacity"] = np.log(op) - np.log1p(-op)
    header = "ply\nformat binary_little_endian 1.0\n"
    header += f"element vertex {n}\n" + "".join(f"property float {f}\n" for f in fields) + "end_header\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(rec.tobytes())


# ---------------------------------------------------------------- meshes

def _vertex_normals(vertices, faces):
    n = np.zeros_like(vertices)
    fn = np.cross(vertices[faces[:, 1]] - vertices[faces[:, 0]], vertices[faces[:, 2]] - vertices[faces[:, 0]])
    for k in range(3):
        np.add.at(n, faces[:, k], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = np.where(norm > 0, n / np.where(norm > 0, norm, 1), [0.0, 0.0, 1.0])
    return n


def load_mesh(path) -> TexturedMesh:
    """Read an OBJ (plus its MTL ``map_Kd`` texture).  Polygons are fan
    triangulated; corners with distinct v/vt/vn triples become distinct
    vertices.  Missing normals are computed from the faces."""
    path = Path(path)
    text = path.read_text()
    pos, tex, norms, corners, faces = [], [], [], {}, []
    texture_path = None
    has_uv_refs = True
    offset = 0
    for lineno, line in enumerate(text.splitlines(keepends=True), 1):
        at = offset
        offset += len(line.encode())
        words = line.split("#", 1)[0].split()
        if not words:
            continue
        key, args = words[0], words[1:]
        try:
            if key == "v":
                pos.append([float(a) for a in args[:3]])
                if len(args) < 3:
                    raise ValueError
            elif key == "vt":
                tex.append([float(a) for a in args[:2]])
                if len(args) < 2:
                    raise ValueError
            elif key == "vn":
                norms.append([float(a) for a in args[:3]])
                if len(args) < 3:
                    raise ValueError
            elif key == "f":
                if len(args) < 3:
                    raise ValueError
                ids = []
                for corner in args:
                    parts = (corner.split("/") + ["", ""])[:3]
                    idx = []
                    for part, count in zip(parts, (len(pos), len(tex), len(norms))):
                        if part == "":
                            idx.append(None)
                            continue
                        i = int(part)
                        i = i - 1 if i > 0 else count + i
                        if not 0 <= i < count:
                            raise DataError(f"{path}:{lineno}: face index out of range", offset=at)
                        idx.append(i)
                    if idx[1] is None:
                        has_uv_refs = False
                    ids.append(corners.setdefault(tuple(idx), len(corners)))
                faces.extend([ids[0], ids[k], ids[k + 1]] for k in range(1, len(ids) - 1))
            elif key == "mtllib":
                texture_path = _texture_from_mtl(path.parent / " ".join(args), path)
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}:{lineno}: malformed '{key}' record", offset=at) from None
    if not faces:
        raise DataError(f"{path}: no faces", offset=0)
    if texture_path is not None and not has_uv_refs:
        raise DataError(f"{path}: textured mesh without texture coordinates", offset=0)
    keys = list(corners)
    vertices = np.array([pos[k[0]] for k in keys], dtype=np.float64)
    face_arr = np.array(faces, dtype=np.int64)
    uvs = np.array([tex[k[1]] if k[1] is not None else (0.0, 0.0) for k in keys], dtype=np.float64)
    if all(k[2] is not None for k in keys):
        normals = np.array([norms[k[2]] for k in keys], dtype=np.float64)
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    else:
        normals = _vertex_normals(vertices, face_arr)
    texture = load_png(texture_path) if texture_path is not None else np.full((1, 1, 3), 0.5)
    return TexturedMesh(vertices, face_arr, normals, np.clip(uvs, 0.0, 1.0), texture)


def _texture_from_mtl(mtl_path: Path, obj_path: Path):
    try:
        lines = mtl_path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{obj_path}: cannot read material library {mtl_path.name}") from exc
    for line in lines:
        words = line.split()
        if words and words[0] == "map_Kd":
            return mtl_path.parent / words[-1]
    return None


def save_mesh(path, mesh: TexturedMesh, texture_name: str | None = None) -> None:
    """Write ``name.obj``, ``name.mtl`` and the texture PNG (``name.png``
    unless ``texture_name`` is given) side by side."""
    path = Path(path)
    stem = path.with_suffix("")
    mtl = stem.with_suffix(".mtl")
    png = stem.with_suffix(".png") if texture_name is None else path.with_name(texture_name)
    save_png(png, mesh.texture)
    mtl.write_text(f"newmtl material0\nKd 1 1 1\nmap_Kd {png.name}\n")
    lines = [f"mtllib {mtl.name}\n", "usemtl material0\n"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.9g} {v:.9g}\n" for u, v in mesh.uvs]
    lines += [f"vn {x:.9g} {y:.9g} {z:.9g}\n" for x, y, z in mesh.normals]
    lines += ["f " + " ".join(f"{i}/{i}/{i}" for i in face + 1) + "\n" for face in mesh.faces]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(lines))
    os.replace(tmp, path)
