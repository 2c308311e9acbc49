import json
import logging
import struct

import numpy as np
import pytest

from repaint3d.assets import (
    SH_C0,
    load_gaussians,
    load_mesh,
    load_pfm,
    load_pfm_stack,
    load_png,
    save_gaussians,
    save_mesh,
    save_pfm,
    save_png,
)
from repaint3d.config import RunConfig, dump_run_config, load_run_config, parse_run_config
from repaint3d.errors import DataError
from repaint3d.fixtures import cube, gaussian_sphere, uv_sphere
from repaint3d.metrics import mse, psnr
from repaint3d.pipeline import PipelineConfig
from repaint3d.splat import GaussianCloud

FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
          "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def write_ply(path, rows, fields=FIELDS, extra_header=""):
    header = f"ply\nformat binary_little_endian 1.0\nelement vertex {len(rows)}\n"
    header += extra_header + "".join(f"property float {f}\n" for f in fields) + "end_header\n"
    body = b"".join(struct.pack(f"<{len(fields)}f", *r) for r in rows)
    path.write_bytes(header.encode() + body)
    return len(header)


def random_cloud(rng, n=50):
    q = rng.standard_normal((n, 4))
    return GaussianCloud(rng.uniform(-1, 1, (n, 3)), rng.uniform(0.01, 0.5, (n, 3)),
                         q / np.linalg.norm(q, axis=1, keepdims=True), rng.uniform(0.05, 0.95, (n, 3)),
                         rng.uniform(0.05, 0.95, n))


# Gaussians -----------------------------------------------------------------

def test_ply_round_trip(tmp_path, rng):
    cloud = random_cloud(rng)
    save_gaussians(tmp_path / "c.ply", cloud)
    back = load_gaussians(tmp_path / "c.ply")
    for name in ("mu", "scale", "rotation", "color", "opacity"):
        assert np.abs(getattr(back, name) - getattr(cloud, name)).max() < 1e-6, name


def test_ply_activation_conventions(tmp_path):
    write_ply(tmp_path / "g.ply", [[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0]])
    g = load_gaussians(tmp_path / "g.ply")
    assert g.opacity[0] == 0.5
    np.testing.assert_array_equal(g.color[0], [0.5, 0.5, 0.5])
    np.testing.assert_array_equal(g.scale[0], [1.0, 1.0, 1.0])
    assert SH_C0 == pytest.approx(0.28209479177)


def test_ply_normalises_quaternions(tmp_path):
    write_ply(tmp_path / "g.ply", [[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 2, 0, 0, 0]])
    np.testing.assert_allclose(load_gaussians(tmp_path / "g.ply").rotation[0], [1, 0, 0, 0])


def test_ply_missing_property(tmp_path):
    write_ply(tmp_path / "g.ply", [[0] * 13], fields=FIELDS[:-1])
    with pytest.raises(DataError, match="rot_3"):
        load_gaussians(tmp_path / "g.ply")


def test_ply_non_finite_value_reports_offset(tmp_path):
    row = [0.0] * 14
    row[10] = 1.0
    bad = list(row)
    bad[7] = float("nan")
    body_start = write_ply(tmp_path / "g.ply", [row, bad])
    with pytest.raises(DataError) as info:
        load_gaussians(tmp_path / "g.ply")
    assert info.value.offset == body_start + 14 * 4 + 7 * 4
    assert "byte offset" in str(info.value)


def test_ply_truncated_and_malformed(tmp_path):
    save_gaussians(tmp_path / "c.ply", gaussian_sphere(100))
    data = (tmp_path / "c.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-5])
    with pytest.raises(DataError, match="truncated"):
        load_gaussians(tmp_path / "t.ply")
    (tmp_path / "h.ply").write_bytes(data[:40])
    with pytest.raises(DataError):
        load_gaussians(tmp_path / "h.ply")
    (tmp_path / "a.ply").write_bytes(data.replace(b"binary_little_endian", b"ascii", 1))
    with pytest.raises(DataError):
        load_gaussians(tmp_path / "a.ply")
    (tmp_path / "m.ply").write_bytes(b"obj\n" + data[4:])
    with pytest.raises(DataError) as info:
        load_gaussians(tmp_path / "m.ply")
    assert info.value.offset == 0


def test_ply_higher_sh_ignored_with_warning(tmp_path, caplog):
    fields = FIELDS + ["f_rest_0"]
    write_ply(tmp_path / "g.ply", [[0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 0.3]], fields=fields)
    with caplog.at_level(logging.WARNING):
        g = load_gaussians(tmp_path / "g.ply")
    assert len(g) == 1
    assert "SH" in caplog.text


# meshes --------------------------------------------------------------------

def test_mesh_round_trip(tmp_path):
    mesh = uv_sphere(n_lat=8, n_lon=16)
    save_mesh(tmp_path / "s.obj", mesh)
    back = load_mesh(tmp_path / "s.obj")
    # unreferenced vertices are dropped and the rest reindexed, so compare per corner
    assert len(back.faces) == len(mesh.faces)
    for name in ("vertices", "uvs", "normals"):
        a = getattr(back, name)[back.faces]
        b = getattr(mesh, name)[mesh.faces]
        np.testing.assert_allclose(a, b, atol=1e-8, err_msg=name)
    # 8-bit texture storage
    assert np.abs(back.texture - mesh.texture).max() <= 0.5 / 255 + 1e-12


def test_cube_has_twelve_faces():
    assert len(cube().faces) == 12


def test_empty_obj_rejected(tmp_path):
    (tmp_path / "e.obj").write_text("")
    with pytest.raises(DataError):
        load_mesh(tmp_path / "e.obj")


def test_quad_fan_triangulated_and_negative_indices(tmp_path):
    (tmp_path / "q.obj").write_text(
        "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\n"
        "f -4/-4 -3/-3 -2/-2 -1/-1\n"
    )
    mesh = load_mesh(tmp_path / "q.obj")
    assert mesh.faces.tolist() == [[0, 1, 2], [0, 2, 3]]
    np.testing.assert_allclose(mesh.normals, np.tile([0, 0, 1.0], (4, 1)))


def test_textured_mesh_without_uvs_rejected(tmp_path):
    save_png(tmp_path / "t.png", np.zeros((2, 2, 3)))
    (tmp_path / "m.mtl").write_text("newmtl a\nmap_Kd t.png\n")
    (tmp_path / "m.obj").write_text("mtllib m.mtl\nv 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    with pytest.raises(DataError, match="texture coordinates"):
        load_mesh(tmp_path / "m.obj")


def test_malformed_obj_record_offset(tmp_path):
    (tmp_path / "b.obj").write_text("v 0 0 0\nv 1 x 0\n")
    with pytest.raises(DataError) as info:
        load_mesh(tmp_path / "b.obj")
    assert info.value.offset == len("v 0 0 0\n")


def test_face_index_out_of_range(tmp_path):
    (tmp_path / "b.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n")
    with pytest.raises(DataError, match="out of range"):
        load_mesh(tmp_path / "b.obj")


# rasters -------------------------------------------------------------------

def test_png_writes_are_byte_stable(tmp_path, rng):
    img = rng.uniform(size=(16, 16, 3))
    save_png(tmp_path / "a.png", img)
    save_png(tmp_path / "b.png", img)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert np.abs(load_png(tmp_path / "a.png") - img).max() <= 0.5 / 255 + 1e-12


def test_unreadable_png(tmp_path):
    (tmp_path / "x.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_png(tmp_path / "x.png")


def test_pfm_round_trip_multi_frame(tmp_path, rng):
    frames = [rng.standard_normal((5, 7)).astype(np.float32), rng.standard_normal((3, 4, 3)).astype(np.float32)]
    frames[0][0, 0] = np.inf
    save_pfm(tmp_path / "s.pfm", frames)
    back = load_pfm_stack(tmp_path / "s.pfm")
    assert len(back) == 2
    np.testing.assert_array_equal(back[0], frames[0])
    np.testing.assert_array_equal(back[1], frames[1])
    np.testing.assert_array_equal(load_pfm(tmp_path / "s.pfm"), frames[0])


def test_pfm_errors(tmp_path):
    (tmp_path / "a.pfm").write_bytes(b"P7\n2 2\n-1.0\n")
    with pytest.raises(DataError):
        load_pfm(tmp_path / "a.pfm")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b"\0" * 8)
    with pytest.raises(DataError, match="truncated"):
        load_pfm(tmp_path / "b.pfm")
    with pytest.raises(ValueError):
        save_pfm(tmp_path / "c.pfm", np.zeros((2, 2, 2)))


# metrics -------------------------------------------------------------------

def test_psnr_examples(rng):
    a = rng.uniform(size=(8, 8, 3))
    assert psnr(a, a) == float("inf")
    assert psnr(np.full((4, 4, 3), 0.5), np.full((4, 4, 3), 0.6)) == pytest.approx(20.0)
    b = rng.uniform(size=(8, 8, 3))
    naive = 10 * np.log10(1 / (sum((x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())) / a.size))
    assert psnr(a, b) == pytest.approx(naive, abs=1e-9)
    with pytest.raises(ValueError):
        psnr(a, b[:4])


def test_masked_metrics(rng):
    a, b = rng.uniform(size=(2, 6, 6, 3))
    mask = np.zeros((6, 6), bool)
    mask[2:4] = True
    assert mse(a, b, mask) == pytest.approx(np.mean((a[2:4] - b[2:4]) ** 2))
    with pytest.raises(ValueError):
        mse(a, b, np.zeros((6, 6), bool))


# configuration -------------------------------------------------------------

def test_config_round_trip(tmp_path):
    cfg = RunConfig(PipelineConfig(interval=60.0, seed=3), fixture="sphere", output=tmp_path / "out")
    (tmp_path / "run.json").write_text(json.dumps(dump_run_config(cfg)))
    back = load_run_config(tmp_path / "run.json")
    assert back == cfg


def test_config_relative_paths_resolve(tmp_path):
    cfg = parse_run_config({"mesh": "a/b.obj", "output": "/abs/out"}, tmp_path)
    assert cfg.mesh == tmp_path / "a/b.obj"
    assert str(cfg.output) == "/abs/out"


@pytest.mark.parametrize("data", [
    {"interval": 40, "colour": "red"},
    {"interval": -5},
    {"seed": 1.5},
    {"mesh": "a.obj", "fixture": "cube"},
    {"fixture": "torus"},
    {"resolution": 100, "latent_size": 64},
])
def test_config_rejections(data):
    with pytest.raises(DataError):
        parse_run_config(data)


def test_config_json_syntax_error_offset(tmp_path):
    (tmp_path / "bad.json").write_text('{"seed": 1,, }')
    with pytest.raises(DataError) as info:
        load_run_config(tmp_path / "bad.json")
    assert info.value.offset == 11
