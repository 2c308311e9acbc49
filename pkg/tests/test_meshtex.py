import warnings

import numpy as np
import pytest

from repaint3d.errors import EmptyMaskWarning
from repaint3d.fixtures import single_triangle, sphere_hit, uv_sphere
from repaint3d.geometry import CameraView, PointCloud3D, back_project_depth, orbit_camera, splat_points
from repaint3d.meshtex import (
    bilinear_footprint,
    mse_loss,
    rasterize,
    refine_texture,
    sample_map,
    texture_backward,
    uv_to_texel,
)
from repaint3d.metrics import psnr

TELE = CameraView(2000.0, 2000.0, 31.5, 31.5, np.eye(3), np.zeros(3), 64, 64)


def facing_triangle(size=0.04, z=4.0, tilt=0.0, texture=None):
    pts = np.array([[-size, -size, 0.0], [size, -size, 0.0], [0.0, size, 0.0]])
    c, s = np.cos(np.radians(tilt)), np.sin(np.radians(tilt))
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    normal = rot @ [0.0, 0.0, -1.0]
    return single_triangle(pts @ rot.T + [0, 0, z], texture=texture, normal=normal)


def test_screen_facing_triangle_constant_colour():
    tex = np.tile([0.2, 0.6, 0.3], (8, 8, 1))
    out = rasterize(facing_triangle(texture=tex), TELE)
    cov = out.alpha > 0
    assert cov.sum() > 200
    np.testing.assert_allclose(out.color[cov], np.broadcast_to([0.2, 0.6, 0.3], (cov.sum(), 3)), atol=1e-12)
    assert np.abs(out.extras["cos_theta"][cov] - 1.0).max() < 1e-4


def test_tilted_triangle_cosine():
    out = rasterize(facing_triangle(tilt=60.0), TELE)
    cov = out.alpha > 0
    assert cov.sum() > 50
    # the triangle subtends ~0.01 rad, which spreads cos(theta) by a few 1e-3
    assert np.abs(out.extras["cos_theta"][cov] - 0.5).max() < 5e-3
    assert out.extras["cos_theta"][31, 31] == pytest.approx(0.5, abs=1e-3)


def test_sphere_mesh_cosine_matches_analytic():
    cam = orbit_camera(0.0, width=128)
    out = rasterize(uv_sphere(n_lat=64, n_lon=128), cam)
    depth, pts, normals = sphere_hit(cam)
    both = (out.alpha > 0) & np.isfinite(depth)
    to_cam = cam.center - pts[both]
    to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
    analytic = np.clip(np.sum(normals[both] * to_cam, -1), 0, 1)
    assert np.abs(out.extras["cos_theta"][both] - analytic).max() < 0.02


def test_sphere_mesh_cosine_exact_at_fragment():
    cam = orbit_camera(0.0, width=128)
    out = rasterize(uv_sphere(), cam)
    pts, valid = back_project_depth(out.depth, cam)
    n = pts[valid] / np.linalg.norm(pts[valid], axis=-1, keepdims=True)
    to_cam = cam.center - pts[valid]
    to_cam /= np.linalg.norm(to_cam, axis=-1, keepdims=True)
    np.testing.assert_allclose(out.extras["cos_theta"][valid], np.clip(np.sum(n * to_cam, -1), 0, 1), atol=1e-12)


def test_mse_loss_examples(rng):
    a = rng.uniform(size=(6, 7, 3))
    assert mse_loss(a, a) == 0.0
    assert mse_loss(a, a + 0.1) == pytest.approx(0.01)
    b = rng.uniform(size=(6, 7, 3))
    mask = rng.uniform(size=(6, 7)) > 0.5
    brute = sum(((a[i, j] - b[i, j]) ** 2).sum() for i in range(6) for j in range(7) if mask[i, j]) / (3 * mask.sum())
    assert mse_loss(a, b, mask) == pytest.approx(brute, rel=1e-12)


def test_mse_loss_empty_mask_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert mse_loss(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), np.zeros((2, 2))) == 0.0
    assert any(issubclass(w.category, EmptyMaskWarning) for w in caught)


def test_texture_backward_zero():
    g = texture_backward(facing_triangle(), TELE, np.zeros((64, 64, 3)))
    assert not g.grad.any()


def test_texel_centre_gets_full_weight():
    uv = np.array([[(3 + 0.5) / 8, 1 - (5 + 0.5) / 8]])
    texels, weights, nearest = bilinear_footprint(uv, (8, 8))
    assert nearest[0] == 5 * 8 + 3
    assert weights[0, 0] == pytest.approx(1.0)
    assert texels[0, 0] == 5 * 8 + 3
    x, y = uv_to_texel(uv, (8, 8))
    assert (x[0], y[0]) == pytest.approx((3.0, 5.0))


def test_scattered_weights_sum_to_one():
    smap = sample_map(uv_sphere(), orbit_camera(30.0, width=96))
    np.testing.assert_allclose(smap.weights.sum(1), 1.0, atol=1e-12)


def test_texel_gradient_matches_finite_differences(rng):
    mesh = uv_sphere(texture=rng.uniform(0.2, 0.8, (16, 32, 3)))
    cam = orbit_camera(25.0, 10.0, width=32)
    up = rng.standard_normal((32, 32, 3))
    grad = texture_backward(mesh, cam, up).grad
    h = 1e-4
    picks = [tuple(t) for t in np.argwhere(np.abs(grad).sum(-1) > 0)[:15]]
    for y, x in picks:
        for c in range(3):
            plus, minus = mesh.texture.copy(), mesh.texture.copy()
            plus[y, x, c] += h
            minus[y, x, c] -= h
            fd = (np.sum(rasterize(mesh.with_texture(plus), cam).color * up)
                  - np.sum(rasterize(mesh.with_texture(minus), cam).color * up)) / (2 * h)
            assert abs(grad[y, x, c] - fd) <= 1e-3 * max(abs(fd), 1e-8)


def test_refine_leaves_optimal_texture_unchanged():
    mesh = uv_sphere()
    cam = orbit_camera(0.0, width=64)
    target = rasterize(mesh, cam).color
    out = refine_texture(mesh, [(cam, target, np.ones((64, 64), bool))], steps=10)
    np.testing.assert_allclose(out.texture, mesh.texture, atol=1e-12)


def test_refine_single_triangle_constant_target():
    mesh = facing_triangle(texture=np.full((8, 8, 3), 0.1))
    cov = rasterize(mesh, TELE).alpha > 0
    target = np.zeros((64, 64, 3))
    target[cov] = [0.7, 0.3, 0.9]
    hist = []
    out = refine_texture(mesh, [(TELE, target, cov)], steps=200, lr=0.5, history=hist)
    assert psnr(rasterize(out, TELE).color, target, cov) > 40
    assert all(b <= a + 1e-15 for a, b in zip(hist, hist[1:]))


def test_refine_loss_non_increasing_multi_view(rng):
    mesh = uv_sphere(texture=np.full((32, 64, 3), 0.5))
    views = []
    for az in (0.0, 60.0, -60.0):
        cam = orbit_camera(az, width=64)
        views.append((cam, rng.uniform(size=(64, 64, 3)), rasterize(mesh, cam).alpha > 0))
    hist = []
    refine_texture(mesh, views, steps=30, lr=0.9, history=hist)
    assert len(hist) == 31
    assert all(b <= a + 1e-12 for a, b in zip(hist, hist[1:]))


def test_raster_depth_agrees_with_dense_point_splat(rng):
    mesh = uv_sphere(n_lat=48, n_lon=96)
    cam = orbit_camera(0.0, width=64)
    out = rasterize(mesh, cam)
    f = mesh.faces[rng.integers(0, len(mesh.faces), 200_000)]
    b = rng.dirichlet(np.ones(3), len(f))
    pts = np.einsum("nk,nkc->nc", b, mesh.vertices[f])
    normals = np.cross(mesh.vertices[f[:, 1]] - mesh.vertices[f[:, 0]], mesh.vertices[f[:, 2]] - mesh.vertices[f[:, 0]])
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    splat = splat_points(PointCloud3D(pts), cam, radius=0, normals=normals)
    both = np.isfinite(out.depth) & np.isfinite(splat.depth)
    # one depth quantum: the depth change across one pixel at the sphere's slope limit
    quantum = 3.0 / cam.fx * 3.0
    assert both.sum() > 0.95 * np.isfinite(out.depth).sum()
    assert np.abs(out.depth[both] - splat.depth[both]).max() < quantum
