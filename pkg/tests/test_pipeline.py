import numpy as np
import pytest

from repaint3d.errors import DataError
from repaint3d.fixtures import gaussian_sphere, sphere_scene
from repaint3d.pipeline import (
    PipelineConfig,
    build_schedule,
    decode,
    encode,
    ownership_masks,
    prepare,
    prompt_embedding,
    refine_view,
    run,
)

SMALL = dict(resolution=64, latent_size=16, inversion_steps=10, opt_steps=60)


# schedule ------------------------------------------------------------------

def test_schedule_interval_40():
    s = build_schedule(40)
    assert s.azimuths == (0, 40, -40, 80, -80, 120, -120, 160, -160, 180)
    assert s.neighbors[1:3] == ((0,), (0,))
    assert s.neighbors[3] == (40,)
    assert s.neighbors[4] == (-40,)
    assert s.neighbors[-1] == (160, -160)


def test_schedule_interval_180():
    s = build_schedule(180)
    assert s.azimuths == (0, 180)
    assert s.neighbors == ((), (0,))


def test_schedule_interval_60_has_six_views():
    s = build_schedule(60)
    assert s.azimuths == (0, 60, -60, 120, -120, 180)
    assert s.neighbors[-1] == (120, -120)


@pytest.mark.parametrize("interval", [5, 17.5, 30, 45, 50, 90, 100, 179])
def test_schedule_properties(interval):
    s = build_schedule(interval)
    seen = set()
    for az, nbrs in s:
        assert all(n in seen for n in nbrs)
        seen.add(az)
    assert len(seen) == len(s)
    assert s.azimuths[0] == 0 and s.azimuths[-1] == 180
    # the orbit is covered without gaps wider than the interval
    ring = sorted(a % 360 for a in s.azimuths)
    gaps = np.diff(ring + [ring[0] + 360])
    assert gaps.max() <= interval + 1e-9
    assert not any(np.signbit(a) and a == 0 for a in s.azimuths)


@pytest.mark.parametrize("bad", [0, -10, 181])
def test_schedule_rejects_bad_interval(bad):
    with pytest.raises(ValueError):
        build_schedule(bad)


def test_truncated():
    s = build_schedule(40).truncated(3)
    assert s.azimuths == (0, 40, -40)


# config --------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"interval": 0},
    {"resolution": 100},
    {"latent_size": 12, "resolution": 48},
    {"inversion_steps": 2000},
    {"opt_steps": -1},
    {"tau": 0.0},
    {"threads": 0},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        PipelineConfig(**kwargs)


# codec ---------------------------------------------------------------------

def test_encode_block_average(rng):
    img = rng.uniform(size=(8, 8, 3))
    z = encode(img, 2)
    np.testing.assert_allclose(z[0, 0], 2 * img[:4, :4].mean(axis=(0, 1)) - 1)
    assert encode(np.ones((8, 8, 3)), 4).max() == 1.0


def test_decode_applies_delta_only_where_repainted(rng):
    coarse = rng.uniform(0.2, 0.8, (16, 16, 3))
    x0 = encode(coarse, 4)
    x = x0.copy()
    x[:2] += 0.2
    repaint = np.zeros((4, 4), bool)
    repaint[:2] = True
    fg = np.ones((16, 16), bool)
    fg[0, 0] = False
    out = decode(coarse, x0, x, repaint, fg)
    np.testing.assert_array_equal(out[8:], coarse[8:])
    assert out[0, 0].tolist() == coarse[0, 0].tolist()
    np.testing.assert_allclose(out[1:6, 1:], coarse[1:6, 1:] + 0.1, atol=1e-6)
    np.testing.assert_array_equal(decode(coarse, x0, x0, np.ones((4, 4), bool), fg), coarse)


def test_prompt_embedding_deterministic(rng):
    ref = rng.uniform(size=(16, 16, 3))
    a = prompt_embedding(ref, 0)
    np.testing.assert_array_equal(a, prompt_embedding(ref, 0))
    assert not np.allclose(a, prompt_embedding(ref, 1))
    assert np.abs(a).max() < 1


# views ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def scene():
    coarse, reference, target = sphere_scene(resolution=64)
    return coarse, reference, target


@pytest.fixture(scope="module")
def prepared(scene):
    coarse, reference, _ = scene
    return prepare(PipelineConfig(**SMALL), coarse, reference)


@pytest.fixture
def state(prepared):
    prepared.views.clear()
    yield prepared
    prepared.views.clear()


def test_anchor_view_is_the_reference(state):
    rec = refine_view(state, 0.0)
    np.testing.assert_array_equal(rec.fine, state.reference)
    assert rec.visibility is None and not rec.occlusion.any()


def test_neighbour_must_be_refined_first(state):
    with pytest.raises(ValueError, match="not refined"):
        refine_view(state, 80.0, (40.0,))


def test_repeated_view_is_preserved(state):
    # a view identical to a refined one is fully visible, so nothing is repainted
    refine_view(state, 0.0)
    rec = refine_view(state, 0.0, (0.0,))
    assert not rec.repaint[rec.visibility > 0].any()
    np.testing.assert_array_equal(rec.fine[rec.coarse.foreground], rec.coarse.color[rec.coarse.foreground])


def test_side_view_repaints_the_unseen_half(state):
    refine_view(state, 0.0)
    rec = refine_view(state, 90.0, (0.0,))
    assert rec.visibility.shape == (16, 16)
    assert 0.1 < rec.metrics["repaint_fraction"] < 0.9
    assert 0.5 < rec.metrics["occluded_fraction"] < 0.95
    bg = ~rec.coarse.foreground
    np.testing.assert_array_equal(rec.fine[bg], rec.coarse.color[bg])


def test_ownership_masks_disjoint_in_texel_space(state):
    refine_view(state, 0.0)
    refine_view(state, 40.0, (0.0,))
    masks = ownership_masks(state)
    assert set(masks) == {0.0, 40.0}
    for az, m in masks.items():
        assert not (m & ~state.views[az].coarse.foreground).any()
        assert m.sum() > 0
    from repaint3d.meshtex import sample_map
    supervised = []
    for az, m in masks.items():
        smap = sample_map(state.asset, state.views[az].camera)
        rows = m.reshape(-1)[smap.pixels]
        supervised.append(set(smap.texels[rows][smap.weights[rows] > 0].tolist()))
    assert not supervised[0] & supervised[1]


# full runs -----------------------------------------------------------------

def test_single_view_run_fits_reference(scene, tmp_path):
    coarse, reference, _ = scene
    result = run(PipelineConfig(**{**SMALL, "opt_steps": 200}, max_views=1), coarse, reference, tmp_path)
    assert result.metrics["status"] == "ok"
    assert result.metrics["views"]["0"]["masked_psnr"] > 40
    assert result.metrics["mse_after"] < result.metrics["mse_before"]
    for name in ("coarse.png", "depth.pfm", "occlusion.png", "visibility.png", "fine.png"):
        assert (tmp_path / "views" / "0" / name).is_file()
    assert (tmp_path / "mesh" / "refined.obj").is_file()
    assert (tmp_path / "run.json").is_file()


def test_gaussian_run(tmp_path):
    cloud = gaussian_sphere(400)
    result = run(PipelineConfig(**{**SMALL, "opt_steps": 20}, max_views=3), cloud, out_dir=tmp_path)
    assert result.metrics["status"] == "ok"
    assert len(result.views) == 3
    assert (tmp_path / "gaussians" / "refined.ply").is_file()


def test_incremental_run(scene):
    coarse, reference, _ = scene
    result = run(PipelineConfig(**SMALL, max_views=3, incremental=True), coarse, reference)
    assert set(result.metrics["views"]) == {"0", "40", "-40"}


def test_per_step_reference_run(scene):
    coarse, reference, _ = scene
    result = run(PipelineConfig(**SMALL, max_views=2, per_step_reference=True), coarse, reference)
    assert np.isfinite(result.asset.texture).all()


def test_failed_run_records_error(scene, tmp_path, monkeypatch):
    import repaint3d.pipeline as pipeline

    def boom(*args, **kwargs):
        raise DataError("synthetic failure")

    coarse, reference, _ = scene
    monkeypatch.setattr(pipeline, "repaint_denoise", boom)
    with pytest.raises(DataError, match="view 40"):
        run(PipelineConfig(**SMALL, max_views=2), coarse, reference, tmp_path)
    import json
    summary = json.loads((tmp_path / "run.json").read_text())
    assert summary["status"] == "failed"
    assert (tmp_path / "views" / "0" / "fine.png").is_file()
