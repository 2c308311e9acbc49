"""Progressive two-direction view scheduling and the end-to-end refinement run.

A run renders the coarse asset around an orbit starting at the reference
view, repaints each novel view where earlier views saw nothing (or saw
worse), then fits the texture to all repainted images at once.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import reduce
from pathlib import Path

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from . import meshtex, splat
from .assets import save_gaussians, save_mesh, save_pfm, save_png
from .diffusion import (
    PROMPT_DIM,
    Conditioning,
    Latent,
    NoiseSchedule,
    invert_trajectory,
    repaint_denoise,
    toy_denoiser_build,
)
from .geometry import CameraView, GBuffer, orbit_camera
from .meshtex import TexturedMesh
from .metrics import psnr
from .splat import GaussianCloud
from .visibility import binarize, default_tau, intersect, occlusion_mask, visibility_map

log = logging.getLogger(__name__)

BACKGROUND = (0.0, 0.0, 0.0)


def _angle(a: float) -> float:
    return float(a) + 0.0  # folds -0.0 into 0.0


@dataclass(frozen=True)
class ViewSchedule:
    interval: float
    elevation: float
    azimuths: tuple
    neighbors: tuple

    def __iter__(self):
        return iter(zip(self.azimuths, self.neighbors))

    def __len__(self) -> int:
        return len(self.azimuths)

    def truncated(self, count: int) -> "ViewSchedule":
        return replace(self, azimuths=self.azimuths[:count], neighbors=self.neighbors[:count])


def build_schedule(interval: float = 40.0, elevation: float = 0.0) -> ViewSchedule:
    """Reference view at 0, then alternating +k*interval / -k*interval views,
    closed by a junction view at 180 whose neighbours are both chain heads."""
    if not 0 < interval <= 180:
        raise ValueError(f"interval must lie in (0, 180], got {interval}")
    azimuths = [0.0]
    neighbors = [()]
    k = 1
    while k * interval < 180 - 1e-9:
        for sign in (1, -1):
            azimuths.append(_angle(sign * k * interval))
            neighbors.append((_angle(sign * (k - 1) * interval),))
        k += 1
    heads = (azimuths[-2], azimuths[-1]) if len(azimuths) > 1 else (0.0,)
    azimuths.append(180.0)
    neighbors.append(heads)
    return ViewSchedule(float(interval), float(elevation), tuple(azimuths), tuple(neighbors))


@dataclass(frozen=True)
class PipelineConfig:
    interval: float = 40.0
    elevation: float = 0.0
    inversion_steps: int = 30
    timesteps: int = 1000
    guidance: float = 5.0
    tau: float | None = None
    resolution: int = 256
    latent_size: int = 64
    texture_resolution: int | None = None
    opt_steps: int = 200
    lr: float = 0.5
    seed: int = 0
    camera_distance: float = 3.0
    fov: float = 45.0
    max_views: int | None = None
    incremental: bool = False
    per_step_reference: bool = False
    threads: int = 1

    def __post_init__(self):
        positive = ("interval", "inversion_steps", "timesteps", "guidance", "resolution", "latent_size",
                    "lr", "camera_distance", "fov", "threads")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("tau", "texture_resolution", "max_views"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ValueError(f"{name} must be positive")
        if self.opt_steps < 0 or self.seed < 0:
            raise ValueError("opt_steps and seed must be non-negative")
        if self.resolution % self.latent_size:
            raise ValueError("resolution must be a multiple of latent_size")
        if self.latent_size % 8:
            raise ValueError("latent_size must be a multiple of 8")
        if self.inversion_steps > self.timesteps:
            raise ValueError("inversion_steps cannot exceed timesteps")


@dataclass
class ViewRecord:
    azimuth: float
    neighbors: tuple
    camera: CameraView
    coarse: GBuffer
    fine: np.ndarray
    occlusion: np.ndarray
    visibility: np.ndarray | None
    repaint: np.ndarray | None
    metrics: dict = field(default_factory=dict)


@dataclass
class RunState:
    config: PipelineConfig
    asset: TexturedMesh | GaussianCloud
    reference: np.ndarray
    denoiser: object
    schedule: NoiseSchedule
    prompt: np.ndarray
    tau: float
    reference_features: dict = field(default_factory=dict)
    views: dict = field(default_factory=dict)
    coarse_cache: dict = field(default_factory=dict)

    def camera(self, azimuth: float) -> CameraView:
        c = self.config
        return orbit_camera(azimuth, c.elevation, c.camera_distance, c.fov, c.resolution)


@dataclass
class RunResult:
    asset: TexturedMesh | GaussianCloud
    views: dict
    metrics: dict


def render_asset(asset, cam: CameraView, background=BACKGROUND) -> GBuffer:
    if isinstance(asset, TexturedMesh):
        return meshtex.rasterize(asset, cam, background)
    if isinstance(asset, GaussianCloud):
        return splat.render(asset, cam, background)
    raise TypeError(f"cannot render {type(asset).__name__}")


def _pool(a: np.ndarray, size: int) -> np.ndarray:
    f = a.shape[0] // size
    return a.reshape(size, f, size, f, *a.shape[2:]).mean(axis=(1, 3))


def encode(image: np.ndarray, size: int) -> np.ndarray:
    """Identity-style encoder: block average to ``size`` and map [0, 1] to [-1, 1]."""
    return 2.0 * _pool(np.asarray(image, dtype=np.float64), size) - 1.0


def _upsample(a: np.ndarray, shape) -> np.ndarray:
    h, w = shape
    chans = [np.asarray(Image.fromarray(np.ascontiguousarray(a[..., c], dtype=np.float32), mode="F")
                        .resize((w, h), Image.BILINEAR)) for c in range(a.shape[2])]
    return np.stack(chans, -1).astype(np.float64)


def decode(coarse: np.ndarray, x0: np.ndarray, x: np.ndarray, repaint: np.ndarray, foreground: np.ndarray) -> np.ndarray:
    """Apply the latent change ``x - x0`` to the full-resolution coarse image,
    restricted to repainted latent texels and to foreground pixels."""
    h, w = coarse.shape[:2]
    f = h // repaint.shape[0]
    delta = _upsample(0.5 * (x - x0), (h, w))
    keep = np.repeat(np.repeat(repaint, f, 0), f, 1) & foreground
    return np.clip(coarse + delta * keep[..., None], 0.0, 1.0)


def _depth_condition(gbuf: GBuffer, cfg: PipelineConfig, radius: float) -> np.ndarray:
    fg = gbuf.foreground.astype(np.float64)
    d = np.where(gbuf.foreground, gbuf.depth, 0.0)
    cover = _pool(fg, cfg.latent_size)
    mean = np.divide(_pool(d, cfg.latent_size), cover, out=np.zeros_like(cover), where=cover > 0)
    return np.where(cover > 0, (cfg.camera_distance - mean) / max(radius, 1e-12), 0.0)


def prompt_embedding(reference: np.ndarray, seed: int) -> np.ndarray:
    """Fixed random projection of a 4 x 4 colour summary of the reference."""
    h = reference.shape[0]
    grid = _pool(reference, 4) if h % 4 == 0 else reference[:: max(h // 4, 1), :: max(h // 4, 1)][:4, :4]
    feats = 2.0 * grid.reshape(-1) - 1.0
    rng = np.random.default_rng([seed, 1])
    return np.tanh(rng.standard_normal((PROMPT_DIM, feats.size)) @ feats / math.sqrt(feats.size))


class _PerStepReference:
    """Injects reference K/V captured at the current timestep."""

    def __init__(self, denoiser, features: dict):
        self.denoiser = denoiser
        self.features = features

    def predict_noise(self, x, t, cond):
        return self.denoiser.predict_noise(x, t, replace(cond, reference_features=self.features[t]))

    def capture(self, x, t, cond):
        return self.denoiser.capture(x, t, cond)


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return np.asarray(image, dtype=np.float64)
    return np.clip(_upsample(np.asarray(image, dtype=np.float64), (size, size)), 0.0, 1.0)


def _radius(asset) -> float:
    return asset.bounding_radius()


def prepare(config: PipelineConfig, coarse, reference=None) -> RunState:
    """Build the run state: denoiser, schedule, prompt and reference features."""
    if isinstance(coarse, TexturedMesh) and config.texture_resolution is not None:
        r = config.texture_resolution
        coarse = coarse.with_texture(np.clip(_upsample(coarse.texture, (r, 2 * r)), 0.0, 1.0))
    cam0 = orbit_camera(0.0, config.elevation, config.camera_distance, config.fov, config.resolution)
    gbuf0 = render_asset(coarse, cam0)
    reference = gbuf0.color if reference is None else _resize_image(reference, config.resolution)
    radius = _radius(coarse)
    tau = config.tau if config.tau is not None else default_tau(radius)
    sched = NoiseSchedule.scaled_linear(config.timesteps, config.inversion_steps)
    denoiser = toy_denoiser_build(config.seed, guidance=config.guidance)
    state = RunState(config, coarse, reference, denoiser, sched, prompt_embedding(reference, config.seed), tau)
    state.coarse_cache[0.0] = gbuf0

    # reference K/V come from the inverted reference latent
    cond = Conditioning(depth=_depth_condition(gbuf0, config, radius), prompt_embedding=state.prompt)
    traj = invert_trajectory(Latent(encode(reference, config.latent_size), 0), denoiser, cond, sched)
    if config.per_step_reference:
        state.reference_features = {lat.t: denoiser.capture(lat.data, lat.t, cond) for lat in traj}
    else:
        mid = min(traj, key=lambda lat: abs(lat.t - sched.T / 2))
        state.reference_features = {None: denoiser.capture(mid.data, mid.t, cond)}
    return state


def _coarse(state: RunState, azimuth: float) -> GBuffer:
    if azimuth not in state.coarse_cache:
        state.coarse_cache[azimuth] = render_asset(state.asset, state.camera(azimuth))
    return state.coarse_cache[azimuth]


def _map(state: RunState, fn, items):
    items = list(items)
    if state.config.threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=state.config.threads) as pool:
        return list(pool.map(fn, items))


def refine_view(state: RunState, azimuth: float, neighbors=()) -> ViewRecord:
    """Repaint one view against its already refined neighbours and record
    the resulting fine image."""
    cfg = state.config
    cam = state.camera(azimuth)
    gbuf = _coarse(state, azimuth)
    fg = gbuf.foreground
    if not neighbors:
        rec = ViewRecord(azimuth, (), cam, gbuf, state.reference.copy(), np.zeros(cam.shape, dtype=bool), None, None)
        rec.metrics = {"occluded_fraction": 0.0, "repaint_fraction": 0.0, "mean_visibility": 1.0}
        state.views[azimuth] = rec
        return rec
    missing = [n for n in neighbors if n not in state.views]
    if missing:
        raise ValueError(f"view {azimuth}: neighbours {missing} are not refined yet")

    def occ_against(n):
        ref = state.views[n]
        return occlusion_mask((ref.camera, ref.coarse.depth), (cam, gbuf.depth), state.tau)

    occ = reduce(intersect, _map(state, occ_against, neighbors))
    prev = [(rec.camera, rec.coarse) for rec in state.views.values()]
    vis = visibility_map((cam, gbuf), prev, occ, state.tau, size=cfg.latent_size)

    x0 = Latent(encode(gbuf.color, cfg.latent_size), 0)
    cond = Conditioning(depth=_depth_condition(gbuf, cfg, _radius(state.asset)), prompt_embedding=state.prompt)
    inv = invert_trajectory(x0, state.denoiser, cond, state.schedule)
    if cfg.per_step_reference:
        denoiser = _PerStepReference(state.denoiser, state.reference_features)
        repaint_cond = cond
    else:
        denoiser = state.denoiser
        repaint_cond = replace(cond, reference_features=state.reference_features[None])
    out = repaint_denoise(inv[-1], inv, denoiser, repaint_cond, vis, state.schedule)
    # the last blend happens at the first schedule step above 0
    repaint = ~binarize(vis, state.schedule.step_indices[1], state.schedule.T)
    fine = decode(gbuf.color, x0.data, out.data, repaint, fg)
    rec = ViewRecord(azimuth, tuple(neighbors), cam, gbuf, fine, occ, vis, repaint)
    nfg = max(int(fg.sum()), 1)
    rec.metrics = {
        "occluded_fraction": float(occ.sum() / nfg),
        "repaint_fraction": float(repaint.mean()),
        "mean_visibility": float(vis.mean()),
    }
    state.views[azimuth] = rec
    return rec


def ownership_masks(state: RunState) -> dict:
    """Per-view supervision masks.  Each texel is owned by the view that saw
    it at the largest cos(theta) (earliest view on ties), where a view sees
    every texel inside the bilinear footprint of one of its pixels.  A view
    supervises the pixels whose whole footprint it owns.  Assets without
    texel ids fall back to the full foreground."""
    recs = list(state.views.values())
    if not isinstance(state.asset, TexturedMesh):
        return {r.azimuth: r.coarse.foreground for r in recs}
    th, tw = state.asset.texture_shape
    best = np.full(th * tw, -1.0)
    owner = np.full(th * tw, -1, dtype=np.int64)
    smaps = _map(state, lambda r: meshtex.sample_map(state.asset, r.camera), recs)
    for k, (rec, smap) in enumerate(zip(recs, smaps)):
        cos = rec.coarse.extras["cos_theta"].reshape(-1)[smap.pixels]
        used = smap.weights > 0
        per_texel = np.full(th * tw, -1.0)
        np.maximum.at(per_texel, smap.texels[used], np.broadcast_to(cos[:, None], used.shape)[used])
        better = per_texel > best
        best[better] = per_texel[better]
        owner[better] = k
    masks = {}
    for k, (rec, smap) in enumerate(zip(recs, smaps)):
        owned = np.all((owner[smap.texels] == k) | (smap.weights == 0), axis=1)
        mask = np.zeros(rec.camera.width * rec.camera.height, dtype=bool)
        mask[smap.pixels[owned]] = True
        masks[rec.azimuth] = mask.reshape(rec.camera.shape)
    return masks


def _fit(state: RunState, history: list):
    cfg = state.config
    masks = ownership_masks(state)
    views = [(rec.camera, rec.fine, masks[rec.azimuth]) for rec in state.views.values()]
    if isinstance(state.asset, TexturedMesh):
        return meshtex.refine_texture(state.asset, views, cfg.opt_steps, cfg.lr, history=history,
                                      background=BACKGROUND)
    before = sum(meshtex.mse_loss(render_asset(state.asset, c).color, t, m) for c, t, m in views)
    fitted = splat.refine_colors(state.asset, views, cfg.opt_steps, cfg.lr, BACKGROUND)
    after = sum(meshtex.mse_loss(render_asset(fitted, c).color, t, m) for c, t, m in views)
    history.extend([before, after])
    return fitted


def _finite(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _view_dir(root: Path, azimuth: float) -> Path:
    name = str(int(azimuth)) if float(azimuth).is_integer() else f"{azimuth:g}"
    return root / "views" / name


def _write_view(root: Path, rec: ViewRecord) -> None:
    d = _view_dir(root, rec.azimuth)
    d.mkdir(parents=True, exist_ok=True)
    save_png(d / "coarse.png", rec.coarse.color)
    save_pfm(d / "depth.pfm", rec.coarse.depth)
    save_png(d / "occlusion.png", rec.occlusion.astype(np.float64))
    vis = rec.visibility if rec.visibility is not None else np.ones((1, 1))
    save_png(d / "visibility.png", vis)
    save_png(d / "fine.png", rec.fine)


def _write_summary(root: Path, payload: dict) -> None:
    (root / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def run(config: PipelineConfig, coarse, reference=None, out_dir=None) -> RunResult:
    """Schedule, repaint every view, then refine the texture (or Gaussian
    colours) against all repainted images.  With ``out_dir`` the run
    directory is written as views complete; on failure whatever finished is
    kept and ``run.json`` records the error."""
    root = Path(out_dir) if out_dir is not None else None
    sched = build_schedule(config.interval, config.elevation)
    if config.max_views is not None:
        sched = sched.truncated(config.max_views)
    summary = {"config": asdict(config), "schedule": [[a, list(n)] for a, n in sched], "views": {}}
    if root is not None:
        root.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1, user_api="blas"):
        state = prepare(config, coarse, reference)
        if not config.incremental:
            todo = [a for a in sched.azimuths if a not in state.coarse_cache]
            for a, g in zip(todo, _map(state, lambda a: render_asset(state.asset, state.camera(a)), todo)):
                state.coarse_cache[a] = g
        history: list = []
        try:
            for azimuth, neighbors in sched:
                try:
                    rec = refine_view(state, azimuth, neighbors)
                except Exception as exc:
                    tagged = _with_view(exc, azimuth)
                    if tagged is exc:
                        raise
                    raise tagged from exc
                summary["views"][_key(azimuth)] = dict(rec.metrics)
                if root is not None:
                    _write_view(root, rec)
                if config.incremental:
                    history = []
                    state.asset = _fit(state, history)
                    state.coarse_cache.clear()
            if not config.incremental:
                state.asset = _fit(state, history)
        except Exception as exc:
            if root is not None:
                summary["status"] = "failed"
                summary["error"] = str(exc)
                _write_summary(root, summary)
            raise

        masks = ownership_masks(state)
        recs = list(state.views.values())
        finals = _map(state, lambda r: render_asset(state.asset, r.camera).color, recs)
    for rec, img in zip(recs, finals):
        m = masks[rec.azimuth]
        value = psnr(img, rec.fine, m) if m.any() else float("inf")
        rec.metrics["masked_psnr"] = value
        rec.metrics["mask_pixels"] = int(m.sum())
        summary["views"][_key(rec.azimuth)] = {k: _finite(v) if isinstance(v, float) else v
                                               for k, v in rec.metrics.items()}
    summary["mse_before"] = history[0] if history else None
    summary["mse_after"] = history[-1] if history else None
    summary["mse_history"] = [float(v) for v in history]
    summary["status"] = "ok"
    if root is not None:
        if isinstance(state.asset, TexturedMesh):
            (root / "mesh").mkdir(exist_ok=True)
            save_mesh(root / "mesh" / "refined.obj", state.asset, texture_name="texture.png")
        else:
            (root / "gaussians").mkdir(exist_ok=True)
            save_gaussians(root / "gaussians" / "refined.ply", state.asset)
        _write_summary(root, summary)
    return RunResult(state.asset, state.views, summary)


def _key(azimuth: float) -> str:
    return str(int(azimuth)) if float(azimuth).is_integer() else f"{azimuth:g}"


def _with_view(exc: Exception, azimuth: float) -> Exception:
    try:
        return type(exc)(f"view {_key(azimuth)}: {exc}")
    except Exception:
        return exc
