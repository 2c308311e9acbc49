"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fixtures
from .assets import load_gaussians, load_mesh, load_pfm, load_png, save_gaussians, save_mesh, save_pfm, save_png
from .config import dump_run_config, load_run_config
from .diffusion import Conditioning, Latent, NoiseSchedule, invert_trajectory, repaint_denoise, toy_denoiser_build
from .errors import DataError, NumericalError
from .geometry import orbit_camera
from .meshtex import refine_texture
from .metrics import mse, psnr
from .pipeline import PipelineConfig, decode, encode, prompt_embedding, render_asset, run
from .visibility import binarize, default_tau, occlusion_mask, visibility_map

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("repaint3d")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _globals(parser, suppress: bool):
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(None), help="random seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=d(None), help="worker threads for per-view work")
    parser.add_argument("--config", type=Path, default=d(None), help="JSON run configuration")


def _asset_args(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--mesh", type=Path, help="OBJ mesh with MTL/PNG texture")
    g.add_argument("--gaussians", type=Path, help="Gaussian splatting PLY")
    g.add_argument("--fixture", choices=["sphere", "cube"], help="procedural asset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="repaint3d", description="Visibility-aware progressive texture repainting toolkit.")
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    common = _Parser(add_help=False)
    _globals(common, suppress=True)

    def add(name, help_):
        return sub.add_parser(name, help=help_, parents=[common])

    p = add("render", "render an asset from an orbit camera")
    _asset_args(p)
    p.add_argument("--azimuth", type=float, default=0.0)
    p.add_argument("--out", type=Path, required=True, help="colour PNG")
    p.add_argument("--depth", type=Path, help="depth PFM")

    p = add("occlusion", "occlusion mask of a novel view against a reference view")
    _asset_args(p)
    p.add_argument("--ref-depth", type=Path, help="reference depth PFM (instead of rendering)")
    p.add_argument("--novel-depth", type=Path, help="novel depth PFM (instead of rendering)")
    p.add_argument("--ref", type=float, default=0.0, help="reference azimuth")
    p.add_argument("--novel", type=float, required=True, help="novel azimuth")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", type=Path, required=True)

    p = add("visibility", "pooled visibility map of a novel view")
    _asset_args(p)
    p.add_argument("--novel", type=float, required=True)
    p.add_argument("--prev", type=float, nargs="+", required=True, help="azimuths of earlier views")
    p.add_argument("--tau", type=float)
    p.add_argument("--out", type=Path, required=True, help="visibility PNG")
    p.add_argument("--values", type=Path, help="visibility PFM")

    p = add("invert", "DDIM-invert an image with the toy denoiser")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True, help="final latent as PFM")
    p.add_argument("--dump-trajectory", type=Path, help="all latents as a multi-frame PFM")

    p = add("repaint", "invert an image and repaint it under a visibility map")
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--visibility", type=Path, required=True, help="PNG or PFM at latent resolution")
    p.add_argument("--reference", type=Path, help="reference image for K/V injection")
    p.add_argument("--steps", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dump-trajectory", type=Path)

    p = add("refine", "fit a mesh texture to target images")
    p.add_argument("--mesh", type=Path, required=True)
    p.add_argument("--view", action="append", required=True, metavar="AZ=TARGET[,MASK]",
                   help="azimuth, target PNG and optional mask PNG; repeatable")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", type=Path, required=True)

    p = add("pipeline", "full progressive refinement run from --config")
    p.add_argument("--out", type=Path, help="run directory (overrides the config)")

    p = add("metrics", "PSNR and MSE between two images")
    p.add_argument("a", type=Path)
    p.add_argument("b", type=Path)
    p.add_argument("--mask", type=Path)

    p = add("make-fixture", "write a procedural asset or a ready-to-run scene")
    p.add_argument("--kind", choices=["sphere", "cube", "gaussians", "scene"], required=True)
    p.add_argument("--out", type=Path, required=True, help="OBJ, PLY or (for scene) a directory")
    return parser


def _pipeline_config(args) -> tuple[PipelineConfig, object]:
    run_cfg = load_run_config(args.config) if args.config else None
    cfg = run_cfg.pipeline if run_cfg else PipelineConfig()
    over = {k: getattr(args, k) for k in ("seed", "threads") if getattr(args, k, None) is not None}
    try:
        return replace(cfg, **over), run_cfg
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_asset(args, run_cfg=None):
    mesh = getattr(args, "mesh", None) or (run_cfg.mesh if run_cfg else None)
    gaussians = getattr(args, "gaussians", None) or (run_cfg.gaussians if run_cfg else None)
    fixture = getattr(args, "fixture", None) or (run_cfg.fixture if run_cfg else None)
    if mesh:
        return load_mesh(mesh)
    if gaussians:
        return load_gaussians(gaussians)
    if fixture == "cube":
        return fixtures.cube()
    if fixture == "sphere":
        return fixtures.uv_sphere()
    raise UsageError("no asset given (use --mesh, --gaussians or --fixture)")


def _camera(cfg: PipelineConfig, azimuth: float):
    return orbit_camera(azimuth, cfg.elevation, cfg.camera_distance, cfg.fov, cfg.resolution)


def _cmd_render(args):
    cfg, run_cfg = _pipeline_config(args)
    gbuf = render_asset(_load_asset(args, run_cfg), _camera(cfg, args.azimuth))
    save_png(args.out, gbuf.color)
    if args.depth:
        save_pfm(args.depth, gbuf.depth)


def _cmd_occlusion(args):
    cfg, run_cfg = _pipeline_config(args)
    ref_cam, novel_cam = _camera(cfg, args.ref), _camera(cfg, args.novel)
    if bool(args.ref_depth) != bool(args.novel_depth):
        raise UsageError("--ref-depth and --novel-depth must be given together")
    if args.ref_depth:
        ref_depth, novel_depth = load_pfm(args.ref_depth), load_pfm(args.novel_depth)
        for path, d in ((args.ref_depth, ref_depth), (args.novel_depth, novel_depth)):
            if d.shape != ref_cam.shape:
                raise DataError(f"{path}: depth is {d.shape[1]}x{d.shape[0]}, camera is "
                                f"{ref_cam.width}x{ref_cam.height} (set resolution in --config)")
        tau = args.tau if args.tau is not None else cfg.tau
        if tau is None:
            raise UsageError("--tau is required with depth inputs")
    else:
        asset = _load_asset(args, run_cfg)
        ref = render_asset(asset, ref_cam)
        ref_depth = ref.depth
        novel_depth = render_asset(asset, novel_cam).depth
        tau = args.tau if args.tau is not None else (cfg.tau or default_tau(asset.bounding_radius()))
    mask = occlusion_mask((ref_cam, ref_depth), (novel_cam, novel_depth), tau)
    save_png(args.out, mask.astype(np.float64))
    fg = np.isfinite(novel_depth)
    print(json.dumps({"occluded_pixels": int(mask.sum()), "foreground_pixels": int(fg.sum())}))


def _cmd_visibility(args):
    cfg, run_cfg = _pipeline_config(args)
    asset = _load_asset(args, run_cfg)
    tau = args.tau if args.tau is not None else (cfg.tau or default_tau(asset.bounding_radius()))
    novel_cam = _camera(cfg, args.novel)
    novel = render_asset(asset, novel_cam)
    prev = [(c, render_asset(asset, c)) for c in (_camera(cfg, a) for a in args.prev)]
    occ = None
    for cam, g in prev:
        m = occlusion_mask((cam, g.depth), (novel_cam, novel.depth), tau)
        occ = m if occ is None else occ & m
    vis = visibility_map((novel_cam, novel), prev, occ, tau, size=cfg.latent_size)
    save_png(args.out, vis)
    if args.values:
        save_pfm(args.values, vis)
    print(json.dumps({"mean_visibility": float(vis.mean()), "occluded_texels": int((vis == 0).sum())}))


def _diffusion_setup(cfg: PipelineConfig, steps):
    sched = NoiseSchedule.scaled_linear(cfg.timesteps, steps if steps is not None else cfg.inversion_steps)
    return sched, toy_denoiser_build(cfg.seed, guidance=cfg.guidance)


def _image_latent(path, cfg: PipelineConfig):
    img = load_png(path)
    if img.shape[0] != img.shape[1] or img.shape[0] % cfg.latent_size:
        raise DataError(f"{path}: image must be square with a side divisible by {cfg.latent_size}")
    return img, encode(img, cfg.latent_size)


def _cmd_invert(args):
    cfg, _ = _pipeline_config(args)
    sched, den = _diffusion_setup(cfg, args.steps)
    _, x0 = _image_latent(args.image, cfg)
    traj = invert_trajectory(Latent(x0, 0), den, Conditioning(), sched)
    save_pfm(args.out, traj[-1].data)
    if args.dump_trajectory:
        save_pfm(args.dump_trajectory, [lat.data for lat in traj])


def _load_visibility(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        v = load_pfm(path)
    else:
        v = load_png(path, mode="L")
    if v.ndim != 2:
        raise DataError(f"{path}: visibility must be single-channel")
    return np.clip(v, 0.0, 1.0)


def _cmd_repaint(args):
    cfg, _ = _pipeline_config(args)
    sched, den = _diffusion_setup(cfg, args.steps)
    img, x0 = _image_latent(args.image, cfg)
    vis = _load_visibility(args.visibility)
    if vis.shape != x0.shape[:2]:
        raise DataError(f"{args.visibility}: visibility {vis.shape} does not match latent {x0.shape[:2]}")
    prompt = feats = None
    if args.reference:
        ref_img, ref_lat = _image_latent(args.reference, cfg)
        prompt = prompt_embedding(ref_img, cfg.seed)
        ref_cond = Conditioning(prompt_embedding=prompt)
        ref_traj = invert_trajectory(Latent(ref_lat, 0), den, ref_cond, sched)
        mid = min(ref_traj, key=lambda lat: abs(lat.t - sched.T / 2))
        feats = den.capture(mid.data, mid.t, ref_cond)
    cond = Conditioning(prompt_embedding=prompt)
    inv = invert_trajectory(Latent(x0, 0), den, cond, sched)
    out = repaint_denoise(inv[-1], inv, den, replace(cond, reference_features=feats), vis, sched)
    repaint = ~binarize(vis, sched.step_indices[1], sched.T)
    fine = decode(img, x0, out.data, repaint, np.ones(img.shape[:2], dtype=bool))
    save_png(args.out, fine)
    if args.dump_trajectory:
        save_pfm(args.dump_trajectory, [lat.data for lat in inv])


def _parse_view(item: str):
    if "=" not in item:
        raise UsageError(f"--view expects AZ=TARGET[,MASK], got {item!r}")
    az, rest = item.split("=", 1)
    paths = rest.split(",")
    if len(paths) > 2:
        raise UsageError(f"--view expects AZ=TARGET[,MASK], got {item!r}")
    try:
        return float(az), Path(paths[0]), Path(paths[1]) if len(paths) == 2 else None
    except ValueError:
        raise UsageError(f"bad azimuth in --view {item!r}") from None


def _cmd_refine(args):
    cfg, _ = _pipeline_config(args)
    mesh = load_mesh(args.mesh)
    views = []
    for item in args.view:
        az, target, mask = _parse_view(item)
        cam = _camera(cfg, az)
        img = load_png(target)
        if img.shape[:2] != cam.shape:
            raise DataError(f"{target}: expected a {cam.shape} image")
        m = load_png(mask, mode="L") > 0.5 if mask else np.isfinite(render_asset(mesh, cam).depth)
        views.append((cam, img, m))
    history = []
    steps = args.steps if args.steps is not None else cfg.opt_steps
    lr = args.lr if args.lr is not None else cfg.lr
    refined = refine_texture(mesh, views, steps, lr, history=history)
    save_mesh(args.out, refined)
    print(json.dumps({"mse_before": history[0], "mse_after": history[-1]}))


def _cmd_pipeline(args):
    if not args.config:
        raise UsageError("pipeline needs --config")
    cfg, run_cfg = _pipeline_config(args)
    out = args.out or run_cfg.output
    if out is None:
        raise UsageError("no output directory (set 'output' in the config or pass --out)")
    asset = _load_asset(args, run_cfg)
    reference = load_png(run_cfg.reference) if run_cfg.reference else None
    result = run(cfg, asset, reference, out_dir=out)
    views = result.metrics["views"]
    print(json.dumps({"views": len(views), "mse_before": result.metrics["mse_before"],
                      "mse_after": result.metrics["mse_after"], "output": str(out)}))


def _cmd_metrics(args):
    a, b = load_png(args.a), load_png(args.b)
    mask = load_png(args.mask, mode="L") > 0.5 if args.mask else None
    try:
        value = psnr(a, b, mask)
        err = mse(a, b, mask)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(json.dumps({"psnr": value if np.isfinite(value) else "inf", "mse": err}))


def _cmd_make_fixture(args):
    kind, out = args.kind, args.out
    seed = args.seed if getattr(args, "seed", None) is not None else 0
    if kind == "sphere":
        save_mesh(out, fixtures.uv_sphere(texture=fixtures.pattern_texture(seed=seed)))
    elif kind == "cube":
        save_mesh(out, fixtures.cube())
    elif kind == "gaussians":
        save_gaussians(out, fixtures.gaussian_sphere(seed=seed))
    else:
        out.mkdir(parents=True, exist_ok=True)
        coarse, reference, _ = fixtures.sphere_scene(seed=seed)
        save_mesh(out / "coarse.obj", coarse)
        save_png(out / "reference.png", reference)
        from .config import RunConfig
        cfg = RunConfig(PipelineConfig(seed=seed), mesh=Path("coarse.obj"), reference=Path("reference.png"),
                        output=Path("run"))
        (out / "run.json").write_text(json.dumps(dump_run_config(cfg), indent=2, sort_keys=True) + "\n")


OUTPUTS = ("out", "depth", "values", "dump_trajectory")

COMMANDS = {
    "render": _cmd_render,
    "occlusion": _cmd_occlusion,
    "visibility": _cmd_visibility,
    "invert": _cmd_invert,
    "repaint": _cmd_repaint,
    "refine": _cmd_refine,
    "pipeline": _cmd_pipeline,
    "metrics": _cmd_metrics,
    "make-fixture": _cmd_make_fixture,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        for key in OUTPUTS:
            path = getattr(args, key, None)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
