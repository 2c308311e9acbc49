"""Occlusion and visibility maps for a sphere seen from 0 and then 40 / 90 degrees.

Writes PNGs to ``demo_out/`` (or the directory given as the first argument).

    python demos/occlusion_visibility.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from repaint3d import binarize, default_tau, occlusion_mask, orbit_camera, save_png, visibility_map
from repaint3d.fixtures import sphere_gbuffer

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(parents=True, exist_ok=True)
tau = default_tau(1.0)

ref_cam = orbit_camera(0.0, width=256)
ref = sphere_gbuffer(ref_cam)

for az in (40.0, 90.0):
    cam = orbit_camera(az, width=256)
    novel = sphere_gbuffer(cam)
    occ = occlusion_mask((ref_cam, ref.depth), (cam, novel.depth), tau)
    vis = visibility_map((cam, novel), [(ref_cam, ref)], occ, tau, size=64)
    save_png(out / f"occlusion_{int(az)}.png", occ.astype(float))
    save_png(out / f"visibility_{int(az)}.png", vis)
    print(f"{az:>4.0f} deg: {occ.sum() / novel.foreground.sum():.1%} of the sphere unseen from 0 deg, "
          f"mean V {vis.mean():.3f}")

    # repaint share as denoising runs from t = T to the last blend at t = 33
    for t in (1000, 500, 100, 33):
        region = ~binarize(vis, t, 1000)
        print(f"       t={t:4d}: repaint {region.mean():.1%} of latent texels")

print(f"images in {out}/")
