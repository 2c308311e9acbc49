"""End-to-end run on a synthetic sphere: a blurred, noisy texture is refined
view by view from a sharp reference image at 0 degrees.

    python demos/sphere_refinement.py [out_dir]

Takes about half a minute at the default 256 px / 64 latent scale.
"""

import sys
import time
from pathlib import Path

import numpy as np

from repaint3d import PipelineConfig, orbit_camera, psnr, rasterize, run
from repaint3d.fixtures import sphere_scene

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_run")
coarse, reference, target = sphere_scene()
config = PipelineConfig(interval=40.0)

start = time.perf_counter()
result = run(config, coarse, reference, out)
print(f"{len(result.views)} views in {time.perf_counter() - start:.0f}s, run directory {out}/")

print(" azimuth  repainted  masked PSNR vs repainted target")
for az, rec in result.views.items():
    print(f"  {az:6.0f}   {rec.metrics['repaint_fraction']:7.1%}    {rec.metrics['masked_psnr']:.1f} dB")
print(f"masked MSE {result.metrics['mse_before']:.4f} -> {result.metrics['mse_after']:.2e}")

# Pixels of the reference view whose texels a later view sees more squarely
# belong to that view, and its repainted colours win there.  With the toy
# denoiser those colours are not meant to look like the reference, so the
# full-foreground score drops while the pixels view 0 supervises match it.
cam = orbit_camera(0.0)
fg = rasterize(target, cam).foreground
owned = result.views[0.0].metrics["mask_pixels"]
refined = rasterize(result.asset, cam).color
print(f"reference view, full foreground: coarse {psnr(rasterize(coarse, cam).color, reference, fg):.1f} dB, "
      f"refined {psnr(refined, reference, fg):.1f} dB")
print(f"reference view supervises {owned} of {int(fg.sum())} foreground pixels")
print(f"texture changed on {np.mean(np.any(result.asset.texture != coarse.texture, axis=-1)):.0%} of texels")
