"""Recover texel maps from images rendered by known maps.

A bumped patch is deformed and seen by two cameras. Targets come from known
maps; optimisation starts from a noisy copy and runs Adam through the blended
lift and the splatting renderer.

    python examples_scripts/recovery_fit.py [iterations]
"""

import sys
import time

from texrig import FitConfig, perturb, psnr
from texrig.fit import fit, render_frames
from texrig.fixtures import recovery_scene

iterations = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
rest, frames, scene, truth = recovery_scene(texels=16, image_size=64, seed=0)
start = perturb(truth, 0.05, seed=1)
targets = [fr.target for fr in scene.frames]


def report(label, maps):
    values = [psnr(img, t) for img, t in zip(render_frames(maps, scene), targets)]
    print(f"{label:<8} PSNR " + " / ".join(f"{v:.1f} dB" for v in values))


def progress(it, res):
    if it % 250 == 0:
        print(f"  iteration {it:5d}  loss {res.total:.6f}")


report("start", start)
t0 = time.perf_counter()
fitted, trace = fit(FitConfig(rest, frames, iterations=iterations), start, scene, progress)
print(f"{iterations} iterations in {time.perf_counter() - t0:.0f}s")
report("fitted", fitted)
