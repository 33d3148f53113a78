"""Bend a two-triangle strip and measure how far Gaussians split apart at the crease.

Each texel next to the shared edge is paired with its neighbour across it.
The naive lift moves the two with different face frames, so a probe offset
off the surface opens a gap. The blended lift mixes neighbouring texels'
affine results and shrinks that gap.

    python examples_scripts/seam_comparison.py
"""

from texrig import compare_seams
from texrig.fixtures import bent_strip

print(f"{'angle':>6}  {'naive max':>10}  {'blended max':>11}  {'blended mean':>12}")
for angle in (0, 10, 30, 60, 90):
    rest, bent = bent_strip(angle)
    rows = compare_seams(rest, bent, 16, 16).summary()
    print(f"{angle:>6}  {rows['naive']['position_max']:10.4f}  "
          f"{rows['quasi_phong']['position_max']:11.4f}  {rows['quasi_phong']['position_mean']:12.4f}")
