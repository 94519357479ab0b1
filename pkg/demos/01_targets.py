"""
Ground-truth targets from point annotations
============================================

Density map, low-resolution maps for the auxiliary heads, and the
proximity map, all built from one synthetic image.
"""

import numpy as np

from cfcrn.synthetic import SyntheticSpec, generate_synthetic
from cfcrn.targets import KernelSpec, ProximitySpec, density_map, make_lrgt, proximity_map

# one 128x128 image with a few dozen cells
item = generate_synthetic(SyntheticSpec(n_images=1, dims=(128, 128), count_range=(30, 40), seed=0))[0]
print("annotated cells:", item.centroids.count)

# each cell deposits a unit-mass Gaussian, so the map integrates to the count
y = density_map(item.centroids, KernelSpec(sigma=3.0, half_width=10))
print("density sum:", round(y.sum(), 6))

# the aux heads regress sum-pooled copies at 1/8, 1/4 and 1/2 resolution
for m in make_lrgt(y):
    print("LR map", m.shape, "sum", round(m.sum(), 6))

# proximity map: 1 on a centroid, decaying to 0 at distance d
pm = proximity_map(item.centroids, ProximitySpec(decay_alpha=3.0, d=15.0))
x, c = item.centroids.points[0]
print("proximity at first centroid:", pm[x, c], " fraction of zero pixels:", np.mean(pm == 0).round(3))
