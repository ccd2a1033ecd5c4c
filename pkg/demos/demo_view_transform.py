"""
Lifting image features into a voxel grid
========================================

A forward-looking pinhole camera sits just behind a 32x32x8 grid of 0.4 m
voxels. Every voxel centroid is projected into the image, and the voxels that
land inside it pick up a bilinearly sampled feature. Voxels outside the
view stay at zero.
"""

import numpy as np

from hd2ssc.dataio import ModelConfig, generate_synthetic
from hd2ssc.geometry import project_voxels, sample_image_features

cfg = ModelConfig()
scene = generate_synthetic(seed=3, count=1, spec=cfg.grid, image_size=cfg.image_size)[0]
print("camera centre (world):", np.round(scene.camera.center(), 2))

###############################################################################
# Project every centroid. ``valid`` marks voxels in front of the camera and
# inside the image bounds.

proj = project_voxels(cfg.grid, scene.camera, cfg.image_size)
print("voxels in view: %d of %d" % (proj.valid.sum(), proj.valid.size))
print("depth range of visible voxels: %.1f .. %.1f m"
      % (proj.depth[proj.valid].min(), proj.depth[proj.valid].max()))

###############################################################################
# Sample the rendered image itself as a 3-channel "feature map". Voxels on
# one camera ray would all receive the same colour, which is why the model
# also gets per-voxel position channels to tell near from far. Below, one
# vertical column of voxels: road at the bottom, then the colours of
# whatever lies behind it at each height.

lifted = sample_image_features(scene.image, proj).data
i, j = 10, 16
print("colour sampled in the voxel column (%d, %d):" % (i, j))
for k in range(cfg.grid.dims[2]):
    print("  z=%d  label=%d  rgb=%s" % (k, scene.gt.labels[i, j, k], np.round(lifted[:, i, j, k], 2)))

###############################################################################
# The ground-truth grid itself: class histogram over voxels that are valid.

valid = scene.gt.effective_valid()
names = ["empty", "road", "building", "car", "person", "vegetation"]
counts = np.bincount(scene.gt.labels[valid], minlength=len(names))
for name, c in zip(names, counts):
    print("%-10s %5d" % (name, c))
