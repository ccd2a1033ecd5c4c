"""
Critical voxels and the alignment loss
======================================

The detect phase scores every voxel twice: once by geometric density
(occupancy logit plus foreground logit) and once by semantic confidence (the
largest class logit). The top-k voxels of each score are refined, and the
two score distributions are pulled together with a symmetric KL.
"""

import numpy as np

from hd2ssc import diffcore as dc
from hd2ssc import hor

rng = np.random.default_rng(1)
grid = (8, 8, 4)
m_of = rng.normal(size=grid)
m_fb = rng.normal(size=grid)
logits = rng.normal(size=(5,) + grid)

maps = hor.ScoreMaps(dc.Tensor(m_of), dc.Tensor(m_fb))
y = hor.SemLogits(dc.Tensor(logits))

v_geo = hor.geometric_critical(maps, 6)
v_sem = hor.semantic_critical(y, 6)
print("geometric:", v_geo.indices, np.round(v_geo.scores, 2))
print("semantic: ", v_sem.indices, np.round(v_sem.scores, 2))
print("union size:", np.union1d(v_geo.indices, v_sem.indices).size)

###############################################################################
# Ties go to the lowest linear index, so a flat field selects 0, 1, 2, ...

flat = hor.ScoreMaps(dc.Tensor(np.zeros(grid)), dc.Tensor(np.zeros(grid)))
print("flat field picks:", hor.geometric_critical(flat, 4).indices)

###############################################################################
# The alignment loss is zero when the two score fields agree up to a shift,
# and grows as they disagree.

for mix in (1.0, 0.5, 0.0):
    sem = mix * (m_of + m_fb) + (1 - mix) * logits.max(axis=0)
    loss = hor.critical_alignment_loss(maps, hor.SemLogits(dc.Tensor(sem[None] + 3.0)))
    print("agreement %.1f -> symmetric KL %.4f" % (mix, loss.item()))

###############################################################################
# With the refinement output layer at zero (its initial state), refinement is
# the identity. Random weights change only the critical voxels.

mlp = hor.RefineMLP(3, 8, 5, rng)
feats = rng.normal(size=(3,) + grid)
same = hor.refine(y, feats, v_geo, v_sem, mlp, maps)
print("identity at init:", np.array_equal(same.logits.data, logits))
mlp.w2.data = rng.normal(size=mlp.w2.shape)
moved = hor.refine(y, feats, v_geo, v_sem, mlp, maps).logits.data != logits
print("voxels changed:", np.flatnonzero(moved.any(axis=0).reshape(-1)))
