"""
Density peaks clustering on pixel-query semantics
=================================================

Cluster centres are points that are both dense (small mean distance to their
k nearest neighbours) and far from any denser point. Every other point
follows its nearest denser neighbour down to a centre.
"""

import numpy as np

from hd2ssc import hsd

rng = np.random.default_rng(0)
centers = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
truth = np.repeat(np.arange(4), 8)
points = centers[truth] + rng.normal(0, 0.1, size=(32, 2))

cs = hsd.dpc_knn_cluster(points, d_exp=4, k_nn=5)

###############################################################################
# The decision graph: gamma = rho * delta picks the four centres.

order = np.argsort(-cs.gamma)
print(" idx    rho   delta   gamma")
for i in order[:6]:
    print("%4d %6.2f %7.3f %7.3f" % (i, cs.rho[i], cs.delta[i], cs.gamma[i]))
print("chosen centres:", cs.centers)

###############################################################################
# Each recovered cluster should coincide with one blob.

for c in range(4):
    members = np.flatnonzero(cs.assignment == c)
    print("cluster %d: %2d points, true blobs %s, centroid %s"
          % (c, members.size, np.unique(truth[members]), np.round(cs.centroids.data[c], 3)))

###############################################################################
# The decoupling loss is the mean pairwise cosine between centroids. It is
# lower when the centroids point in different directions.

print("decoupling loss: %.4f" % hsd.decoupling_loss(cs).item())
