"""High-dimension semantic decoupling.

A 2D feature map is lifted into ``d_exp`` pseudo slices by a 1x1 projection,
pixel queries attend over all slices, the attended queries are clustered with
density peaks (kNN density), and each slice is reweighted per location by its
best cosine match against the cluster centroids before being summed back.
"""
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .errors import NumericDomainError, ShapeError

COS_EPS = 1e-12


class ExpansionLayer:
    """1x1 projection from C to d_exp * C channels."""

    def __init__(self, c2d, d_exp, rng, prefix="hsd.de"):
        if d_exp < 1:
            raise ValueError(f"d_exp must be >= 1, got {d_exp}")
        self.c2d = c2d
        self.d_exp = d_exp
        self.weight = dc.uniform_init(rng, (d_exp * c2d, c2d), c2d, f"{prefix}.weight")
        self.bias = dc.uniform_init(rng, (d_exp * c2d,), c2d, f"{prefix}.bias")

    def parameters(self):
        return [self.weight, self.bias]


class PixelQuerySet:
    def __init__(self, n_query, c2d, rng, name="hsd.pixel_queries"):
        self.queries = dc.uniform_init(rng, (n_query, c2d), c2d, name)

    def parameters(self):
        return [self.queries]


@dataclass
class PseudoVolume:
    slices: dc.Tensor  # (d_exp, C, h, w)

    @property
    def d_exp(self):
        return self.slices.shape[0]


@dataclass
class ClusterSet:
    centroids: dc.Tensor          # (d_exp, C)
    assignment: np.ndarray        # (N,) cluster index per point
    centers: np.ndarray           # (d_exp,) point index chosen as each cluster's seed
    rho: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray = field(default=None)

    def kmeans_objective(self, points):
        """Within-cluster sum of squares, reported as a diagnostic."""
        pts = points.data if isinstance(points, dc.Tensor) else np.asarray(points)
        c = self.centroids.data[self.assignment]
        return float(((pts - c) ** 2).sum())


def dim_expand(f_cam, layer):
    f_cam = dc.as_tensor(f_cam)
    C, h, w = f_cam.shape
    if C != layer.c2d:
        raise ShapeError(f"dim_expand: input has {C} channels, layer expects {layer.c2d}")
    flat = dc.reshape(f_cam, (C, h * w))
    out = dc.matmul(layer.weight, flat) + dc.reshape(layer.bias, (-1, 1))
    return PseudoVolume(dc.reshape(out, (layer.d_exp, C, h, w)))


def orthogonal_loss(layer, lam=0.01):
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    W = layer.weight
    sq = dc.tsum(W * W, axis=1, keepdims=True)
    if np.any(sq.data == 0):
        raise NumericDomainError("orthogonal_loss: W_DE has a zero row")
    Wn = W / dc.sqrt(sq)
    gram = dc.matmul(Wn, dc.transpose(Wn))
    return dc.mean(dc.tabs(gram - np.eye(gram.shape[0]))) * lam


def collect_global_semantics(queries, volume):
    s = volume.slices
    d, C, h, w = s.shape
    if d * h * w == 0:
        raise ShapeError("collect_global_semantics: empty pseudo volume")
    feats = dc.transpose(dc.reshape(s, (d, C, h * w)), (0, 2, 1))
    feats = dc.reshape(feats, (d * h * w, C))
    return dc.scaled_dot_attention(queries.queries, feats, feats)


def _pairwise_distances(x):
    sq = (x * x).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    np.fill_diagonal(d2, 0.0)
    return np.sqrt(d2)


def dpc_knn_cluster(points, d_exp, k_nn=5):
    """Density-peaks clustering with kNN density.

    Density is exp(-mean squared distance to the k nearest neighbours). Ties
    in density, distance and gamma all resolve toward the lowest index: a
    point counts as denser than another of equal density when its index is
    lower. Each seed keeps its own cluster; every other point inherits the
    label of its nearest denser neighbour, processed from densest down.
    Centroids are the member means, so gradients flow through them back into
    ``points``; the discrete assignment is a constant of the forward pass.
    """
    points = dc.as_tensor(points)
    x = points.data
    n = x.shape[0]
    if not 1 <= d_exp <= n:
        raise ValueError(f"need 1 <= d_exp <= N (got d_exp={d_exp}, N={n})")
    k_nn = min(k_nn, n - 1)
    dist = _pairwise_distances(x)
    if k_nn >= 1:
        nn = np.sort(dist + np.diag(np.full(n, np.inf)), axis=1, kind="stable")[:, :k_nn]
        rho = np.exp(-(nn ** 2).mean(axis=1))
    else:
        rho = np.ones(n)
    # density rank: higher rho first, then lower index
    order = np.lexsort((np.arange(n), -rho))
    rank = np.empty(n, dtype=np.intp)
    rank[order] = np.arange(n)
    delta = np.empty(n)
    parent = np.full(n, -1, dtype=np.intp)
    max_dist = dist.max()
    for pos, i in enumerate(order):
        if pos == 0:
            delta[i] = max_dist
            continue
        denser = order[:pos]
        dj = dist[i, denser]
        best = np.flatnonzero(dj == dj.min())
        j = denser[best].min()
        parent[i] = j
        delta[i] = dist[i, j]
    gamma = rho * delta
    centers = np.lexsort((np.arange(n), -gamma))[:d_exp]
    label = np.full(n, -1, dtype=np.intp)
    label[centers] = np.arange(d_exp)
    for i in order:
        if label[i] >= 0:
            continue
        if parent[i] >= 0:
            label[i] = label[parent[i]]
        else:
            # global peak not chosen as a seed: attach to the nearest seed
            dc_ = dist[i, centers]
            label[i] = np.flatnonzero(dc_ == dc_.min()).min()
    member = np.zeros((d_exp, n))
    member[label, np.arange(n)] = 1.0
    member /= member.sum(axis=1, keepdims=True)
    centroids = dc.matmul(member, points)
    return ClusterSet(centroids=centroids, assignment=label, centers=centers,
                      rho=rho, delta=delta, gamma=gamma)


def _unit_rows(t, axis):
    sq = dc.tsum(t * t, axis=axis, keepdims=True)
    return t / dc.sqrt(dc.clip(sq, COS_EPS ** 2, np.inf))


def decoupling_loss(clusters):
    c = clusters.centroids
    if np.any(np.all(c.data == 0, axis=1)):
        raise NumericDomainError("decoupling_loss: zero centroid")
    u = _unit_rows(c, axis=1)
    cos = dc.matmul(u, dc.transpose(u))
    iu = np.triu_indices(c.shape[0], k=1)
    if iu[0].size == 0:
        return dc.Tensor(0.0) * dc.tsum(c) if c.requires_grad else dc.Tensor(0.0)
    return dc.tsum(cos[iu])


def slice_weights(volume, clusters, slice_level=False):
    """Per-slice, per-location weight max_j cos(F_i(:, h, w), c_j).

    With ``slice_level`` the location cosines are averaged over the map
    before the max, giving one scalar per slice. Returns (d_exp, h, w).
    """
    s = volume.slices
    d, C, h, w = s.shape
    if clusters.centroids.shape[1] != C:
        raise ShapeError("centroid width does not match slice channels")
    f = dc.reshape(dc.transpose(s, (0, 2, 3, 1)), (d * h * w, C))
    fu = _unit_rows(f, axis=1)
    cu = _unit_rows(clusters.centroids, axis=1)
    cos = dc.reshape(dc.matmul(fu, dc.transpose(cu)), (d, h * w, -1))
    if slice_level:
        best = dc.tmax(dc.mean(cos, axis=1), axis=1)
        return dc.reshape(best, (d, 1, 1)) * np.ones((1, h, w))
    return dc.reshape(dc.tmax(cos, axis=2), (d, h, w))


def semantic_aggregate(volume, clusters, slice_level=False):
    s = volume.slices
    d, C, h, w = s.shape
    wts = slice_weights(volume, clusters, slice_level)
    weighted = s * dc.reshape(wts, (d, 1, h, w))
    return dc.tsum(weighted, axis=0)
