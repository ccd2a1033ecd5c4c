"""High-density occupancy refinement: detect, select, align, refine.

Voxel queries attend over the flattened voxel features; the attended queries
are mean-pooled into a context vector g, and every head scores a voxel from
[f_v ; g]. The linear head is split as W_f f_v + (W_g g + b) so the context
term is computed once per grid.
"""
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError


class VoxelQuerySet:
    def __init__(self, n_query, c3d, rng, name="hor.voxel_queries"):
        if n_query < 1:
            raise ValueError("need at least one voxel query")
        self.queries = dc.uniform_init(rng, (n_query, c3d), c3d, name)

    def parameters(self):
        return [self.queries]


class LinearHead:
    """Per-voxel linear map over the concatenation [f_v ; g]."""

    def __init__(self, c3d, out, rng, prefix):
        self.c3d = c3d
        self.weight = dc.uniform_init(rng, (out, 2 * c3d), 2 * c3d, f"{prefix}.weight")
        self.bias = dc.uniform_init(rng, (out,), 2 * c3d, f"{prefix}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def __call__(self, flat_feats, context):
        w_f = self.weight[:, :self.c3d]
        w_g = self.weight[:, self.c3d:]
        const = dc.matmul(w_g, context) + self.bias
        return dc.matmul(w_f, flat_feats) + dc.reshape(const, (-1, 1))


class RefineMLP:
    """Two-layer MLP producing logit residuals; output layer starts at zero."""

    def __init__(self, c3d, hidden, num_classes, rng, prefix="hor.refine"):
        fan_in = c3d + 2
        self.w1 = dc.uniform_init(rng, (hidden, fan_in), fan_in, f"{prefix}.w1")
        self.b1 = dc.uniform_init(rng, (hidden,), fan_in, f"{prefix}.b1")
        self.w2 = dc.Parameter(np.zeros((num_classes, hidden)), f"{prefix}.w2")
        self.b2 = dc.Parameter(np.zeros(num_classes), f"{prefix}.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x):
        h = dc.relu(dc.matmul(self.w1, x) + dc.reshape(self.b1, (-1, 1)))
        return dc.matmul(self.w2, h) + dc.reshape(self.b2, (-1, 1))


@dataclass
class ScoreMaps:
    m_of: dc.Tensor   # (H, W, Z) occupied-vs-free logits
    m_fb: dc.Tensor   # (H, W, Z) foreground-vs-background logits

    def density(self):
        return self.m_of + self.m_fb


@dataclass
class SemLogits:
    logits: dc.Tensor  # (N+1, H, W, Z)

    @property
    def grid(self):
        return self.logits.shape[1:]

    @property
    def num_classes(self):
        return self.logits.shape[0]

    def labels(self):
        return np.argmax(self.logits.data, axis=0)


@dataclass
class CriticalSet:
    indices: np.ndarray
    scores: np.ndarray
    kind: str


def _flatten(f_voxel):
    C = f_voxel.shape[0]
    return dc.reshape(f_voxel, (C, -1))


def query_context(f_voxel, queries):
    f_voxel = dc.as_tensor(f_voxel)
    if f_voxel.shape[0] != queries.queries.shape[1]:
        raise ShapeError(f"voxel features have {f_voxel.shape[0]} channels, "
                         f"queries have width {queries.queries.shape[1]}")
    flat = _flatten(f_voxel)
    attended = dc.scaled_dot_attention(queries.queries, dc.transpose(flat), dc.transpose(flat))
    return dc.mean(attended, axis=0)


def binary_heads(f_voxel, queries, head, context=None):
    f_voxel = dc.as_tensor(f_voxel)
    if context is None:
        context = query_context(f_voxel, queries)
    grid = f_voxel.shape[1:]
    out = head(_flatten(f_voxel), context)
    return ScoreMaps(m_of=dc.reshape(out[0], grid), m_fb=dc.reshape(out[1], grid))


def classwise_head(f_voxel, queries, head, num_classes=None, context=None):
    f_voxel = dc.as_tensor(f_voxel)
    n_out = head.weight.shape[0]
    if num_classes is not None and num_classes != n_out:
        raise ShapeError(f"head produces {n_out} classes, {num_classes} requested")
    if n_out < 2:
        raise ConfigError("class-wise head needs at least two classes")
    if context is None:
        context = query_context(f_voxel, queries)
    out = head(_flatten(f_voxel), context)
    return SemLogits(dc.reshape(out, (n_out,) + tuple(f_voxel.shape[1:])))


def topk_indices(scores, k):
    """Indices of the k largest values, descending, ties to the lower index."""
    flat = np.asarray(scores, dtype=np.float64).reshape(-1)
    if k <= 0:
        raise ConfigError("k must be positive")
    if k > flat.size:
        raise ConfigError(f"k={k} exceeds the {flat.size} available voxels")
    if k < flat.size:
        # candidates: everything >= the k-th largest value
        kth = np.partition(flat, flat.size - k)[flat.size - k]
        cand = np.flatnonzero(flat >= kth)
    else:
        cand = np.arange(flat.size)
    order = np.lexsort((cand, -flat[cand]))[:k]
    return cand[order]


def geometric_critical(maps, k):
    score = maps.density().data
    idx = topk_indices(score, k)
    return CriticalSet(indices=idx, scores=score.reshape(-1)[idx], kind="geometric")


def semantic_confidence(y_init):
    return dc.tmax(y_init.logits, axis=0)


def semantic_critical(y_init, k):
    conf = y_init.logits.data.max(axis=0)
    idx = topk_indices(conf, k)
    return CriticalSet(indices=idx, scores=conf.reshape(-1)[idx], kind="semantic")


def critical_alignment_loss(maps, y_init, topk_only=None):
    """Symmetric KL between the geometric and semantic score distributions.

    By default both distributions are softmaxes over the whole grid. Passing
    an index array as ``topk_only`` restricts both softmaxes to that subset.
    """
    geo = dc.reshape(maps.density(), (-1,))
    sem = dc.reshape(semantic_confidence(y_init), (-1,))
    if geo.shape != sem.shape:
        raise ShapeError("score maps and class logits cover different grids")
    if topk_only is not None:
        geo = dc.gather(geo, topk_only, axis=0)
        sem = dc.gather(sem, topk_only, axis=0)
    p_geo = dc.softmax(geo, axis=0)
    p_sem = dc.softmax(sem, axis=0)
    return dc.kl_divergence(p_geo, p_sem) + dc.kl_divergence(p_sem, p_geo)


def refine(y_init, f_voxel, v_geo, v_sem, mlp, maps=None):
    """Add MLP residuals to the logits of the critical-voxel union.

    The MLP input per critical voxel is [f_v ; geometric score ; semantic
    confidence]. Voxels outside the union come back bit-identical.
    """
    n_cls = y_init.num_classes
    grid = y_init.grid
    nvox = int(np.prod(grid))
    idx = np.union1d(v_geo.indices, v_sem.indices)
    if idx.size and (idx.min() < 0 or idx.max() >= nvox):
        raise IndexError("critical voxel index out of range")
    flat_logits = dc.reshape(y_init.logits, (n_cls, nvox))
    if idx.size == 0:
        return y_init
    feats = dc.gather(_flatten(dc.as_tensor(f_voxel)), idx, axis=1)
    if maps is not None:
        geo = dc.gather(dc.reshape(maps.density(), (-1,)), idx, axis=0)
    else:
        geo = dc.Tensor(np.zeros(idx.size))
    conf = dc.gather(dc.reshape(semantic_confidence(y_init), (-1,)), idx, axis=0)
    x = dc.concat([feats, dc.reshape(geo, (1, -1)), dc.reshape(conf, (1, -1))], axis=0)
    resid = mlp(x)
    out = dc.scatter_add(flat_logits, idx, resid, axis=1)
    return SemLogits(dc.reshape(out, (n_cls,) + tuple(grid)))
