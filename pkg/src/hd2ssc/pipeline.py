"""End-to-end model: encoder, semantic decoupling, view transform, refinement.

The forward pass follows the data flow

    image -> encoder -> dim_expand -> pixel-query attention -> DPC clustering
          -> slice aggregation -> voxel sampling -> 3x3x3 conv -> heads
          -> critical voxels -> residual refinement

and ``total_loss`` adds cross-entropy on the refined logits, the two binary
heads' BCE terms and the three auxiliary losses.
"""
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from . import hor, hsd
from .dataio.config import ModelConfig
from .errors import ConfigError, DivergenceError, NumericDomainError
from .geometry import project_voxels, sample_image_features
from .metrics import ConfusionMatrix, accumulate, scene_iou, semantic_miou

log = logging.getLogger(__name__)

DOWNSAMPLE = 4
POS_BANDS = 3
POS_CHANNELS = 4 * (1 + 2 * POS_BANDS) + 1


class ToyEncoder:
    """Two stride-2 3x3 convolutions with ReLU; output is 1/4 resolution."""

    def __init__(self, c2d, rng, prefix="encoder"):
        self.w1 = dc.uniform_init(rng, (c2d, 3, 3, 3), 27, f"{prefix}.conv1.weight")
        self.b1 = dc.uniform_init(rng, (c2d,), 27, f"{prefix}.conv1.bias")
        self.w2 = dc.uniform_init(rng, (c2d, c2d, 3, 3), 9 * c2d, f"{prefix}.conv2.weight")
        self.b2 = dc.uniform_init(rng, (c2d,), 9 * c2d, f"{prefix}.conv2.bias")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, image):
        _, h, w = image.shape
        if h % 4 or w % 4:
            raise ConfigError(f"image size {w}x{h} is not divisible by 4")
        x = dc.relu(dc.conv(image, self.w1, self.b1, stride=2, padding=1))
        return dc.relu(dc.conv(x, self.w2, self.b2, stride=2, padding=1))


def toy_encoder(image, encoder):
    return encoder(dc.as_tensor(image))


def voxel_position_encoding(spec, proj, bands=POS_BANDS):
    """Fixed per-voxel channels for the view transform.

    Normalised x, y, z and optical depth, each with sin/cos at ``bands``
    octave frequencies, plus the in-view flag. A single ReLU conv cannot carve
    sharp depth bands out of raw coordinates; the octaves make that cheap.
    """
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in spec.dims], indexing="ij"), axis=0)
    dims = np.asarray(spec.dims, dtype=np.float64).reshape(3, 1, 1, 1)
    coords = (idx + 0.5) / dims * 2.0 - 1.0
    span = float(np.linalg.norm(np.asarray(spec.dims) * spec.resolution))
    depth = np.where(proj.valid, proj.depth, 0.0) / span
    base = np.concatenate([coords, depth[None]], axis=0)
    chans = [base]
    for b in range(bands):
        chans += [np.sin(np.pi * 2 ** b * base), np.cos(np.pi * 2 ** b * base)]
    chans.append(proj.valid[None].astype(np.float64))
    return np.concatenate(chans, axis=0)


class HD2SSC:
    """Model parameters plus the forward pass. Names are unique dotted paths."""

    def __init__(self, cfg, num_classes):
        self.cfg = cfg
        self.num_classes = num_classes
        rng = np.random.default_rng(cfg.seed)
        c2d, c3d = cfg.c2d, cfg.c3d
        self.encoder = ToyEncoder(c2d, rng)
        self.expansion = hsd.ExpansionLayer(c2d, cfg.d_exp, rng)
        self.pixel_queries = hsd.PixelQuerySet(cfg.n_query, c2d, rng)
        fan = 27 * (c2d + POS_CHANNELS)
        self.voxel_w = dc.uniform_init(rng, (c3d, c2d + POS_CHANNELS, 3, 3, 3), fan, "voxel.conv.weight")
        self.voxel_b = dc.uniform_init(rng, (c3d,), fan, "voxel.conv.bias")
        self.voxel_queries = hor.VoxelQuerySet(cfg.n_query, c3d, rng)
        self.binary_head = hor.LinearHead(c3d, 2, rng, "hor.binary_head")
        self.class_head = hor.LinearHead(c3d, num_classes, rng, "hor.class_head")
        self.refine_mlp = hor.RefineMLP(c3d, cfg.refine_hidden, num_classes, rng)
        names = [p.name for p in self.parameters()]
        assert len(names) == len(set(names)), "duplicate parameter names"

    def parameters(self):
        params = (self.encoder.parameters() + self.expansion.parameters()
                  + self.pixel_queries.parameters() + [self.voxel_w, self.voxel_b]
                  + self.voxel_queries.parameters() + self.binary_head.parameters()
                  + self.class_head.parameters() + self.refine_mlp.parameters())
        return params

    def trainable(self):
        if self.cfg.refine:
            return self.parameters()
        frozen = {id(self.refine_mlp.w2), id(self.refine_mlp.b2)}
        return [p for p in self.parameters() if id(p) not in frozen]

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def state(self):
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state(self, state):
        for p in self.parameters():
            p.data[...] = state[p.name]


@dataclass
class ForwardOutput:
    refined: hor.SemLogits
    initial: hor.SemLogits
    maps: hor.ScoreMaps
    volume: hsd.PseudoVolume
    semantics: dc.Tensor
    clusters: hsd.ClusterSet
    f_voxel: dc.Tensor
    v_geo: hor.CriticalSet
    v_sem: hor.CriticalSet


def forward(sample, model):
    cfg = model.cfg
    spec = cfg.grid
    if sample.gt is not None and tuple(sample.gt.shape) not in (spec.dims, tuple(2 * d for d in spec.dims)):
        raise ConfigError(f"sample grid {sample.gt.shape} does not match model grid {spec.dims}")
    f_cam = toy_encoder(sample.image, model.encoder)
    volume = hsd.dim_expand(f_cam, model.expansion)
    semantics = hsd.collect_global_semantics(model.pixel_queries, volume)
    clusters = hsd.dpc_knn_cluster(semantics, cfg.d_exp, cfg.k_nn)
    f_agg = hsd.semantic_aggregate(volume, clusters, cfg.slice_level_sim)
    proj = project_voxels(spec, sample.camera, sample.image_size)
    sampled = sample_image_features(f_agg, proj, DOWNSAMPLE)
    pos = dc.Tensor(voxel_position_encoding(spec, proj))
    f_voxel = dc.relu(dc.conv(dc.concat([sampled, pos], axis=0), model.voxel_w, model.voxel_b, padding=1))
    context = hor.query_context(f_voxel, model.voxel_queries)
    maps = hor.binary_heads(f_voxel, model.voxel_queries, model.binary_head, context)
    initial = hor.classwise_head(f_voxel, model.voxel_queries, model.class_head, context=context)
    v_geo = hor.geometric_critical(maps, cfg.k_critical)
    v_sem = hor.semantic_critical(initial, cfg.k_critical)
    if cfg.refine:
        refined = hor.refine(initial, f_voxel, v_geo, v_sem, model.refine_mlp, maps)
    else:
        refined = initial
    return ForwardOutput(refined, initial, maps, volume, semantics, clusters, f_voxel, v_geo, v_sem)


@dataclass
class LossReport:
    total: float
    ce: float
    bce_of: float
    bce_fb: float
    orth: float
    decouple: float
    critical: float

    FIELDS = ("total", "ce", "bce_of", "bce_fb", "orth", "decouple", "critical")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass
class LossTerms:
    total: dc.Tensor
    ce: dc.Tensor
    bce_of: dc.Tensor
    bce_fb: dc.Tensor
    orth: dc.Tensor
    decouple: dc.Tensor
    critical: dc.Tensor

    def report(self):
        return LossReport(**{k: float(getattr(self, k).data) for k in LossReport.FIELDS})


def supervision_targets(gt, foreground_ids, grid_dims=None):
    """Flat labels, validity, occupancy and foreground targets for the model grid."""
    labels = gt.labels
    valid = gt.effective_valid()
    if grid_dims is not None and tuple(labels.shape) != tuple(grid_dims):
        # ground truth at twice the model resolution: take the lowest corner voxel
        f = labels.shape[0] // grid_dims[0]
        labels = labels[::f, ::f, ::f]
        valid = valid[::f, ::f, ::f]
    labels = labels.reshape(-1).astype(np.intp)
    valid = valid.reshape(-1)
    occ = (labels > 0) & valid
    fg = np.isin(labels, foreground_ids).astype(np.float64)
    return labels, valid, occ, fg


def total_loss(out, gt, model, foreground_ids, cfg=None):
    cfg = cfg or model.cfg
    labels, valid, occ, fg = supervision_targets(gt, foreground_ids, cfg.grid.dims)
    if not valid.any():
        raise NumericDomainError("total_loss: ground truth has no valid voxels")
    n_cls = out.refined.num_classes
    safe = np.where(valid, labels, 0)
    logits = dc.reshape(out.refined.logits, (n_cls, -1))
    ce = dc.cross_entropy(logits, safe, valid)
    bce_of = dc.binary_cross_entropy(dc.reshape(out.maps.m_of, (-1,)), occ.astype(np.float64), valid)
    bce_fb = dc.binary_cross_entropy(dc.reshape(out.maps.m_fb, (-1,)), fg, occ)
    zero = dc.Tensor(0.0)
    orth = hsd.orthogonal_loss(model.expansion, cfg.lambda_orth) if cfg.lambda_orth > 0 else zero
    decouple = hsd.decoupling_loss(out.clusters) if cfg.w_decouple > 0 else zero
    if cfg.w_critical > 0:
        subset = np.union1d(out.v_geo.indices, out.v_sem.indices) if cfg.kl_topk_only else None
        critical = hor.critical_alignment_loss(out.maps, out.initial, subset)
    else:
        critical = zero
    total = ce + bce_of + bce_fb + orth + decouple * cfg.w_decouple + critical * cfg.w_critical
    return LossTerms(total, ce, bce_of, bce_fb, orth, decouple, critical)


def upsample_logits(y, factor=2):
    if factor < 1:
        raise ConfigError("upsample factor must be >= 1")
    if factor == 1:
        return y
    return hor.SemLogits(dc.upsample_nearest(y.logits, factor))


class AdamW:
    """Adam with decoupled weight decay (Loshchilov and Hutter)."""

    def __init__(self, params, lr=2e-4, weight_decay=1e-2, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data *= 1.0 - self.lr * self.wd
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def predict(model, sample):
    """Arg-max labels at the ground-truth resolution."""
    out = forward(sample, model)
    logits = out.refined
    if sample.gt is not None:
        factor = sample.gt.shape[0] // logits.grid[0]
        logits = upsample_logits(logits, factor) if factor > 1 else logits
    return logits.labels()


def evaluate_sample(model, sample):
    pred = predict(model, sample)
    return accumulate(pred, sample.gt.labels, sample.gt.valid, num_classes=model.num_classes)


def evaluate(model, dataset, workers=1):
    """Confusion matrix over ``dataset``; the integer merge is order-free."""
    cm = ConfusionMatrix(model.num_classes)
    if workers <= 1:
        for s in dataset:
            cm = cm.merge(evaluate_sample(model, s))
        return cm
    from concurrent.futures import ThreadPoolExecutor
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for part in pool.map(lambda s: evaluate_sample(model, s), dataset):
            cm = cm.merge(part)
    return cm


@dataclass
class EvalRecord:
    step: int
    epoch: int
    sc_iou: float
    miou: float
    per_class: list


@dataclass
class TrainResult:
    model: HD2SSC
    epochs: list = field(default_factory=list)     # mean LossReport per epoch
    evals: list = field(default_factory=list)
    steps: int = 0
    grad_seen: set = field(default_factory=set)

    @property
    def final(self):
        return self.evals[-1] if self.evals else None


def _mean_report(reports):
    return LossReport(**{k: float(np.mean([getattr(r, k) for r in reports])) for k in LossReport.FIELDS})


def train(dataset, cfg, label_space, model=None, max_steps=None, stop=None, eval_every=None):
    """Batch-1 AdamW training over ``dataset`` for ``cfg.epochs`` epochs.

    ``stop(record)`` may end training early after an evaluation; evaluations
    run every ``eval_every`` epochs (defaulting to ``cfg.eval_every``) and once
    at the end.
    """
    if not dataset:
        raise ConfigError("training needs a non-empty dataset")
    model = model or HD2SSC(cfg, label_space.num_classes)
    fg_ids = label_space.foreground_ids()
    opt = AdamW(model.trainable(), cfg.lr, cfg.weight_decay)
    result = TrainResult(model)
    eval_every = cfg.eval_every if eval_every is None else eval_every

    def run_eval(epoch):
        cm = evaluate(model, dataset)
        per_class, miou = semantic_miou(cm)
        rec = EvalRecord(result.steps, epoch, scene_iou(cm), miou, per_class)
        result.evals.append(rec)
        log.info("epoch %d step %d: SC IoU %.4f mIoU %.4f", epoch, result.steps, rec.sc_iou, rec.miou)
        return rec

    for epoch in range(1, cfg.epochs + 1):
        reports = []
        for sample in dataset:
            opt.zero_grad()
            try:
                out = forward(sample, model)
                terms = total_loss(out, sample.gt, model, fg_ids, cfg)
            except NumericDomainError as e:
                raise DivergenceError(f"step {result.steps + 1}: {e}") from e
            if not math.isfinite(float(terms.total.data)):
                raise DivergenceError(f"non-finite loss at step {result.steps + 1}: {terms.report()}")
            terms.total.backward()
            for p in opt.params:
                if p.grad is not None and np.any(p.grad != 0):
                    result.grad_seen.add(p.name)
            opt.step()
            result.steps += 1
            reports.append(terms.report())
            if max_steps is not None and result.steps >= max_steps:
                break
        result.epochs.append(_mean_report(reports))
        log.debug("epoch %d: %s", epoch, result.epochs[-1])
        done = max_steps is not None and result.steps >= max_steps
        if (eval_every and epoch % eval_every == 0) or done or epoch == cfg.epochs:
            rec = run_eval(epoch)
            if stop is not None and stop(rec):
                break
        if done:
            break
    return result


def config_dict(cfg):
    return asdict(cfg)


__all__ = ["HD2SSC", "ModelConfig", "forward", "total_loss", "train", "evaluate",
           "predict", "upsample_logits", "AdamW", "LossReport", "toy_encoder"]
