"""Finite-difference checks of every loss term on a tiny model."""
import numpy as np

from . import diffcore as dc
from .dataio.config import ModelConfig
from .dataio.grid import VoxelGrid
from .dataio.labels import SYNTHETIC
from .dataio.synthetic import SceneSample
from .geometry import CameraModel
from .pipeline import HD2SSC, forward, total_loss

LOSS_TERMS = ("ce", "bce_of", "bce_fb", "orth", "decouple", "critical")
THRESHOLD = 1e-5

GRADCHECK_CONFIG = ModelConfig(grid_h=8, grid_w=8, grid_z=4, grid_resolution=1.0, c2d=4, c3d=4,
                               d_exp=2, n_query=6, k_critical=8, k_nn=2, refine_hidden=4,
                               image_w=16, image_h=16, lambda_orth=0.01, w_decouple=1.0,
                               w_critical=1.0)


def _scale_grad(t, factor):
    return dc._make(t.data, (t,), lambda g: (g * factor,))


def tiny_problem(cfg=GRADCHECK_CONFIG, seed=0, label_space=SYNTHETIC):
    """Random scene and model on the gradcheck grid; refinement made active."""
    rng = np.random.default_rng(seed)
    spec = cfg.grid
    H, W, Z = spec.dims
    w, h = cfg.image_size
    cam = CameraModel.looking_forward(w / 2, w / 2, w / 2, h / 2,
                                      (-2.0, spec.origin[1] + W * spec.resolution / 2, 2.0), pitch=0.3)
    labels = rng.integers(0, label_space.num_classes, size=(H, W, Z))
    valid = rng.random((H, W, Z)) > 0.1
    sample = SceneSample(images=[rng.uniform(0, 1, size=(3, h, w))], camera=cam,
                         gt=VoxelGrid(labels, valid),
                         foreground_mask=np.isin(labels, label_space.foreground_ids()))
    model = HD2SSC(cfg, label_space.num_classes)
    for p in (model.refine_mlp.w2, model.refine_mlp.b2):
        p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    return model, sample


def check_losses(cfg=GRADCHECK_CONFIG, seed=0, eps=1e-6, max_entries=6, corrupt=None,
                 label_space=SYNTHETIC):
    """Max relative gradient error per loss term, as an ordered dict."""
    model, sample = tiny_problem(cfg, seed, label_space)
    fg = label_space.foreground_ids()
    results = {}
    for name in LOSS_TERMS:
        def f(name=name):
            out = forward(sample, model)
            term = getattr(total_loss(out, sample.gt, model, fg, cfg), name)
            return _scale_grad(term, 1.5) if name == corrupt else term
        rng = np.random.default_rng(seed)
        results[name] = dc.grad_check(f, model.parameters(), eps=eps, max_entries=max_entries, rng=rng)
    return results
