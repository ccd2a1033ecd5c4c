"""Seeded procedural street scenes.

Each scene is a road layer at k = 0, one or more wall slabs (building),
vegetation blocks and two to six foreground boxes (cars and people). A
forward-facing camera sits just behind the grid's near edge. The image is
ray-marched through the label grid: each hit pixel gets its class colour
dimmed with distance (a fog cue) plus Gaussian noise.

Ground-truth validity follows LiDAR-style observability: voxels outside the
camera frustum and free voxels hidden behind the first visible surface are
marked invalid; every occupied voxel inside the frustum stays valid.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from ..geometry import CameraModel, project_voxels
from .grid import VoxelGrid
from .labels import SYNTHETIC

FOG_SCALE = 25.0
NOISE_STD = 0.03
SKY = np.array([0.55, 0.65, 0.8])
MIN_DIMS = (12, 8, 6)


@dataclass
class SceneSample:
    images: list                 # N_t arrays of shape (3, H_img, W_img)
    camera: CameraModel
    gt: VoxelGrid
    foreground_mask: np.ndarray
    depth: np.ndarray = field(default=None, repr=False)

    @property
    def image(self):
        return self.images[0]

    @property
    def image_size(self):
        _, h, w = self.images[0].shape
        return (w, h)


def default_camera(spec, image_size):
    w, h = image_size
    f = w / 2.0
    height = spec.origin[2] + 0.55 * spec.dims[2] * spec.resolution
    pos = (spec.origin[0] - 1.0, spec.origin[1] + spec.dims[1] * spec.resolution / 2, height)
    return CameraModel.looking_forward(f, f, w / 2.0, h / 2.0, pos, pitch=0.2)


def _free(labels, box):
    (x0, x1), (y0, y1), (z0, z1) = box
    return not labels[x0:x1, y0:y1, z0:z1].any()


def _place(rng, labels, size, x_range, y_range, z0, cls, tries=50):
    H, W, Z = labels.shape
    sx, sy, sz = size
    for _ in range(tries):
        x0 = int(rng.integers(x_range[0], max(x_range[0] + 1, min(x_range[1], H - sx) + 1)))
        y0 = int(rng.integers(y_range[0], max(y_range[0] + 1, min(y_range[1], W - sy) + 1)))
        box = ((x0, x0 + sx), (y0, y0 + sy), (z0, min(z0 + sz, Z)))
        if _free(labels, box):
            labels[box[0][0]:box[0][1], box[1][0]:box[1][1], box[2][0]:box[2][1]] = cls
            return box
    return None


def _render(labels, spec, cam, image_size, rng, colors):
    w, h = image_size
    u, v = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    rays_cam = np.stack([u, v, np.ones_like(u)], axis=-1) @ np.linalg.inv(cam.K).T
    rays_world = rays_cam @ cam.R       # direction per unit optical depth
    c = cam.center()
    step = spec.resolution / 8
    extent = np.linalg.norm(np.asarray(spec.dims) * spec.resolution) + np.linalg.norm(
        c - np.asarray(spec.origin))
    depths = np.arange(step, extent, step)
    hit_cls = np.zeros((h, w), dtype=np.int64)
    hit_depth = np.full((h, w), np.inf)
    todo = np.ones((h, w), dtype=bool)
    dims = np.asarray(spec.dims)
    for z in depths:
        if not todo.any():
            break
        rr, cc = np.nonzero(todo)
        pts = c + z * rays_world[rr, cc]
        idx = spec.world_to_index(pts)
        inside = np.all((idx >= 0) & (idx < dims), axis=1)
        lab = np.zeros(rr.size, dtype=np.int64)
        lab[inside] = labels[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
        hit = lab > 0
        hit_cls[rr[hit], cc[hit]] = lab[hit]
        hit_depth[rr[hit], cc[hit]] = z
        todo[rr[hit], cc[hit]] = False
    palette = np.asarray(colors, dtype=np.float64) / 255.0
    img = np.where((hit_cls > 0)[..., None], palette[hit_cls], SKY)
    fog = np.where(np.isfinite(hit_depth), np.exp(-np.where(np.isfinite(hit_depth), hit_depth, 0) / FOG_SCALE), 1.0)
    img = img * fog[..., None] + rng.normal(0.0, NOISE_STD, size=img.shape)
    return np.transpose(img, (2, 0, 1)), hit_depth


def _observability(labels, spec, cam, image_size, depth_map):
    proj = project_voxels(spec, cam, image_size)
    w, h = image_size
    uu = np.clip(np.rint(proj.uv[..., 0]).astype(np.intp), 0, w - 1)
    vv = np.clip(np.rint(proj.uv[..., 1]).astype(np.intp), 0, h - 1)
    surface = depth_map[vv, uu]
    visible_free = proj.depth <= surface
    return proj.valid & ((labels > 0) | visible_free), proj


def generate_scene(rng, spec, image_size, label_space=SYNTHETIC):
    H, W, Z = spec.dims
    if H < MIN_DIMS[0] or W < MIN_DIMS[1] or Z < MIN_DIMS[2]:
        raise ConfigError(f"grid {spec.dims} too small for synthetic scenes (need >= {MIN_DIMS})")
    ids = {n: label_space.index(n) for n in ("road", "building", "car", "person", "vegetation")}
    cam = default_camera(spec, image_size)
    for _ in range(100):
        labels = np.zeros(spec.dims, dtype=np.uint16)
        labels[:, :, 0] = ids["road"]
        for _ in range(int(rng.integers(1, 4))):
            if rng.random() < 0.5:
                size = (int(rng.integers(1, 3)), int(rng.integers(W // 3, W // 2 + 1)),
                        int(rng.integers(Z - 3, Z)))
                _place(rng, labels, size, (H * 3 // 4, H - 1), (0, W), 1, ids["building"])
            else:
                size = (int(rng.integers(H // 4, H // 2 + 1)), int(rng.integers(1, 3)),
                        int(rng.integers(Z - 3, Z)))
                side = (0, 1) if rng.random() < 0.5 else (W - size[1], W)
                _place(rng, labels, size, (H // 3, H), side, 1, ids["building"])
        for _ in range(int(rng.integers(1, 3))):
            size = tuple(int(rng.integers(2, 5)) for _ in range(2)) + (int(rng.integers(2, 4)),)
            _place(rng, labels, size, (H // 2, H), (0, W), 1, ids["vegetation"])
        n_fg = int(rng.integers(2, 7))
        kinds = ["car", "person"] + [("car", "person")[int(rng.integers(0, 2))] for _ in range(n_fg - 2)]
        boxes = []
        for kind in kinds:
            if kind == "car":
                size = (int(rng.integers(5, 9)), int(rng.integers(3, 5)), int(rng.integers(3, 5)))
            else:
                size = (2, 2, int(rng.integers(4, 6)))
            box = _place(rng, labels, size, (H // 6, H * 3 // 4), (W // 8, W - W // 8), 1, ids[kind])
            if box is not None:
                boxes.append(box)
        if len(boxes) < 2:
            continue
        proj = project_voxels(spec, cam, image_size)
        if all(proj.valid[b[0][0]:b[0][1], b[1][0]:b[1][1], b[2][0]:b[2][1]].any() for b in boxes):
            break
    else:
        raise ConfigError("could not place visible geometry in this grid")
    image, depth = _render(labels, spec, cam, image_size, rng, label_space.colors)
    valid, _ = _observability(labels, spec, cam, image_size, depth)
    fg = np.isin(labels, label_space.foreground_ids())
    return SceneSample(images=[image], camera=cam, gt=VoxelGrid(labels, valid),
                       foreground_mask=fg, depth=depth)


def generate_synthetic(seed, count, spec, label_space=SYNTHETIC, image_size=(128, 96)):
    """``count`` scenes, fully determined by ``seed``."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    seqs = np.random.SeedSequence(seed).spawn(count)
    return [generate_scene(np.random.default_rng(s), spec, image_size, label_space) for s in seqs]
