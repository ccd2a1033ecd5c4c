"""Pinhole camera, voxel-centroid projection and image-to-voxel sampling.

World axes are x forward, y left, z up. A camera maps a world point p to
camera coordinates R @ p + t; the first camera coordinate runs along image
columns (u), the second along rows (v), the third is optical depth.
"""
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if K.shape != (3, 3) or R.shape != (3, 3):
            raise ShapeError("K and R must be 3x3")
        if np.any(np.tril(K, -1) != 0) or K[2, 2] != 1 or K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ConfigError("K must be upper triangular with K[2,2] == 1 and positive focal lengths")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ConfigError("R must be a proper rotation")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def looking_forward(cls, fx, fy, cx, cy, position, pitch=0.0):
        """Camera at ``position`` facing +x, tilted down by ``pitch`` radians."""
        base = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])
        c, s = np.cos(pitch), np.sin(pitch)
        tilt = np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
        R = tilt @ base
        t = -R @ np.asarray(position, dtype=np.float64)
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, R, t)

    def to_camera(self, points):
        return points @ self.R.T + self.t

    def center(self):
        return -self.R.T @ self.t

    def backproject(self, u, v, depth):
        """World point on the ray through (u, v) at optical depth ``depth``."""
        pix = np.stack([np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64),
                        np.ones_like(np.asarray(u, dtype=np.float64))], axis=-1)
        cam = np.linalg.solve(self.K, pix.T).T * np.asarray(depth)[..., None]
        return (cam - self.t) @ self.R


@dataclass(frozen=True)
class VoxelGridSpec:
    dims: tuple = (32, 32, 8)
    origin: tuple = (0.0, -6.4, 0.0)
    resolution: float = 0.4

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigError(f"grid dims must be three positive extents, got {self.dims}")
        if not self.resolution > 0:
            raise ConfigError("grid resolution must be positive")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def num_voxels(self):
        H, W, Z = self.dims
        return H * W * Z

    def centroids(self):
        """(H, W, Z, 3) array of voxel centres in world coordinates."""
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), axis=-1)
        return np.asarray(self.origin) + self.resolution * (idx + 0.5)

    def world_to_index(self, points):
        return np.floor((np.asarray(points) - np.asarray(self.origin)) / self.resolution).astype(np.intp)


@dataclass
class Projection:
    uv: np.ndarray      # (H, W, Z, 2) pixel coordinates
    depth: np.ndarray   # (H, W, Z) optical depth
    valid: np.ndarray   # (H, W, Z) in front of the camera and inside the image
    image_size: tuple   # (width, height)


def project_points(points, cam):
    pc = cam.to_camera(points)
    z = pc[..., 2]
    hom = pc @ cam.K.T
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[..., :2] / hom[..., 2:3]
    return uv, z


def project_voxels(spec, cam, image_size):
    width, height = image_size
    uv, z = project_points(spec.centroids(), cam)
    with np.errstate(invalid="ignore"):
        valid = ((z > 0) & (uv[..., 0] >= 0) & (uv[..., 0] < width)
                 & (uv[..., 1] >= 0) & (uv[..., 1] < height))
    uv = np.where(valid[..., None], uv, 0.0)
    return Projection(uv=uv, depth=z, valid=valid, image_size=(int(width), int(height)))


def sample_image_features(features, proj, downsample=1):
    """Bilinearly sample a (C, h, w) feature map at every voxel's projection.

    The map is the image downsampled by ``downsample``; image pixel centre u
    lands on feature coordinate (u + 0.5) / downsample - 0.5. Voxels outside
    the view receive zeros. Returns a (C, H, W, Z) tensor.
    """
    if downsample <= 0:
        raise ConfigError(f"downsample factor must be positive, got {downsample}")
    features = dc.as_tensor(features)
    C = features.shape[0]
    grid = proj.valid.shape
    flat_valid = proj.valid.reshape(-1)
    cols = np.flatnonzero(flat_valid)
    uv = proj.uv.reshape(-1, 2)[cols]
    xs = (uv[:, 0] + 0.5) / downsample - 0.5
    ys = (uv[:, 1] + 0.5) / downsample - 0.5
    picked = dc.bilinear_sample(features, xs, ys)
    zeros = dc.Tensor(np.zeros((C, flat_valid.size)))
    full = dc.scatter_add(zeros, cols, picked, axis=1)
    return dc.reshape(full, (C,) + grid)
