"""SemanticKITTI-convention voxel ingestion.

A frame is two files: ``<frame>.label`` holding one little-endian u16 per
voxel of a 256x256x32 grid, and ``<frame>.invalid`` holding one bit per voxel,
packed MSB-first. Raw labels go through a caller-supplied class map.
"""
import os

import numpy as np

from ..errors import DataError, LengthError
from .grid import INVALID, VoxelGrid, unpack_mask

KITTI_DIMS = (256, 256, 32)


def load_class_map(path):
    """Read ``raw mapped`` integer pairs, one per line; '#' starts a comment."""
    mapping = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(":", " ").split()
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 'raw mapped'")
            mapping[int(parts[0])] = int(parts[1])
    return mapping


def identity_class_map(num_classes=20):
    m = {i: i for i in range(num_classes)}
    m[INVALID] = INVALID
    return m


def remap_labels(raw, class_map):
    lut = np.full(65536, -1, dtype=np.int32)
    for k, v in class_map.items():
        lut[k] = v
    out = lut[raw]
    bad = np.flatnonzero(out < 0)
    if bad.size:
        raise DataError(f"raw label {raw.reshape(-1)[bad[0]]} at voxel {bad[0]} has no class mapping")
    return out.astype(np.uint16)


def decode_kitti(label_bytes, invalid_bytes, class_map=None, dims=KITTI_DIMS):
    n = int(np.prod(dims))
    if len(label_bytes) != 2 * n:
        raise LengthError("label file", 2 * n, len(label_bytes))
    if len(invalid_bytes) != (n + 7) // 8:
        raise LengthError("invalid file", (n + 7) // 8, len(invalid_bytes))
    raw = np.frombuffer(label_bytes, dtype="<u2").reshape(dims)
    labels = remap_labels(raw, class_map if class_map is not None else identity_class_map())
    invalid = unpack_mask(invalid_bytes, n).reshape(dims)
    return VoxelGrid(labels, ~invalid)


def read_semantickitti_voxels(directory, frame_id, class_map=None, dims=KITTI_DIMS):
    stem = os.path.join(directory, f"{frame_id}" if isinstance(frame_id, str) else f"{frame_id:06d}")
    with open(stem + ".label", "rb") as f:
        label_bytes = f.read()
    with open(stem + ".invalid", "rb") as f:
        invalid_bytes = f.read()
    return decode_kitti(label_bytes, invalid_bytes, class_map, dims)
