"""On-disk dataset layout written by ``hd2ssc gen``.

    <root>/manifest.json
    <root>/sample_0000/gt.sscv      ground-truth labels and validity
    <root>/sample_0000/camera.txt   K, R, t and image size
    <root>/sample_0000/image.npy    float64 (3, H, W) rendered image
"""
import json
import os

import numpy as np

from ..errors import DataError, FormatError
from ..geometry import CameraModel
from .grid import read_sscv, write_sscv
from .labels import SEMANTIC_KITTI, SYNTHETIC
from .synthetic import SceneSample

LABEL_SPACES = {"synthetic": SYNTHETIC, "semantickitti": SEMANTIC_KITTI}


def format_camera(cam, image_size):
    fmt = lambda a: " ".join(repr(float(x)) for x in np.asarray(a).reshape(-1))
    return (f"K: {fmt(cam.K)}\nR: {fmt(cam.R)}\nt: {fmt(cam.t)}\n"
            f"image_size: {image_size[0]} {image_size[1]}\n")


def parse_camera(text):
    fields = {}
    for line in text.splitlines():
        if ":" in line:
            key, val = line.split(":", 1)
            fields[key.strip()] = val.split()
    try:
        K = np.array(fields["K"], dtype=np.float64).reshape(3, 3)
        R = np.array(fields["R"], dtype=np.float64).reshape(3, 3)
        t = np.array(fields["t"], dtype=np.float64).reshape(3)
        size = tuple(int(v) for v in fields["image_size"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"malformed camera file: {e}") from e
    return CameraModel(K, R, t), size


def sample_dir(root, i):
    return os.path.join(root, f"sample_{i:04d}")


def write_sample(sample, directory):
    os.makedirs(directory, exist_ok=True)
    write_sscv(sample.gt, os.path.join(directory, "gt.sscv"))
    with open(os.path.join(directory, "camera.txt"), "w") as f:
        f.write(format_camera(sample.camera, sample.image_size))
    np.save(os.path.join(directory, "image.npy"), np.asarray(sample.image, dtype=np.float64))


def read_sample(directory, label_space=SYNTHETIC):
    gt = read_sscv(os.path.join(directory, "gt.sscv"))
    with open(os.path.join(directory, "camera.txt")) as f:
        cam, size = parse_camera(f.read())
    image = np.load(os.path.join(directory, "image.npy"), allow_pickle=False)
    if image.shape != (3, size[1], size[0]):
        raise DataError(f"{directory}: image shape {image.shape} does not match camera size {size}")
    fg = np.isin(gt.labels, label_space.foreground_ids())
    return SceneSample(images=[image], camera=cam, gt=gt, foreground_mask=fg)


def read_dataset(root):
    """Samples in directory order plus the dataset's label space."""
    if not os.path.isdir(root):
        raise DataError(f"dataset directory {root} does not exist")
    space = SYNTHETIC
    manifest = os.path.join(root, "manifest.json")
    if os.path.exists(manifest):
        with open(manifest) as f:
            name = json.load(f).get("label_space", "synthetic")
        if name not in LABEL_SPACES:
            raise DataError(f"unknown label space {name!r}")
        space = LABEL_SPACES[name]
    subdirs = sorted(d for d in os.listdir(root) if d.startswith("sample_"))
    if not subdirs:
        raise DataError(f"no samples under {root}")
    try:
        samples = [read_sample(os.path.join(root, d), space) for d in subdirs]
    except OSError as e:
        raise DataError(f"incomplete sample: {e}") from e
    return samples, space
