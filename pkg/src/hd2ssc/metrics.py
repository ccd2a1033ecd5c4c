"""Scene-completion IoU and semantic mIoU from an integer confusion matrix."""
import io

import numpy as np

from .errors import DataError, ShapeError

INVALID = 255


class ConfusionMatrix:
    """Counts indexed [ground truth, prediction] over valid voxels."""

    def __init__(self, num_classes, counts=None):
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    @property
    def valid_total(self):
        return int(self.counts.sum())

    def copy(self):
        return ConfusionMatrix(self.num_classes, self.counts.copy())

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise ShapeError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __eq__(self, other):
        return (isinstance(other, ConfusionMatrix) and self.num_classes == other.num_classes
                and np.array_equal(self.counts, other.counts))


def accumulate(pred, gt, valid=None, cm=None, num_classes=None):
    """Add one prediction/ground-truth pair to ``cm`` (a new matrix if None).

    Voxels where ``valid`` is False or the ground truth is 255 are skipped.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    if cm is None:
        if num_classes is None:
            raise ValueError("need num_classes or an existing matrix")
        cm = ConfusionMatrix(num_classes)
    n = cm.num_classes
    keep = gt.reshape(-1) != INVALID
    if valid is not None:
        keep &= np.asarray(valid, dtype=bool).reshape(-1)
    g = gt.reshape(-1)[keep].astype(np.int64)
    p = pred.reshape(-1)[keep].astype(np.int64)
    for name, arr in (("ground truth", g), ("prediction", p)):
        bad = np.flatnonzero((arr < 0) | (arr >= n))
        if bad.size:
            voxel = np.flatnonzero(keep)[bad[0]]
            raise DataError(f"{name} label {arr[bad[0]]} out of range at voxel {voxel}")
    counts = np.bincount(g * n + p, minlength=n * n).reshape(n, n)
    return ConfusionMatrix(n, cm.counts + counts)


def scene_iou(cm):
    c = cm.counts
    tp = c[1:, 1:].sum()
    fp = c[0, 1:].sum()
    fn = c[1:, 0].sum()
    denom = tp + fp + fn
    return float(tp / denom) if denom else 0.0


def semantic_miou(cm):
    """Per-class IoU for c_1..c_N and their mean.

    A class with an empty union (absent from both ground truth and
    prediction) gets NaN and is left out of the mean.
    """
    c = cm.counts
    inter = np.diag(c)[1:].astype(np.float64)
    union = (c.sum(axis=0) + c.sum(axis=1) - np.diag(c))[1:].astype(np.float64)
    per_class = np.full(inter.shape, np.nan)
    present = union > 0
    per_class[present] = inter[present] / union[present]
    miou = float(per_class[present].mean()) if present.any() else 0.0
    return per_class.tolist(), miou


def report_csv(cm, label_space):
    """One header row and one value row: SC IoU, mIoU, then per class."""
    per_class, miou = semantic_miou(cm)
    order = label_space.report_order()
    header = ["sc_iou", "miou"] + [label_space.names[i] for i in order]
    values = [scene_iou(cm), miou] + [per_class[i - 1] for i in order]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    buf.write(",".join("nan" if v != v else f"{v:.6f}" for v in values) + "\n")
    return buf.getvalue()
