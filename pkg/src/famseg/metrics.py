"""Confusion matrix, IoU / mIoU and the strip-convolution cost report."""

from __future__ import annotations

import json
from fractions import Fraction

import numpy as np

from .data import CLASS_NAMES
from .encoder import StripBlock, strip_param_count


class ConfusionMatrix:
    """``counts[i, j]`` = pixels with ground truth ``i`` predicted as ``j``."""

    def __init__(self, num_classes: int = 3, counts=None):
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64) if counts is None else np.array(counts, dtype=np.int64)

    def accumulate(self, gt, pred) -> "ConfusionMatrix":
        gt = np.asarray(gt)
        pred = np.asarray(pred)
        if gt.shape != pred.shape:
            raise ValueError(f"ground truth {gt.shape} and prediction {pred.shape} differ in shape")
        c = self.num_classes
        for name, m in (("ground truth", gt), ("prediction", pred)):
            if m.size and (m.min() < 0 or m.max() >= c):
                raise ValueError(f"{name} contains labels outside [0, {c - 1}]")
        idx = gt.astype(np.int64).reshape(-1) * c + pred.astype(np.int64).reshape(-1)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(cm: ConfusionMatrix, gt_mask, pred_mask) -> ConfusionMatrix:
    return ConfusionMatrix(cm.num_classes, cm.counts.copy()).accumulate(gt_mask, pred_mask)


def iou(cm: ConfusionMatrix):
    """Per-class IoU and their mean.

    A class absent from both ground truth and prediction has undefined IoU
    (``nan`` in the list) and is left out of the mean.
    """
    counts = cm.counts if isinstance(cm, ConfusionMatrix) else np.asarray(cm)
    if counts.sum() == 0:
        raise ValueError("confusion matrix is empty")
    inter = np.diag(counts).astype(np.float64)
    union = counts.sum(axis=0) + counts.sum(axis=1) - np.diag(counts)
    with np.errstate(invalid="ignore", divide="ignore"):
        per_class = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = union > 0
    return per_class.tolist(), float(per_class[present].mean())


def report(cm: ConfusionMatrix, title: str = "evaluation") -> str:
    """Plain-text table in the order BG, FL, FB, mIoU (percent)."""
    per, miou = iou(cm)
    names = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"C{i}" for i in range(cm.num_classes)]
    head = "Item".ljust(14) + "".join(n.rjust(9) for n in names) + "mIoU".rjust(9)
    vals = "".join(("   n/a" if np.isnan(v) else f"{100 * v:9.2f}") for v in per)
    row = title[:13].ljust(14) + vals + f"{100 * miou:9.2f}"
    note = "# IoU from the dataset-level confusion matrix; classes absent from gt and prediction are excluded from mIoU"
    return "\n".join([note, head, row])


def report_record(cm: ConfusionMatrix, **extra) -> str:
    per, miou = iou(cm)
    names = [CLASS_NAMES[i] if i < len(CLASS_NAMES) else f"C{i}" for i in range(cm.num_classes)]
    rec = {n: (None if np.isnan(v) else v) for n, v in zip(names, per)}
    rec["mIoU"] = miou
    rec.update(extra)
    return json.dumps(rec)


# cost accounting -------------------------------------------------------------


def cost_report(model, image_size: int = 64) -> dict:
    """Per strip block: standard KxK cost versus horizontal+vertical strips at the block's output size.

    Also returns the three worked rows at ``Ho = Wo = 1`` and the total
    parameter count from walking the module tree.
    """
    enc = model.encoder
    rows = []
    for stage_name, stride in (("stage1", 4), ("stage2", 8)):
        ho = wo = image_size // stride
        for li, layer in enumerate(getattr(enc, stage_name)):
            block: StripBlock = layer.block
            for k in block.spec.branch_kernels:
                standard, ours = strip_param_count(k, ho, wo)
                rows.append({"block": f"encoder.{stage_name}.{li}.block", "K": k, "Ho": ho, "Wo": wo,
                             "standard": standard, "ours": ours, "ratio": Fraction(ours, standard)})
    worked = [
        {"row": "strip 7 (2 x Ho x Wo x 7)", "value": strip_param_count(7, 1, 1)[1]},
        {"row": "standard 7x7 (7 x Ho x Wo x 7)", "value": strip_param_count(7, 1, 1)[0]},
        {"row": "3x3 pair (2 x Ho x Wo x 9)", "value": 2 * 1 * 1 * 9},
    ]
    return {"blocks": rows, "worked": worked, "total_parameters": model.num_parameters()}


def format_cost_report(rep: dict) -> str:
    lines = [f"{'block':28s}{'K':>4s}{'Ho':>5s}{'Wo':>5s}{'standard':>11s}{'ours':>9s}{'ratio':>8s}"]
    for r in rep["blocks"]:
        lines.append(f"{r['block']:28s}{r['K']:4d}{r['Ho']:5d}{r['Wo']:5d}{r['standard']:11d}{r['ours']:9d}"
                     f"{str(r['ratio']):>8s}")
    lines.append("")
    lines.append("worked rows at Ho = Wo = 1:")
    for w in rep["worked"]:
        lines.append(f"  {w['row']:34s}{w['value']:6d}")
    lines.append(f"total parameters: {rep['total_parameters']}")
    return "\n".join(lines)
