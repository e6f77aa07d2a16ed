"""Segmentation metrics: IoU aggregates, threshold precisions, and label-map
accuracies for fixed-vocabulary evaluation."""

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError

PRECISION_TAUS = (0.5, 0.6, 0.7, 0.8, 0.9)
MAP_TAUS = tuple(round(0.50 + 0.05 * k, 2) for k in range(10))


def _binary(mask, name):
    m = np.asarray(mask)
    if m.ndim != 2:
        raise InputError(f"{name} mask must be 2-dimensional, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise InputError(f"{name} mask must only contain 0 and 1")
    return m.astype(bool)


def _counts(pred, gt):
    p = _binary(pred, "pred")
    g = _binary(gt, "gt")
    if p.shape != g.shape:
        raise InputError(f"mask shapes differ: {p.shape} vs {g.shape}")
    inter = int(np.logical_and(p, g).sum())
    union = int(np.logical_or(p, g).sum())
    return inter, union


def iou(pred, gt):
    """Intersection over union; two empty masks count as a perfect match."""
    inter, union = _counts(pred, gt)
    return 1.0 if union == 0 else inter / union


@dataclass
class EvalReport:
    overall_iou: float
    mean_iou: float
    precision_at: dict     # tau -> fraction of samples with IoU strictly above tau
    map_50_95: float
    n_samples: int

    def to_json_dict(self):
        out = {
            "overall_iou": self.overall_iou,
            "mean_iou": self.mean_iou,
        }
        for tau in PRECISION_TAUS:
            out[f"p_{int(round(tau * 100))}"] = self.precision_at[tau]
        out["map_50_95"] = self.map_50_95
        out["n_samples"] = self.n_samples
        return out

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2) + "\n"

    def table(self):
        rows = [(k, f"{v:.4f}" if isinstance(v, float) else str(v))
                for k, v in self.to_json_dict().items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def aggregate(samples):
    """Aggregate (pred, gt) mask pairs into an EvalReport.

    overall_iou pools intersections and unions over the whole set; mean_iou
    averages per-sample IoU; precisions count samples with IoU strictly
    above each threshold; map_50_95 averages those precisions over the ten
    thresholds 0.50, 0.55, ... 0.95.
    """
    pairs = list(samples)
    if not pairs:
        raise InputError("aggregate needs at least one sample")
    total_i = 0
    total_u = 0
    ious = []
    for pred, gt in pairs:
        inter, union = _counts(pred, gt)
        total_i += inter
        total_u += union
        ious.append(1.0 if union == 0 else inter / union)
    ious = np.asarray(ious)
    precision = {tau: float(np.mean(ious > tau)) for tau in PRECISION_TAUS}
    return EvalReport(
        overall_iou=1.0 if total_u == 0 else total_i / total_u,
        mean_iou=float(ious.mean()),
        precision_at=precision,
        map_50_95=float(np.mean([np.mean(ious > tau) for tau in MAP_TAUS])),
        n_samples=len(pairs),
    )


@dataclass
class PairEvalReport:
    class_average_acc: float
    global_acc: float
    mean_class_iou: float
    classes_present: tuple

    def to_json_dict(self):
        return {
            "class_average_acc": self.class_average_acc,
            "global_acc": self.global_acc,
            "mean_class_iou": self.mean_class_iou,
            "classes_present": list(self.classes_present),
        }

    def to_json(self):
        return json.dumps(self.to_json_dict(), indent=2) + "\n"

    def table(self):
        rows = [("class_average_acc", self.class_average_acc),
                ("global_acc", self.global_acc),
                ("mean_class_iou", self.mean_class_iou)]
        return "\n".join(f"{k:<18}  {v:.4f}" for k, v in rows)


def pair_eval(pred_labels, gt_labels, num_classes):
    """Accuracies and per-class IoU for integer label maps with background 0.

    Accepts a single map pair or two equal-length sequences of maps (scored
    as one pooled pixel set). Ground-truth background pixels are excluded
    from both accuracy counts; averages run over the classes present in the
    ground truth.
    """
    if num_classes < 1:
        raise InputError(f"num_classes must be >= 1, got {num_classes}")
    if isinstance(pred_labels, np.ndarray) or not isinstance(pred_labels, (list, tuple)):
        pred_labels = [pred_labels]
        gt_labels = [gt_labels]
    if len(pred_labels) != len(gt_labels):
        raise InputError("pred and gt lists must have the same length")
    preds, gts = [], []
    for p, g in zip(pred_labels, gt_labels):
        p = np.asarray(p)
        g = np.asarray(g)
        if p.shape != g.shape:
            raise InputError(f"label map shapes differ: {p.shape} vs {g.shape}")
        for name, arr in (("pred", p), ("gt", g)):
            if arr.min() < 0 or arr.max() > num_classes:
                raise InputError(f"{name} labels must lie in [0, {num_classes}]")
        preds.append(p.ravel())
        gts.append(g.ravel())
    pred = np.concatenate(preds)
    gt = np.concatenate(gts)
    fg = gt > 0
    if not fg.any():
        raise InputError("ground truth has no labeled pixels")
    global_acc = float((pred[fg] == gt[fg]).mean())
    classes = tuple(int(c) for c in np.unique(gt[fg]))
    accs = []
    ious = []
    for c in classes:
        in_gt = gt == c
        accs.append(float((pred[in_gt] == c).mean()))
        inter = int(np.logical_and(pred == c, in_gt).sum())
        union = int(np.logical_or(pred == c, in_gt).sum())
        ious.append(inter / union)
    return PairEvalReport(
        class_average_acc=float(np.mean(accs)),
        global_acc=global_acc,
        mean_class_iou=float(np.mean(ious)),
        classes_present=classes,
    )
