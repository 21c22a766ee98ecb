"""Detection mean average precision (VOC style, all-points interpolation)."""

import math

import numpy as np

from .detector import iou_matrix


def average_precision(recall, precision):
    """Area under the monotone precision envelope, summed where recall changes."""
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return math.fsum((mrec[i + 1] - mrec[i]) * mpre[i + 1] for i in idx)


def class_ap(detections, truths, cls, iou_threshold=0.5):
    """AP of one class, or None if the class has no ground truth.

    ``detections`` is a per-image list of Detection lists, ``truths`` the
    matching GroundTruth list. Detections are ranked by score (ties keep
    image order, then list order); each is a TP if its best-IoU gt of the
    class reaches the threshold and is still unclaimed.
    """
    gts = [t.boxes[t.labels == cls] for t in truths]
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        return None
    cand = [(d.score, i, d.box) for i, dets in enumerate(detections) for d in dets if d.class_id == cls]
    order = sorted(range(len(cand)), key=lambda k: -cand[k][0])
    claimed = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(cand))
    for rank, k in enumerate(order):
        _, img, box = cand[k]
        if len(gts[img]) == 0:
            continue
        ious = iou_matrix(np.asarray(box), gts[img])[0]
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold and not claimed[img][j]:
            claimed[img][j] = True
            tp[rank] = 1.0
    if len(cand) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(cand) + 1)
    return average_precision(recall, precision)


def mean_average_precision(detections, truths, n_classes, iou_threshold=0.5):
    """Per-class AP (None for classes absent from ``truths``) and their mean."""
    aps = [class_ap(detections, truths, c, iou_threshold) for c in range(n_classes)]
    present = [a for a in aps if a is not None]
    m = math.fsum(present) / len(present) if present else 0.0
    return {"ap": aps, "map": m}
