"""Anchor-box predictor: priors, box coding, matching, heads, loss and NMS.

Box conventions: "corner" boxes are (xmin, ymin, xmax, ymax), "center"
boxes are (cx, cy, w, h), everything normalised to the unit square.
Class ids are 0-based foreground ids; inside the heads/loss, index 0 is
background and foreground class c lives at index c + 1.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ValidationError
from .nets import Conv2d, Linear

log = logging.getLogger(__name__)


@dataclass
class PriorConfig:
    scales_featmap: list = field(default_factory=lambda: [0.15, 0.3])
    scales_global: list = field(default_factory=lambda: [0.6, 0.85])
    aspect_ratios: list = field(default_factory=lambda: [1.0, 2.0, 0.5])

    def __post_init__(self):
        self.scales_featmap = [float(s) for s in self.scales_featmap]
        self.scales_global = [float(s) for s in self.scales_global]
        self.aspect_ratios = [float(a) for a in self.aspect_ratios]
        if self.scales_featmap and self.scales_global and min(self.scales_global) <= max(self.scales_featmap):
            raise ValidationError("global prior scales must exceed every feature-map prior scale")

    @property
    def anchors_per_cell(self):
        return len(self.scales_featmap) * len(self.aspect_ratios)


@dataclass
class Detection:
    class_id: int
    score: float
    box: tuple


# -- priors ---------------------------------------------------------------------

def grid_priors(h, w, scales, aspect_ratios):
    """One prior per (scale, aspect) pair at every cell centre, cell-major order."""
    if h < 1 or w < 1:
        raise ValidationError(f"feature map must be at least 1x1, got {h}x{w}")
    shapes = [(s * np.sqrt(a), s / np.sqrt(a)) for s in scales for a in aspect_ratios]
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = ((jj + 0.5) / w).reshape(-1, 1)
    cy = ((ii + 0.5) / h).reshape(-1, 1)
    pw = np.array([s[0] for s in shapes])[None, :]
    ph = np.array([s[1] for s in shapes])[None, :]
    n, a = cx.shape[0], len(shapes)
    out = np.stack([np.broadcast_to(cx, (n, a)), np.broadcast_to(cy, (n, a)),
                    np.broadcast_to(pw, (n, a)), np.broadcast_to(ph, (n, a))], axis=-1)
    return np.clip(out.reshape(-1, 4), 0.0, 1.0)


def global_priors(scales):
    return np.clip(np.array([[0.5, 0.5, s, s] for s in scales], dtype=np.float64).reshape(-1, 4), 0.0, 1.0)


def generate_priors(featmap_h, featmap_w, config):
    """Feature-map priors followed by the global priors (centre form, clipped)."""
    if not config.scales_featmap and not config.scales_global:
        raise ValidationError("prior config has no scales")
    if config.scales_featmap and not config.aspect_ratios:
        raise ValidationError("prior config has no aspect ratios")
    parts = []
    if config.scales_featmap:
        parts.append(grid_priors(featmap_h, featmap_w, config.scales_featmap, config.aspect_ratios))
    parts.append(global_priors(config.scales_global))
    return np.concatenate(parts, axis=0)


# -- box geometry -------------------------------------------------------------------

def center_to_corner(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([b[..., :2] - b[..., 2:] / 2, b[..., :2] + b[..., 2:] / 2], axis=-1)


def corner_to_center(b):
    b = np.asarray(b, dtype=np.float64)
    return np.concatenate([(b[..., :2] + b[..., 2:]) / 2, b[..., 2:] - b[..., :2]], axis=-1)


def encode_box(gt, prior):
    """Offsets of corner box(es) ``gt`` relative to centre-form prior(s)."""
    g = corner_to_center(gt)
    p = np.asarray(prior, dtype=np.float64)
    if np.any(g[..., 2:] <= 0):
        raise ValidationError("cannot encode a degenerate ground-truth box (zero width or height)")
    return np.concatenate([(g[..., :2] - p[..., :2]) / p[..., 2:], np.log(g[..., 2:] / p[..., 2:])], axis=-1)


def decode_box(offsets, prior, clip=False):
    o = np.asarray(offsets, dtype=np.float64)
    p = np.asarray(prior, dtype=np.float64)
    c = np.concatenate([p[..., :2] + o[..., :2] * p[..., 2:], p[..., 2:] * np.exp(o[..., 2:])], axis=-1)
    b = center_to_corner(c)
    return np.clip(b, 0.0, 1.0) if clip else b


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(A, B):
    """Pairwise IoU of corner boxes, shape [len(A), len(B)]."""
    A = np.asarray(A, dtype=np.float64).reshape(-1, 4)
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    ix = np.clip(np.minimum(A[:, None, 2], B[None, :, 2]) - np.maximum(A[:, None, 0], B[None, :, 0]), 0, None)
    iy = np.clip(np.minimum(A[:, None, 3], B[None, :, 3]) - np.maximum(A[:, None, 1], B[None, :, 1]), 0, None)
    inter = ix * iy
    area_a = (A[:, 2] - A[:, 0]) * (A[:, 3] - A[:, 1])
    area_b = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


# -- matching ---------------------------------------------------------------------------

def match_priors(priors, truth, iou_threshold=0.5):
    """Assign every prior a target label (0 = background) and box offsets.

    Forced rule first: ground-truth boxes claim priors greedily in order of
    decreasing IoU (ties: lower gt index, then lower prior index), one prior
    per gt, so no gt is left without a prior while priors remain. Every
    other prior with IoU >= threshold to some gt takes its best gt (ties:
    lower gt index).

    Returns (labels [P], offsets [P, 4], matched_gt [P] with -1 for background).
    """
    priors = np.asarray(priors, dtype=np.float64).reshape(-1, 4)
    if not 0 < iou_threshold < 1:
        raise ValidationError(f"matching threshold must be in (0, 1), got {iou_threshold}")
    n_priors = len(priors)
    if n_priors == 0:
        raise ValidationError("no priors to match against")
    labels = np.zeros(n_priors, dtype=np.int64)
    offsets = np.zeros((n_priors, 4))
    matched = np.full(n_priors, -1, dtype=np.int64)
    n_gt = len(truth.boxes)
    if n_gt == 0:
        return labels, offsets, matched

    ious = iou_matrix(truth.boxes, center_to_corner(priors))
    best_gt = ious.argmax(axis=0)
    best_iou = ious[best_gt, np.arange(n_priors)]
    matched = np.where(best_iou >= iou_threshold, best_gt, -1)

    work = ious.copy()
    for _ in range(min(n_gt, n_priors)):
        g, p = np.unravel_index(np.argmax(work), work.shape)
        matched[p] = g
        work[g, :] = -1.0
        work[:, p] = -1.0

    pos = matched >= 0
    labels[pos] = truth.labels[matched[pos]] + 1
    offsets[pos] = encode_box(truth.boxes[matched[pos]], priors[pos])
    return labels, offsets, matched


# -- heads --------------------------------------------------------------------------------

class ConvHead:
    """3x3 conv localisation + classification heads over one feature map."""

    def __init__(self, in_ch, n_anchors, n_classes, rng):
        self.in_ch, self.n_anchors, self.n_classes = in_ch, n_anchors, n_classes
        self.loc = Conv2d(in_ch, 4 * n_anchors, 3, 1, 1, relu=False, rng=rng)
        self.cls = Conv2d(in_ch, (n_classes + 1) * n_anchors, 3, 1, 1, relu=False, rng=rng)

    def __call__(self, x):
        n = x.shape[0]
        loc = self.loc(x).transpose(0, 2, 3, 1).reshape((n, -1, 4))
        cls = self.cls(x).transpose(0, 2, 3, 1).reshape((n, -1, self.n_classes + 1))
        return loc, cls

    def parameters(self):
        return self.loc.parameters() + self.cls.parameters()


class AffineHead:
    """Maps the reduced vector z to (loc, cls) for the global priors."""

    def __init__(self, in_features, n_priors, n_classes, rng):
        self.in_features, self.n_priors, self.n_classes = in_features, n_priors, n_classes
        self.fc = Linear(in_features, n_priors * (4 + n_classes + 1), rng=rng)

    def __call__(self, z):
        n = z.shape[0]
        out = self.fc(z).reshape((n, self.n_priors, 4 + self.n_classes + 1))
        return out[:, :, :4], out[:, :, 4:]

    def parameters(self):
        return self.fc.parameters()


class Predictor:
    """Heads fed by the cut-off activation x^(l) and its reduced vector z."""

    def __init__(self, feat_shape, reduced_dim, n_classes, prior_config, rng):
        c, h, w = feat_shape
        self.feat_shape = tuple(feat_shape)
        self.reduced_dim = reduced_dim
        self.n_classes = n_classes
        self.prior_config = prior_config
        self.priors = generate_priors(h, w, prior_config)
        a = prior_config.anchors_per_cell
        g = len(prior_config.scales_global)
        self.conv_head = ConvHead(c, a, n_classes, rng) if a else None
        self.global_head = AffineHead(reduced_dim, g, n_classes, rng) if g else None
        n_expected = (h * w * a if a else 0) + g
        if n_expected != len(self.priors):
            raise ValidationError(f"heads serve {n_expected} priors but {len(self.priors)} were generated")

    def __call__(self, x_l, z):
        locs, clss = [], []
        if self.conv_head is not None:
            loc, cls = self.conv_head(x_l)
            locs.append(loc)
            clss.append(cls)
        if self.global_head is not None:
            if z.shape[1] != self.reduced_dim:
                raise ValidationError(f"global head expects z of size {self.reduced_dim}, got {z.shape[1]}")
            loc, cls = self.global_head(z)
            locs.append(loc)
            clss.append(cls)
        if len(locs) == 1:
            return locs[0], clss[0]
        return T.concat(locs, axis=1), T.concat(clss, axis=1)

    def parameters(self):
        ps = []
        for head in (self.conv_head, self.global_head):
            if head is not None:
                ps += head.parameters()
        return ps


def predictor_forward(x_l, z, predictor):
    return predictor(x_l, z)


# -- loss ---------------------------------------------------------------------------------

def _mine_negatives(cls_data, labels, neg_pos_ratio):
    """Boolean mask of the hardest background priors per image."""
    n = cls_data.shape[0]
    shifted = cls_data - cls_data.max(axis=-1, keepdims=True)
    bg_loss = np.log(np.exp(shifted).sum(axis=-1)) - shifted[..., 0]
    pos = labels > 0
    no_pos = not pos.any()
    mask = np.zeros_like(pos)
    for i in range(n):
        bg = np.flatnonzero(~pos[i])
        k = int(np.ceil(neg_pos_ratio)) if no_pos else int(neg_pos_ratio * pos[i].sum())
        k = min(k, len(bg))
        if k <= 0:
            continue
        order = np.argsort(-bg_loss[i, bg], kind="stable")
        mask[i, bg[order[:k]]] = True
    return mask


def multibox_terms(loc, cls, labels, targets, neg_pos_ratio=3.0):
    """(localisation term, classification term, number of positives).

    Both terms are divided by max(#positives, 1). Works on batched
    [N, P, ...] or single-image [P, ...] inputs.
    """
    labels = np.asarray(labels, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if loc.ndim == 2:
        loc = loc.reshape((1,) + loc.shape)
        cls = cls.reshape((1,) + cls.shape)
        labels, targets = labels[None], targets[None]
    if loc.shape[:2] != labels.shape or cls.shape[:2] != labels.shape:
        raise ValidationError(f"loss inputs disagree: loc {loc.shape}, cls {cls.shape}, labels {labels.shape}")
    pos = labels > 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        log.warning("batch without positive priors: classification-only loss over mined negatives")
    norm = 1.0 / max(n_pos, 1)

    neg = _mine_negatives(cls.data, labels, neg_pos_ratio)
    if n_pos:
        diff = loc[pos] - T.Tensor(targets[pos])
        loc_term = T.smooth_l1(diff).sum() * norm
    else:
        loc_term = T.Tensor(0.0)
    sel = pos | neg
    logp = T.log_softmax(cls[sel], axis=-1)
    picked = logp[np.arange(int(sel.sum())), labels[sel]]
    cls_term = -picked.sum() * norm
    return loc_term, cls_term, n_pos


def multibox_loss(loc, cls, labels, targets, neg_pos_ratio=3.0):
    """Smooth-L1 on matched offsets plus hard-negative-mined cross-entropy."""
    loc_term, cls_term, _ = multibox_terms(loc, cls, labels, targets, neg_pos_ratio)
    return loc_term + cls_term


# -- inference ---------------------------------------------------------------------------

def nms_indices(boxes, scores, classes, iou_threshold=0.45, score_threshold=0.01, max_out=100):
    """Greedy per-class suppression; returns kept indices, best score first.

    Order is score descending with ties going to the lower index. A box is
    dropped when its IoU with an already kept box of the same class is
    >= ``iou_threshold``.
    """
    if not 0 < iou_threshold < 1 or not 0 <= score_threshold < 1:
        raise ValidationError("nms thresholds must lie in (0, 1)")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    classes = np.asarray(classes).reshape(-1)
    order = np.lexsort((np.arange(len(scores)), -scores))
    order = order[scores[order] >= score_threshold]
    keep = []
    suppressed = np.zeros(len(scores), dtype=bool)
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(int(i))
        if len(keep) >= max_out:
            break
        rest = order[pos + 1:]
        rest = rest[(classes[rest] == classes[i]) & ~suppressed[rest]]
        if len(rest):
            suppressed[rest[iou_matrix(boxes[i], boxes[rest])[0] >= iou_threshold]] = True
    return keep


def nms(detections, iou_threshold=0.45, score_threshold=0.01, max_out=100):
    if not detections:
        return []
    boxes = [d.box for d in detections]
    keep = nms_indices(boxes, [d.score for d in detections], [d.class_id for d in detections],
                       iou_threshold, score_threshold, max_out)
    return [detections[i] for i in keep]


def postprocess(loc, cls, priors, score_threshold=0.01, iou_threshold=0.45, top_k=200, max_out=100):
    """Decode one image's raw outputs (numpy [P,4], [P,K+1]) into detections."""
    boxes = decode_box(loc, priors, clip=True)
    shifted = cls - cls.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    cand_boxes, cand_scores, cand_cls = [], [], []
    for c in range(1, cls.shape[1]):
        sc = np.where(valid, probs[:, c], 0.0)
        idx = np.flatnonzero(sc >= score_threshold)
        idx = idx[np.lexsort((idx, -sc[idx]))][:top_k]
        cand_boxes.append(boxes[idx])
        cand_scores.append(sc[idx])
        cand_cls.append(np.full(len(idx), c - 1))
    boxes = np.concatenate(cand_boxes)
    scores = np.concatenate(cand_scores)
    classes = np.concatenate(cand_cls)
    keep = nms_indices(boxes, scores, classes, iou_threshold, score_threshold, max_out)
    return [Detection(int(classes[i]), float(scores[i]), tuple(float(v) for v in boxes[i])) for i in keep]
