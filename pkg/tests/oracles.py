"""Independent reference implementations used only by the tests.

None of these share code with the package paths they check.
"""

import math

import numpy as np


def naive_conv2d(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for ni in range(n):
        for fi in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = b[fi]
                    for ci in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[ni, ci, i * stride + di, j * stride + dj] * w[fi, ci, di, dj]
                    out[ni, fi, i, j] = acc
    return out


def finite_difference(f, arr, h=1e-5):
    """Central differences of scalar f() w.r.t. every entry of ``arr`` (mutated in place, restored)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def jacobi_eigenvalues(A, tol=1e-14, max_sweeps=100):
    """Cyclic two-sided Jacobi eigenvalue iteration for a symmetric matrix."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    for _ in range(max_sweeps):
        off = math.sqrt(sum(A[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * max(np.linalg.norm(A), 1e-300):
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if A[p, q] == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2 * A[p, q])
                t = (1.0 if theta >= 0 else -1.0) / (abs(theta) + math.sqrt(theta * theta + 1))
                c = 1 / math.sqrt(t * t + 1)
                s = t * c
                R = np.eye(n)
                R[p, p] = R[q, q] = c
                R[p, q] = s
                R[q, p] = -s
                A = R.T @ A @ R
    return np.sort(np.diag(A))[::-1]


def box_area(b):
    return (b[2] - b[0]) * (b[3] - b[1])


def shapely_iou(a, b):
    from shapely.geometry import box

    pa, pb = box(*a), box(*b)
    inter = pa.intersection(pb).area
    union = pa.union(pb).area
    return inter / union if union > 0 else 0.0


def plain_iou(a, b):
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (box_area(a) + box_area(b) - inter)


def brute_nms(boxes, scores, classes, iou_thr, score_thr, max_out):
    """Keep i iff no higher-priority kept box of the same class overlaps it by >= iou_thr."""
    n = len(scores)
    pri = sorted(range(n), key=lambda i: (-scores[i], i))
    ious = [[plain_iou(boxes[i], boxes[j]) for j in range(n)] for i in range(n)]
    kept = []
    for i in pri:
        if scores[i] < score_thr:
            continue
        if all(not (classes[j] == classes[i] and ious[i][j] >= iou_thr) for j in kept):
            kept.append(i)
    return kept[:max_out]


def brute_match(priors_corner, gt_boxes, gt_labels, thr):
    """Nested-loop prior assignment: threshold pass, then greedy forced best pairs."""
    P, G = len(priors_corner), len(gt_boxes)
    ious = [[plain_iou(gt_boxes[g], priors_corner[p]) for p in range(P)] for g in range(G)]
    matched = [-1] * P
    for p in range(P):
        best, best_g = -1.0, -1
        for g in range(G):
            if ious[g][p] > best:
                best, best_g = ious[g][p], g
        if G and best >= thr:
            matched[p] = best_g
    used_g, used_p = set(), set()
    for _ in range(min(P, G)):
        best, pair = -2.0, None
        for g in range(G):
            if g in used_g:
                continue
            for p in range(P):
                if p in used_p:
                    continue
                if ious[g][p] > best:
                    best, pair = ious[g][p], (g, p)
        g, p = pair
        matched[p] = g
        used_g.add(g)
        used_p.add(p)
    labels = [0 if m < 0 else int(gt_labels[m]) + 1 for m in matched]
    return labels, matched


def brute_map(detections, truths, n_classes, thr=0.5):
    """mAP from first principles: explicit TP/FP loop and suffix-max precision envelope."""
    aps = []
    for c in range(n_classes):
        gts = [[tuple(b) for b, l in zip(t.boxes, t.labels) if l == c] for t in truths]
        n_gt = sum(len(g) for g in gts)
        if n_gt == 0:
            aps.append(None)
            continue
        cand = []
        for i, dets in enumerate(detections):
            for d in dets:
                if d.class_id == c:
                    cand.append((d.score, i, d.box))
        cand = sorted(cand, key=lambda t: -t[0])
        used = [[False] * len(g) for g in gts]
        flags = []
        for score, i, box in cand:
            best, bj = -1.0, -1
            for j, g in enumerate(gts[i]):
                v = plain_iou(box, g)
                if v > best:
                    best, bj = v, j
            if bj >= 0 and best >= thr and not used[i][bj]:
                used[i][bj] = True
                flags.append(1)
            else:
                flags.append(0)
        if not cand:
            aps.append(0.0)
            continue
        rec, prec, tp = [], [], 0
        for k, f in enumerate(flags):
            tp += f
            rec.append(tp / n_gt)
            prec.append(tp / (k + 1))
        terms, prev_r = [], 0.0
        rec_pts = rec + [1.0]
        prec_pts = prec + [0.0]
        for k in range(len(rec_pts)):
            if rec_pts[k] != prev_r:
                terms.append((rec_pts[k] - prev_r) * max(prec_pts[k:]))
                prev_r = rec_pts[k]
        aps.append(math.fsum(terms))
    present = [a for a in aps if a is not None]
    return aps, (math.fsum(present) / len(present) if present else 0.0)
