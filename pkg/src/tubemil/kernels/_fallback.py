"""Pure numpy versions of the compiled kernels.

Same arithmetic, same operation order, so results match the Cython build bit for bit.
"""
import numpy as np


def _iou_rows(box, boxes):
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = iw * ih
    union = (box[2] - box[0]) * (box[3] - box[1]) + (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) - inter
    ok = (iw > 0.0) & (ih > 0.0) & (union > 0.0)
    out = np.zeros(len(boxes), dtype=np.float64)
    np.divide(inter, union, out=out, where=ok)
    return out


def iou_one_to_many(box, boxes):
    box = np.asarray(box, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return _iou_rows(box, boxes)


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    out = np.empty((len(a), len(b)), dtype=np.float64)
    for i in range(len(a)):
        out[i] = _iou_rows(a[i], b)
    return out


def best_link(box, score, cand_boxes, cand_scores, lam, eta):
    u = iou_one_to_many(box, cand_boxes)
    passing = np.flatnonzero(u > lam)
    if passing.size == 0:
        return -1
    s = score + np.asarray(cand_scores, dtype=np.float64)[passing] + eta * u[passing]
    # argmax returns the first maximum, matching the compiled loop.
    return int(passing[int(np.argmax(s))])


def any_overlap(members, cand_boxes, lam):
    return (iou_matrix(members, cand_boxes) > lam).any(axis=0)
