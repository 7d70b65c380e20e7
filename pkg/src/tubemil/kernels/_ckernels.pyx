# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled IoU and linking kernels used by the tube builder.

Every function mirrors one in ``_fallback.py`` and must return identical values.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _iou(const double[:] a, const double[:] b) noexcept nogil:
    cdef double iw = min(a[2], b[2]) - max(a[0], b[0])
    cdef double ih = min(a[3], b[3]) - max(a[1], b[1])
    cdef double inter, union
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_one_to_many(const double[:] box, const double[:, :] boxes):
    cdef Py_ssize_t n = boxes.shape[0], j
    out = np.empty(n, dtype=np.float64)
    cdef double[:] o = out
    with nogil:
        for j in range(n):
            o[j] = _iou(box, boxes[j])
    return out


def iou_matrix(const double[:, :] a, const double[:, :] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, :] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(a[i], b[j])
    return out


def best_link(const double[:] box, double score, const double[:, :] cand_boxes,
              const double[:] cand_scores, double lam, double eta):
    """Index of the candidate with maximal linking score among those whose IoU
    exceeds ``lam``; the first maximum wins; -1 when no candidate passes."""
    cdef Py_ssize_t n = cand_boxes.shape[0], j, best = -1
    cdef double u, s, best_s = 0.0
    with nogil:
        for j in range(n):
            u = _iou(box, cand_boxes[j])
            if u > lam:
                s = score + cand_scores[j] + eta * u
                if best < 0 or s > best_s:
                    best = j
                    best_s = s
    return best


def any_overlap(const double[:, :] members, const double[:, :] cand_boxes, double lam):
    """Mask of candidates whose IoU with at least one member exceeds ``lam``."""
    cdef Py_ssize_t k = members.shape[0], n = cand_boxes.shape[0], i, j
    out = np.zeros(n, dtype=np.bool_)
    cdef cnp.npy_bool[:] o = out
    with nogil:
        for j in range(n):
            for i in range(k):
                if _iou(members[i], cand_boxes[j]) > lam:
                    o[j] = 1
                    break
    return out
