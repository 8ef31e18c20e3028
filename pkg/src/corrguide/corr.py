"""Correspondence estimation from a matching map, dominant-token filtering and
consensus-weighted displacement smoothing."""

from __future__ import annotations

import numpy as np

from .domain import CorrespondenceField, MatchingMap, Status


def estimate(c: MatchingMap) -> CorrespondenceField:
    """Arg-max reference token per target row; ties go to the smallest flat index."""
    shape = c.shape
    vals = c.values
    best = np.argmax(vals, axis=1)
    score = vals[np.arange(vals.shape[0]), best]
    matched = score > 0
    status = np.where(matched, Status.INLIER, Status.UNMATCHED).reshape(shape.h, shape.w)
    bi, bj = np.divmod(best, shape.w)
    coords = np.stack([np.where(matched, bi, -1), np.where(matched, bj, -1)], axis=-1)
    return CorrespondenceField(
        shape,
        status,
        coords.reshape(shape.h, shape.w, 2),
        np.where(matched, score, 0.0).reshape(shape.h, shape.w),
    )


def filter_outliers(p: CorrespondenceField, threshold: int = 4) -> CorrespondenceField:
    """Mark correspondences to dominant reference tokens (more than ``threshold``
    inlier correspondents) as outliers with zero consensus."""
    flat = p.flat_targets()
    inlier = p.status.reshape(-1) == Status.INLIER
    counts = np.bincount(flat[inlier], minlength=p.shape.n_half)
    dominant = counts > threshold
    hit = inlier & dominant[np.where(inlier, flat, 0)]
    hit = hit.reshape(p.shape.h, p.shape.w)
    status = np.where(hit, Status.OUTLIER, p.status)
    consensus = np.where(hit, 0.0, p.consensus)
    return CorrespondenceField(p.shape, status, p.coords, consensus)


def _window_sum(a: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the clipped square window of the given radius (leading two axes)."""
    h, w = a.shape[:2]
    pad = [(radius, radius), (radius, radius)] + [(0, 0)] * (a.ndim - 2)
    padded = np.pad(a, pad)
    out = np.zeros_like(a)
    for di in range(2 * radius + 1):
        for dj in range(2 * radius + 1):
            out += padded[di : di + h, dj : dj + w]
    return out


def smoothed_displacement(p: CorrespondenceField, win_s: int) -> tuple[np.ndarray, np.ndarray]:
    """Consensus-weighted neighbourhood mean of the displacement field.

    Returns ``(d_star, total_weight)``; ``d_star`` is zero where the total
    weight vanishes.
    """
    weight = np.where(p.status == Status.INLIER, p.consensus, 0.0)
    total = _window_sum(weight, win_s)
    weighted = _window_sum(p.displacement * weight[..., None], win_s)
    with np.errstate(invalid="ignore", divide="ignore"):
        d_star = np.where(total[..., None] > 0, weighted / total[..., None], 0.0)
    return d_star, total


def smooth(p: CorrespondenceField, win_s: int) -> CorrespondenceField:
    h, w = p.shape.h, p.shape.w
    d_star, total = smoothed_displacement(p, win_s)
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    target = np.floor(d_star + np.stack([ii, jj], axis=-1) + 0.5).astype(np.int64)
    target[..., 0] = np.clip(target[..., 0], 0, h - 1)
    target[..., 1] = np.clip(target[..., 1], 0, w - 1)

    outlier = p.status == Status.OUTLIER
    live = (total > 0) & ~outlier
    status = np.where(outlier, Status.OUTLIER, np.where(live, Status.INLIER, Status.UNMATCHED))
    coords = np.where(outlier[..., None], p.coords, np.where(live[..., None], target, -1))
    consensus = np.where(live & (p.status == Status.INLIER), p.consensus, 0.0)
    return CorrespondenceField(p.shape, status, coords, consensus)


def refine(p: CorrespondenceField, threshold: int, win_s: int, *, do_filter: bool = True, do_smooth: bool = True):
    if do_filter:
        p = filter_outliers(p, threshold)
    if do_smooth:
        p = smooth(p, win_s)
    return p
