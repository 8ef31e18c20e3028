import numpy as np
import pytest
from conftest import random_field
from hypothesis import given
from hypothesis import strategies as st

from corrguide.corr import estimate, filter_outliers, refine, smooth, smoothed_displacement
from corrguide.domain import CorrespondenceField, GridShape, MatchingMap, Status


def estimate_oracle(values, shape):
    """Per-row exhaustive scan; first strictly larger value wins."""
    out = []
    for row in values:
        best, score = -1, 0.0
        for k, v in enumerate(row):
            if v > score:
                best, score = k, v
        out.append((best, score))
    return out


def filter_oracle(p: CorrespondenceField, threshold):
    n = p.shape.n_half
    flat = p.flat_targets()
    status = p.status.reshape(-1).copy()
    for r in range(n):
        hits = [q for q in range(n) if status[q] == Status.INLIER and flat[q] == r]
        if len(hits) > threshold:
            for q in hits:
                status[q] = Status.OUTLIER
    return status.reshape(p.shape.h, p.shape.w)


def test_estimate_one_hot():
    shape = GridShape(2, 3)
    perm = np.array([4, 0, 5, 1, 3, 2])
    c = MatchingMap(shape, np.eye(6)[perm])
    p = estimate(c)
    assert np.array_equal(p.flat_targets(), perm)
    assert np.all(p.consensus == 1.0)


def test_estimate_tie_breaks_to_smallest_index():
    shape = GridShape(2, 4)
    vals = np.zeros((8, 8))
    vals[:, 0] = 0.1
    vals[0, 3] = vals[0, 5] = 0.7
    p = estimate(MatchingMap(shape, vals))
    assert p.flat_targets()[0] == 3


def test_estimate_all_zero_row_unmatched():
    shape = GridShape(2, 2)
    vals = np.eye(4)
    vals[2] = 0
    p = estimate(MatchingMap(shape, vals))
    assert p.status[1, 0] == Status.UNMATCHED
    assert p.consensus[1, 0] == 0


@pytest.mark.parametrize("seed", range(20))
def test_estimate_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = GridShape(6, 6)
    vals = rng.integers(0, 4, (36, 36)).astype(float)
    p = estimate(MatchingMap(shape, vals))
    for q, (best, score) in enumerate(estimate_oracle(vals, shape)):
        assert p.flat_targets()[q] == best
        assert p.consensus.reshape(-1)[q] == score


@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_estimate_scale_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    shape = GridShape(4, 4)
    vals = rng.random((16, 16))
    a = estimate(MatchingMap(shape, vals))
    b = estimate(MatchingMap(shape, alpha * vals))
    assert np.array_equal(a.flat_targets(), b.flat_targets())


def _many_to_one(k):
    shape = GridShape(4, 4)
    pairs = {(0, j): (2, 2) for j in range(4)}
    pairs.update({(1, j): (1, j) for j in range(4)})
    if k == 5:
        pairs[(1, 0)] = (2, 2)
    return shape, CorrespondenceField.from_pairs(shape, inliers=pairs)


def test_filter_threshold_is_strict():
    _, p5 = _many_to_one(5)
    f5 = filter_outliers(p5, 4)
    assert (f5.status == Status.OUTLIER).sum() == 5
    assert np.all(f5.consensus[f5.status == Status.OUTLIER] == 0)
    _, p4 = _many_to_one(4)
    assert not (filter_outliers(p4, 4).status == Status.OUTLIER).any()


@pytest.mark.parametrize("seed", range(20))
def test_filter_matches_counting_oracle(seed):
    rng = np.random.default_rng(seed)
    shape = GridShape(8, 8)
    p = random_field(rng, shape, p_outlier=0.0)
    # concentrate some rows to create dominant tokens
    coords = p.coords.copy()
    hot = rng.random((8, 8)) < 0.3
    coords[hot & (p.status == Status.INLIER)] = (3, 4)
    p = CorrespondenceField(shape, p.status, coords, p.consensus)
    for thr in (1, 2, 4):
        assert np.array_equal(filter_outliers(p, thr).status, filter_oracle(p, thr))


@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_filter_properties(seed, thr):
    rng = np.random.default_rng(seed)
    p = random_field(rng, GridShape(5, 5))
    f = filter_outliers(p, thr)
    was_in = p.status == Status.INLIER
    now_in = f.status == Status.INLIER
    assert not np.any(now_in & ~was_in)
    assert np.array_equal(f.coords[now_in], p.coords[now_in])
    counts = np.bincount(f.flat_targets()[now_in.reshape(-1)], minlength=25)
    assert counts.max(initial=0) <= thr


def test_smooth_hand_example():
    shape = GridShape(8, 8)
    inliers = {(i, j): (i + 1, j) for i in range(3) for j in range(3)}
    inliers[(1, 1)] = (6, 6)
    p = CorrespondenceField.from_pairs(shape, inliers=inliers)
    d_star, total = smoothed_displacement(p, 1)
    assert total[1, 1] == 9
    assert abs(d_star[1, 1, 0] - 13 / 9) < 1e-12
    assert abs(d_star[1, 1, 1] - 5 / 9) < 1e-12
    s = smooth(p, 1)
    assert tuple(s.coords[1, 1]) == (2, 2)
    assert tuple(s.displacement[1, 1]) == (1, 1)


@given(st.integers(0, 2**32 - 1), st.integers(-2, 2), st.integers(-2, 2), st.integers(0, 3))
def test_smooth_uniform_is_identity(seed, di, dj, win):
    rng = np.random.default_rng(seed)
    shape = GridShape(6, 6)
    ii, jj = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    coords = np.stack([np.clip(ii + di, 0, 5), np.clip(jj + dj, 0, 5)], axis=-1)
    inside = (ii + di == coords[..., 0]) & (jj + dj == coords[..., 1])
    # restrict to tokens whose shifted target stays in bounds, so D is uniform
    status = np.where(inside, Status.INLIER, Status.UNMATCHED)
    coords = np.where(inside[..., None], coords, -1)
    consensus = np.where(inside, rng.random((6, 6)) + 0.1, 0.0)
    p = CorrespondenceField(shape, status, coords, consensus)
    s = smooth(p, win)
    assert np.array_equal(s.coords[inside], p.coords[inside])
    assert np.array_equal(smooth(s, win).coords[inside], s.coords[inside])


def test_smooth_isolated_by_outliers_becomes_unmatched():
    shape = GridShape(4, 4)
    outliers = {(i, j): (0, 0) for i in range(3) for j in range(3) if (i, j) != (1, 1)}
    p = CorrespondenceField.from_pairs(shape, outliers=outliers)
    # centre has an inlier entry with zero consensus
    status = p.status.copy()
    coords = p.coords.copy()
    status[1, 1] = Status.INLIER
    coords[1, 1] = (2, 2)
    p = CorrespondenceField(shape, status, coords, np.zeros((4, 4)))
    s = smooth(p, 1)
    assert s.status[1, 1] == Status.UNMATCHED
    assert np.array_equal(s.coords[s.status == Status.OUTLIER], p.coords[p.status == Status.OUTLIER])


@given(st.integers(0, 2**32 - 1), st.integers(0, 3))
def test_smoothed_displacement_is_convex(seed, win):
    rng = np.random.default_rng(seed)
    shape = GridShape(6, 6)
    p = random_field(rng, shape)
    d_star, total = smoothed_displacement(p, win)
    inl = p.status == Status.INLIER
    for i in range(6):
        for j in range(6):
            if total[i, j] == 0:
                continue
            sl = (slice(max(i - win, 0), i + win + 1), slice(max(j - win, 0), j + win + 1))
            disp = p.displacement[sl][inl[sl]]
            assert np.all(d_star[i, j] >= disp.min(axis=0) - 1e-12)
            assert np.all(d_star[i, j] <= disp.max(axis=0) + 1e-12)


def test_refine_toggles():
    _, p = _many_to_one(5)
    assert refine(p, 4, 2, do_filter=False, do_smooth=False) is p
    assert (refine(p, 4, 2, do_smooth=False).status == Status.OUTLIER).sum() == 5
