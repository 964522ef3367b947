import numpy as np
import pytest

from gridpinn.sobol import MAX_DIM, SobolSampler, scale_to


def test_points_in_unit_cube():
    s = SobolSampler(21)
    pts = s.next_batch(10_000)
    assert pts.shape == (10_000, 21)
    assert pts.min() >= 0.0 and pts.max() < 1.0


def test_deterministic_from_reset():
    s = SobolSampler(8)
    a = s.next_batch(100)
    s.reset()
    b = s.next_batch(100)
    assert np.array_equal(a, b)


def test_matches_scipy_sequence():
    # same Joe-Kuo direction numbers as the scipy implementation
    from scipy.stats import qmc

    for d in (1, 2, 6, 21, 32):
        mine = SobolSampler(d).next_batch(256)
        ref = qmc.Sobol(d=d, scramble=False).random(256)
        assert np.abs(mine - ref).max() == 0.0


def test_skip_equals_sequential_advance():
    for n in (0, 1, 17, 1000):
        jumped = SobolSampler(5).skip(n).next()
        walked = SobolSampler(5).next_batch(n + 1)[-1]
        assert np.array_equal(jumped, walked)


def test_dimension_bounds():
    with pytest.raises(ValueError):
        SobolSampler(0)
    with pytest.raises(ValueError):
        SobolSampler(MAX_DIM + 1)


def star_discrepancy_estimate(pts: np.ndarray) -> float:
    """Lower-bound estimate of the star discrepancy on the point-induced grid."""
    n = pts.shape[0]
    xs = np.sort(np.unique(np.concatenate([pts[:, 0], [1.0]])))
    ys = np.sort(np.unique(np.concatenate([pts[:, 1], [1.0]])))
    best = 0.0
    for x in xs[:: max(1, len(xs) // 64)]:
        inside_x = pts[:, 0] < x
        for y in ys[:: max(1, len(ys) // 64)]:
            frac = np.count_nonzero(inside_x & (pts[:, 1] < y)) / n
            best = max(best, abs(frac - x * y))
    return best


def test_lower_discrepancy_than_uniform():
    sob = SobolSampler(2).next_batch(1024)
    uni = np.random.default_rng(123).random((1024, 2))
    assert star_discrepancy_estimate(sob) < star_discrepancy_estimate(uni)


def test_scale_to_respects_bounds():
    lo = np.array([-5.0, 0.0, 2.0])
    hi = np.array([5.0, 1.0, 4.0])
    pts = SobolSampler(3).next_batch(500)
    scaled = scale_to(pts, lo, hi)
    assert np.all(scaled >= lo) and np.all(scaled <= hi)
    # affine round trip
    back = (scaled - lo) / (hi - lo)
    assert np.allclose(back, pts, atol=1e-12)


def test_first_points_structure():
    # the second point of every dimension is 1/2
    pts = SobolSampler(4).next_batch(2)
    assert np.all(pts[0] == 0.0)
    assert np.all(pts[1] == 0.5)
