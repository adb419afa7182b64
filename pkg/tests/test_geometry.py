import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmrt.geometry.homography import (
    HomographyError,
    RansacConfig,
    dlt,
    estimate_homography,
    normalize_points,
    reprojection_errors,
)
from fmrt.geometry.metrics import auc, ccm, corner_error, mma, mma_from_errors
from fmrt.geometry.synth import random_homography, synth_pair, warp_image
from fmrt.selftest import auc_reference


def apply_h(H, pts):
    hom = np.c_[pts, np.ones(len(pts))] @ H.T
    return hom[:, :2] / hom[:, 2:]


def random_h(rng, scale=1.0):
    H = np.eye(3) + scale * rng.normal(0, 0.05, (3, 3)) * np.array([[1, 1, 20], [1, 1, 20], [1e-3, 1e-3, 0]])
    return H / H[2, 2]


def bilinear_oracle(img, H):
    """Inverse-map each output pixel and interpolate four neighbours by hand; nan off the interior."""
    h, w = img.shape
    Hinv = np.linalg.inv(H)
    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            u, v, s = Hinv @ np.array([x, y, 1.0])
            u, v = u / s, v / s
            x0, y0 = int(np.floor(u)), int(np.floor(v))
            fx, fy = u - x0, v - y0
            if not (0 <= x0 < w - 1 and 0 <= y0 < h - 1):
                out[y, x] = np.nan
                continue
            acc = 0.0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    acc += wy * wx * img[y0 + dy, x0 + dx]
            out[y, x] = acc
    return out


class TestSynth:
    def test_identity_no_jitter(self):
        pair = synth_pair(3, 32, photometric=0.0, H=np.eye(3))
        np.testing.assert_array_equal(pair.img_a, pair.img_b)

    def test_same_seed_bitwise(self):
        a, b = synth_pair(11, 48), synth_pair(11, 48)
        np.testing.assert_array_equal(a.img_a, b.img_a)
        np.testing.assert_array_equal(a.img_b, b.img_b)
        np.testing.assert_array_equal(a.warp.H, b.warp.H)
        assert not np.array_equal(a.img_a, synth_pair(12, 48).img_a)

    def test_value_range(self):
        pair = synth_pair(5, 48, photometric=0.2)
        for img in (pair.img_a, pair.img_b):
            assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1

    def test_zero_magnitude(self):
        np.testing.assert_array_equal(random_homography(np.random.default_rng(0), 48, 0.0), np.eye(3))

    def test_indivisible(self):
        with pytest.raises(ValueError):
            synth_pair(0, 30)

    def test_corners_stay_in_frame(self):
        for seed in range(10):
            pair = synth_pair(seed, 48, warp_magnitude=3.0)
            corners = apply_h(pair.warp.H, np.array([[0, 0], [47, 0], [47, 47], [0, 47.0]]))
            inside = (corners >= 0).all(1) & (corners <= 47).all(1)
            assert inside.any()

    def test_warp_matches_hand_bilinear(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(size=(9, 11))
        H = random_h(rng)
        ref = bilinear_oracle(img, H)
        interior = ~np.isnan(ref)
        assert interior.sum() > 40
        np.testing.assert_allclose(warp_image(img, H)[interior], ref[interior], atol=1e-10)


class TestDLT:
    def test_minimal_exact(self):
        rng = np.random.default_rng(0)
        H = random_h(rng)
        src = np.array([[0, 0], [40, 2], [38, 45], [3, 41.0]])
        est = dlt(src, apply_h(H, src))
        assert np.abs(est / est[2, 2] - H).max() < 1e-6

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(4, 60))
    def test_overdetermined_exact_and_conditioning(self, seed, n):
        rng = np.random.default_rng(seed)
        H = random_h(rng)
        src = rng.uniform(0, 64, (n, 2))
        dst = apply_h(H, src)
        normalized = dlt(src, dst)
        raw = dlt(src, dst, normalize=False)
        assert np.abs(normalized - H).max() < 1e-6
        assert np.abs(raw - normalized).max() < 1e-6

    def test_normalization(self):
        pts = np.random.default_rng(1).uniform(0, 100, (20, 2))
        norm, T = normalize_points(pts)
        np.testing.assert_allclose(norm.mean(0), 0, atol=1e-12)
        np.testing.assert_allclose(np.sqrt((norm**2).sum(1)).mean(), np.sqrt(2), rtol=1e-12)
        np.testing.assert_allclose(apply_h(T, pts), norm, atol=1e-12)

    def test_collinear_degenerate(self):
        pts = np.stack([np.arange(6.0), 2 * np.arange(6.0)], axis=1)
        assert dlt(pts[:4], pts[:4] + 1) is None


class TestRansac:
    def test_outliers_rejected(self):
        rng = np.random.default_rng(0)
        H = random_h(rng)
        src_in = rng.uniform(0, 64, (20, 2))
        dst_in = apply_h(H, src_in)
        src_out = rng.uniform(0, 64, (10, 2))
        dst_out = rng.uniform(0, 64, (10, 2))
        far = np.linalg.norm(apply_h(H, src_out) - dst_out, axis=1) > 3
        src, dst = np.r_[src_in, src_out], np.r_[dst_in, dst_out]
        est, inliers = estimate_homography(src, dst, RansacConfig(threshold=3.0, seed=1))
        assert inliers[:20].all()
        assert not inliers[20:][far].any()
        assert np.abs(est - H).max() < 1e-6

    def test_collinear_fails(self):
        pts = np.stack([np.arange(10.0), 3 * np.arange(10.0) + 1], axis=1)
        with pytest.raises(HomographyError):
            estimate_homography(pts, pts * 2)

    def test_too_few(self):
        with pytest.raises(HomographyError):
            estimate_homography(np.zeros((3, 2)), np.zeros((3, 2)))

    def test_seeded_reproducible(self):
        rng = np.random.default_rng(2)
        src, dst = rng.uniform(0, 64, (30, 2)), rng.uniform(0, 64, (30, 2))
        a = estimate_homography(src, dst, RansacConfig(seed=5))
        b = estimate_homography(src, dst, RansacConfig(seed=5))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    def test_reprojection_errors(self):
        H = np.array([[1, 0, 2.0], [0, 1, 0], [0, 0, 1]])
        err = reprojection_errors(H, np.array([[0.0, 0.0]]), np.array([[2.0, 3.0]]))
        np.testing.assert_allclose(err, [3.0])


class TestCCM:
    def test_exact(self):
        H = random_h(np.random.default_rng(0))
        out = ccm(H, H, 64)
        assert out["corner_error"] == 0.0 and all(out["passes"].values())

    def test_two_pixel_translation(self):
        H = random_h(np.random.default_rng(1))
        T = np.array([[1, 0, 2.0], [0, 1, 0], [0, 0, 1]])
        out = ccm(T @ H, H, 64)
        np.testing.assert_allclose(out["corner_error"], 2.0, rtol=1e-12)
        assert out["passes"] == {1.0: False, 3.0: True, 5.0: True}

    def test_rotation_fails(self):
        c, s = 0.0, 1.0
        R = np.array([[c, -s, 63.0], [s, c, 0], [0, 0, 1]])
        assert not any(ccm(R, np.eye(3), 64)["passes"].values())

    def test_failed_estimate(self):
        assert not any(ccm(None, np.eye(3), 64)["passes"].values())
        assert corner_error(np.eye(3), np.eye(3), (32, 48)) == 0.0


class TestMMA:
    def test_exact_matches(self):
        pa = np.random.default_rng(0).uniform(0, 48, (5, 2))
        np.testing.assert_array_equal(mma(pa, pa, np.eye(3)), np.ones(10))

    def test_single_step(self):
        curve = mma(np.array([[0.0, 0.0]]), np.array([[4.5, 0.0]]), np.eye(3))
        np.testing.assert_array_equal(curve, [0, 0, 0, 0, 1, 1, 1, 1, 1, 1])

    def test_mixed_list(self):
        np.testing.assert_allclose(mma_from_errors([0.5, 2.5, 7.0]), [1 / 3, 1 / 3, 2 / 3, 2 / 3, 2 / 3, 2 / 3, 2 / 3, 1, 1, 1])

    def test_empty_is_absent(self):
        assert mma(np.zeros((0, 2)), np.zeros((0, 2)), np.eye(3)) is None

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 20), min_size=1, max_size=30))
    def test_monotone_unit_range(self, errors):
        curve = mma_from_errors(errors)
        assert ((curve >= 0) & (curve <= 1)).all() and (np.diff(curve) >= 0).all()


class TestAUC:
    def test_zero_errors(self):
        np.testing.assert_allclose(auc([0.0, 0.0, 0.0], [1, 5, 10]), 1.0)

    def test_all_above(self):
        np.testing.assert_array_equal(auc([11.0, 20.0], [1, 5, 10]), 0.0)

    def test_two_errors_at_five(self):
        # curve (0,0)-(1,.5)-(3,1) then flat at 1 to t=5:
        # 0.25 + 1.5 + 2.0 = 3.75, normalised by 5
        np.testing.assert_allclose(auc([1.0, 3.0], [5]), [0.75])

    def test_empty(self):
        with pytest.raises(ValueError):
            auc([], [5])

    def test_failures_as_inf(self):
        np.testing.assert_allclose(auc([0.0, np.inf], [5]), [0.5])

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.floats(0, 15), min_size=1, max_size=20), st.sampled_from([1, 3, 5, 10]))
    def test_against_segment_integration(self, errors, t):
        np.testing.assert_allclose(auc(errors, [t])[0], auc_reference(errors, t), atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 15), min_size=1, max_size=20), st.integers(0, 19), st.floats(0, 1))
    def test_monotone_in_errors(self, errors, idx, frac):
        idx %= len(errors)
        lowered = list(errors)
        lowered[idx] *= frac
        for t in (1, 3, 5, 10):
            a, b = auc(errors, [t])[0], auc(lowered, [t])[0]
            assert 0 <= a <= 1 and b >= a - 1e-12
