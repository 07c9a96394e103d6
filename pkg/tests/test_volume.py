import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from tempreg.deform import DisplacementField
from tempreg.errors import DataError, GridMismatchError, NonFiniteError
from tempreg.volume import (
    LabelMap,
    Volume3,
    downsample_by_two,
    gaussian_kernel,
    gaussian_smooth,
    pyramid,
    resample_to_isotropic,
    trilinear_sample,
    warp_labels,
    warp_volume,
)


def brute_trilinear(data, p, background=0.0):
    """Straight loop over the 8 neighbours with explicit weights.

    Points within 1e-6 voxel of the grid edge count as inside (rounding slack).
    """
    if any(c < -1e-6 or c > n - 1 + 1e-6 for c, n in zip(p, data.shape)):
        return background
    p = [min(max(c, 0.0), n - 1.0) for c, n in zip(p, data.shape)]
    total = 0.0
    base = [min(int(np.floor(c)), max(n - 2, 0)) for c, n in zip(p, data.shape)]
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                idx = (base[0] + dx, base[1] + dy, base[2] + dz)
                if any(i >= n for i, n in zip(idx, data.shape)):
                    continue
                w = 1.0
                for a, d in enumerate((dx, dy, dz)):
                    f = p[a] - base[a]
                    w *= f if d else 1.0 - f
                total += w * data[idx]
    return total


class TestVolume3:
    def test_rejects_non_finite(self):
        d = np.zeros((4, 4, 4))
        d[1, 2, 3] = np.nan
        with pytest.raises(NonFiniteError):
            Volume3(d)

    def test_rejects_bad_spacing_and_shape(self):
        with pytest.raises(DataError):
            Volume3(np.zeros((4, 4)))
        with pytest.raises(DataError):
            Volume3(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))

    def test_dims_and_dtype(self):
        v = Volume3(np.ones((3, 4, 5), dtype=np.int32))
        assert v.dims == (3, 4, 5)
        assert v.data.dtype == np.float64


class TestLabelMap:
    def test_background_name_reserved(self):
        with pytest.raises(DataError):
            LabelMap(np.zeros((2, 2, 2), int), label_names={0: "air"})

    def test_negative_rejected(self):
        with pytest.raises(DataError):
            LabelMap(-np.ones((2, 2, 2), int))

    def test_labels_listing(self):
        lab = LabelMap(np.array([0, 1, 3, 3, 0, 1, 1, 0]).reshape(2, 2, 2), label_names={2: "x"})
        assert lab.labels() == [1, 2, 3]


class TestTrilinear:
    def test_node_value(self, rng):
        vol = Volume3(rng.standard_normal((5, 6, 7)))
        assert trilinear_sample(vol, (2, 3, 4)) == vol.data[2, 3, 4]

    def test_midpoint(self):
        d = np.zeros((2, 2, 2))
        d[1, 0, 0] = 2.0
        assert trilinear_sample(Volume3(d), (0.5, 0, 0)) == pytest.approx(1.0)

    def test_outside_returns_background(self):
        vol = Volume3(np.ones((3, 3, 3)), background=0.0)
        assert trilinear_sample(vol, (-5, 0, 0)) == 0.0
        assert trilinear_sample(Volume3(np.ones((3, 3, 3)), background=7.0), (0, 3.5, 0)) == 7.0

    def test_non_finite_point(self):
        with pytest.raises(NonFiniteError):
            trilinear_sample(Volume3(np.ones((3, 3, 3))), (np.nan, 0, 0))

    @settings(max_examples=60, deadline=None)
    @given(st.tuples(*[st.floats(-1.0, 6.0, allow_nan=False)] * 3), st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, p, seed):
        data = np.random.default_rng(seed).standard_normal((4, 5, 6))
        got = trilinear_sample(Volume3(data), p)
        assert got == pytest.approx(brute_trilinear(data, p), abs=1e-12)

    def test_lipschitz_on_ramp(self):
        x = np.indices((8, 8, 8))[0].astype(float)
        vol = Volume3(3.0 * x)
        eps = 1e-3
        for p in [(1.2, 3.3, 4.4), (5.9, 1.0, 0.5)]:
            a = trilinear_sample(vol, p)
            b = trilinear_sample(vol, (p[0] + eps, p[1], p[2]))
            assert abs(b - a) <= 3.0 * eps + 1e-12


class TestWarp:
    def test_zero_field_is_exact(self, rng):
        vol = Volume3(rng.standard_normal((6, 7, 8)))
        out = warp_volume(vol, DisplacementField.zeros(vol.dims))
        assert np.array_equal(out.data, vol.data)

    def test_pull_back_shift(self):
        d = np.zeros((12, 5, 5))
        d[5, 2, 2] = 1.0
        field = np.zeros((12, 5, 5, 3))
        field[..., 0] = -1.0
        out = warp_volume(Volume3(d), DisplacementField(field)).data
        # brute-force oracle: out[x] = d[x - 1]
        oracle = np.zeros_like(d)
        for i in range(12):
            if 0 <= i - 1 < 12:
                oracle[i] = d[i - 1]
        assert np.allclose(out, oracle)
        assert out[6, 2, 2] == 1.0

    def test_everything_outside_is_background(self):
        vol = Volume3(np.ones((4, 4, 4)), background=-3.0)
        field = np.full((4, 4, 4, 3), 100.0)
        assert np.all(warp_volume(vol, DisplacementField(field)).data == -3.0)

    def test_clamp_mode_extends_edges(self):
        x = np.indices((6, 4, 4))[0].astype(float)
        field = np.zeros((6, 4, 4, 3))
        field[..., 0] = 10.0
        out = warp_volume(Volume3(x), DisplacementField(field), clamp=True)
        assert np.all(out.data == 5.0)

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            warp_volume(Volume3(np.ones((4, 4, 4))), DisplacementField.zeros((4, 4, 5)))


class TestWarpLabels:
    def test_nearest_neighbour_shift(self):
        lab = np.zeros((8, 4, 4), int)
        lab[2:4] = 1
        field = np.zeros((8, 4, 4, 3))
        field[..., 0] = -2.0
        out = warp_labels(LabelMap(lab), DisplacementField(field)).data
        assert np.array_equal(np.where(out[:, 0, 0] == 1)[0], [4, 5])
        assert np.all(out[:2] == 0)

    def test_grid_mismatch(self):
        with pytest.raises(GridMismatchError):
            warp_labels(LabelMap(np.zeros((4, 4, 4), int)), DisplacementField.zeros((4, 4, 3)))


class TestSmoothing:
    def test_sigma_zero_identity(self, rng):
        vol = Volume3(rng.standard_normal((5, 5, 5)))
        assert gaussian_smooth(vol, 0.0).data is vol.data or np.array_equal(gaussian_smooth(vol, 0.0).data, vol.data)

    def test_constant_preserved(self):
        vol = Volume3(np.full((7, 8, 9), 4.25))
        assert np.allclose(gaussian_smooth(vol, 1.7).data, 4.25, atol=1e-6)

    def test_impulse_mass(self):
        d = np.zeros((15, 15, 15))
        d[7, 7, 7] = 1.0
        assert gaussian_smooth(Volume3(d), 1.0).data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_kernel_truncation_and_norm(self):
        k = gaussian_kernel(1.3)
        assert k.size == 2 * int(np.ceil(3 * 1.3)) + 1
        assert k.sum() == pytest.approx(1.0)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_smooth(Volume3(np.ones((3, 3, 3))), -1.0)

    def test_interior_mean_preserved(self, rng):
        d = np.zeros((24, 24, 24))
        d[8:16, 8:16, 8:16] = rng.random((8, 8, 8))
        out = gaussian_smooth(Volume3(d), 1.5).data
        assert out.mean() == pytest.approx(d.mean(), rel=1e-5)


class TestResample:
    def test_same_spacing(self, rng):
        vol = Volume3(rng.standard_normal((5, 6, 7)), spacing=(2.0, 2.0, 2.0))
        out = resample_to_isotropic(vol, 2.0)
        assert out.dims == vol.dims
        assert np.allclose(out.data, vol.data, atol=1e-6)

    def test_anisotropic_extent(self):
        vol = Volume3(np.ones((10, 10, 6)), spacing=(3.0, 3.0, 6.0))
        out = resample_to_isotropic(vol, 3.0)
        # extent 36 mm along z / 3 mm = 12 voxels
        assert out.dims == (10, 10, 12)
        assert out.spacing == (3.0, 3.0, 3.0)
        assert np.allclose(out.data, 1.0)

    def test_extent_within_one_voxel(self):
        vol = Volume3(np.zeros((7, 9, 5)), spacing=(1.3, 0.7, 2.9))
        out = resample_to_isotropic(vol, 1.1)
        for n, s, m in zip(vol.dims, vol.spacing, out.dims):
            assert abs(n * s - m * 1.1) <= 1.1


class TestPyramid:
    def test_downsample_dims_and_spacing(self):
        out = downsample_by_two(Volume3(np.ones((8, 8, 8))))
        assert out.dims == (4, 4, 4)
        assert out.spacing == (2.0, 2.0, 2.0)
        assert np.allclose(out.data, 1.0)

    def test_impulse_matches_two_step_oracle(self):
        d = np.zeros((9, 10, 11))
        d[4, 5, 6] = 1.0
        out = downsample_by_two(Volume3(d)).data
        k = gaussian_kernel(1.0)
        sm = d
        for axis in range(3):
            sm = ndimage.correlate1d(sm, k, axis=axis, mode="nearest")
        assert np.allclose(out, sm[::2, ::2, ::2], atol=1e-12)

    def test_too_small(self):
        with pytest.raises(DataError):
            downsample_by_two(Volume3(np.ones((1, 4, 4))))

    def test_pyramid_order(self):
        levels = pyramid(Volume3(np.ones((16, 16, 16))), 3)
        assert [lv.dims for lv in levels] == [(4, 4, 4), (8, 8, 8), (16, 16, 16)]
