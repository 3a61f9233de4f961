"""Grid primitives: blur mass accounting, pooling, dihedral group, PDM1 io."""

import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panicle.errors import FormatError, ParameterError, ShapeError
from panicle.grid import (
    PixelCoord,
    RasterGrid,
    dihedral_inverse,
    dihedral_shape,
    dihedral_transform,
    dihedral_transform_array,
    dihedral_transform_point,
    gaussian_blur,
    gaussian_kernel_1d,
    nearest_upsample,
    pdm1_bytes,
    read_pdm1,
    sum_pool,
    write_pdm1,
)


def brute_blur(plane: np.ndarray, sigma: float) -> np.ndarray:
    """Direct O(HWk^2) zero-padded Gaussian convolution, kernel built from scratch."""
    radius = int(4.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k1 = np.exp(-(xs**2) / (2.0 * sigma**2))
    k1 /= k1.sum()
    k2 = np.outer(k1, k1)
    h, w = plane.shape
    out = np.zeros_like(plane)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for di in range(-radius, radius + 1):
                for dj in range(-radius, radius + 1):
                    si, sj = i + di, j + dj
                    if 0 <= si < h and 0 <= sj < w:
                        acc += k2[di + radius, dj + radius] * plane[si, sj]
            out[i, j] = acc
    return out


class TestRasterGrid:
    def test_shape_and_accessors(self):
        g = RasterGrid.from_array(np.arange(12.0).reshape(3, 4))
        assert (g.height, g.width, g.channels) == (3, 4, 1)
        assert g.total == pytest.approx(66.0)
        assert g.plane().shape == (3, 4)

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            RasterGrid(np.zeros(5))
        with pytest.raises(ShapeError):
            RasterGrid(np.zeros((0, 3, 1)))

    def test_rejects_non_finite(self):
        bad = np.zeros((2, 2, 1))
        bad[0, 0, 0] = np.nan
        with pytest.raises(ParameterError):
            RasterGrid(bad)

    def test_plane_channel_bounds(self):
        g = RasterGrid(np.zeros((2, 2, 3)))
        assert g.plane(2).shape == (2, 2)
        with pytest.raises(ShapeError):
            g.plane(3)


class TestGaussianBlur:
    def test_kernel_normalized_and_symmetric(self):
        k = gaussian_kernel_1d(2.0)
        assert k.size == 2 * 8 + 1
        assert k.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.allclose(k, k[::-1])

    def test_zero_grid_stays_zero(self):
        g = RasterGrid.from_array(np.zeros((16, 16)))
        assert gaussian_blur(g, 2.0).total == 0.0

    def test_center_impulse_keeps_unit_mass(self):
        plane = np.zeros((65, 65))
        plane[32, 32] = 1.0
        out = gaussian_blur(RasterGrid.from_array(plane), 2.0)
        assert out.total == pytest.approx(1.0, abs=1e-9)

    def test_corner_impulse_loses_mass_per_oracle(self):
        plane = np.zeros((20, 20))
        plane[0, 0] = 1.0
        out = gaussian_blur(RasterGrid.from_array(plane), 2.0)
        expect = brute_blur(plane, 2.0)
        assert out.total < 1.0
        # Corner keeps roughly a quadrant of the kernel mass.
        assert out.total == pytest.approx(expect.sum(), abs=1e-12)
        assert np.allclose(out.plane(), expect, atol=1e-12)

    def test_matches_bruteforce_on_random_grid(self):
        rng = np.random.default_rng(3)
        plane = rng.uniform(0.0, 5.0, size=(12, 9))
        out = gaussian_blur(RasterGrid.from_array(plane), 1.5)
        assert np.allclose(out.plane(), brute_blur(plane, 1.5), atol=1e-10)

    def test_rejects_bad_inputs(self):
        g = RasterGrid.from_array(np.zeros((4, 4)))
        with pytest.raises(ParameterError):
            gaussian_blur(g, 0.0)
        with pytest.raises(ShapeError):
            gaussian_blur(RasterGrid(np.zeros((4, 4, 2))), 1.0)

    @given(st.integers(0, 2**32 - 1), st.floats(0.5, 4.0))
    @settings(max_examples=25, deadline=None)
    def test_nonnegativity_and_mass_bound(self, seed, sigma):
        rng = np.random.default_rng(seed)
        plane = rng.uniform(0.0, 3.0, size=(11, 13))
        out = gaussian_blur(RasterGrid.from_array(plane), sigma)
        assert out.data.min() >= -1e-12
        assert out.total <= plane.sum() + 1e-9


class TestSumPool:
    def test_block_sums(self):
        g = RasterGrid.from_array(np.ones((4, 4)))
        out = sum_pool(g, 2)
        assert out.plane().shape == (2, 2)
        assert np.all(out.plane() == 4.0)

    def test_factor_one_identity(self):
        g = RasterGrid.from_array(np.arange(16.0).reshape(4, 4))
        assert np.array_equal(sum_pool(g, 1).data, g.data)

    def test_total_preserved_exactly(self):
        # Integer-valued data keeps the comparison exact.
        rng = np.random.default_rng(5)
        plane = rng.integers(0, 100, size=(8, 8)).astype(np.float64)
        g = RasterGrid.from_array(plane)
        assert sum_pool(g, 4).total == g.total

    def test_channels_pooled_independently(self):
        data = np.stack([np.ones((4, 4)), 2 * np.ones((4, 4))], axis=-1)
        out = sum_pool(RasterGrid(data), 2)
        assert np.all(out.data[:, :, 0] == 4.0)
        assert np.all(out.data[:, :, 1] == 8.0)

    def test_rejects_non_divisible(self):
        with pytest.raises(ShapeError):
            sum_pool(RasterGrid.from_array(np.zeros((5, 4))), 2)
        with pytest.raises(ParameterError):
            sum_pool(RasterGrid.from_array(np.zeros((4, 4))), 0)


class TestDihedral:
    def test_identity(self):
        g = RasterGrid.from_array(np.arange(6.0).reshape(2, 3))
        assert np.array_equal(dihedral_transform(g, 0).data, g.data)

    def test_rot90_layout(self):
        # rot90 of [[0,1,2],[3,4,5]] turns rows into reversed columns.
        arr = np.arange(6.0).reshape(2, 3)
        out = dihedral_transform_array(arr, 1)
        assert out.shape == (3, 2)
        assert np.array_equal(out, np.array([[2.0, 5.0], [1.0, 4.0], [0.0, 3.0]]))

    def test_all_elements_are_bijections(self):
        arr = np.arange(24.0).reshape(4, 6)
        for e in range(8):
            out = dihedral_transform_array(arr, e)
            assert sorted(out.ravel()) == sorted(arr.ravel())

    def test_inverse_recovers_input_all8(self):
        arr = np.random.default_rng(0).uniform(size=(5, 7, 2))
        for e in range(8):
            back = dihedral_transform_array(dihedral_transform_array(arr, e), dihedral_inverse(e))
            assert np.array_equal(back, arr)

    def test_group_closure(self):
        # Composing any two elements matches exactly one of the 8 on a labeled grid.
        arr = np.arange(20.0).reshape(4, 5)
        variants = [dihedral_transform_array(arr, e) for e in range(8)]
        for a in range(8):
            for b in range(8):
                comp = dihedral_transform_array(dihedral_transform_array(arr, a), b)
                hits = [
                    e
                    for e, v in enumerate(variants)
                    if v.shape == comp.shape and np.array_equal(v, comp)
                ]
                assert len(hits) == 1

    def test_point_map_tracks_pixels(self):
        h, w = 4, 6
        arr = np.zeros((h, w))
        for e in range(8):
            for i, j in [(0, 0), (1, 4), (3, 5)]:
                arr[:] = 0.0
                arr[i, j] = 1.0
                moved = dihedral_transform_array(arr, e)
                p = dihedral_transform_point(PixelCoord(i, j), (h, w), e)
                assert moved[p.row, p.col] == 1.0
                assert dihedral_shape((h, w), e) == moved.shape

    def test_rejects_out_of_range(self):
        with pytest.raises(ParameterError):
            dihedral_transform_array(np.zeros((2, 2)), 8)
        with pytest.raises(ParameterError):
            dihedral_inverse(-1)


class TestPdm1:
    def test_byte_layout(self):
        g = RasterGrid.from_array(np.array([[1.0, 2.0], [3.0, 4.0]]))
        raw = pdm1_bytes(g)
        assert raw[:4] == b"PDM1"
        assert struct.unpack("<III", raw[4:16]) == (2, 2, 1)
        assert np.array_equal(
            np.frombuffer(raw[16:], dtype="<f4"), np.array([1, 2, 3, 4], dtype="<f4")
        )

    def test_round_trip_path_and_buffer(self, tmp_path):
        rng = np.random.default_rng(11)
        g = RasterGrid(rng.standard_normal((5, 4, 3)))
        path = tmp_path / "grid.pdm1"
        write_pdm1(path, g)
        back = read_pdm1(path)
        # f32 storage: round trip equals the f32 quantization of the input.
        assert np.array_equal(back.data, g.data.astype(np.float32).astype(np.float64))
        buf = io.BytesIO()
        write_pdm1(buf, g)
        assert np.array_equal(read_pdm1(buf.getvalue()).data, back.data)

    def test_rejects_bad_magic(self):
        with pytest.raises(FormatError):
            read_pdm1(b"JUNK" + b"\x00" * 20)

    def test_rejects_truncation_and_trailing(self):
        g = RasterGrid.from_array(np.ones((2, 2)))
        raw = pdm1_bytes(g)
        with pytest.raises(FormatError):
            read_pdm1(raw[:-2])
        with pytest.raises(FormatError):
            read_pdm1(raw + b"\x00")


class TestNearestUpsample:
    def test_array_and_grid_paths(self):
        plane = np.array([[1.0, 2.0], [3.0, 4.0]])
        up = nearest_upsample(plane, 2)
        assert up.shape == (4, 4)
        assert np.array_equal(up[:2, :2], np.full((2, 2), 1.0))
        g = nearest_upsample(RasterGrid.from_array(plane), 3)
        assert isinstance(g, RasterGrid)
        assert (g.height, g.width, g.channels) == (6, 6, 1)
        # Block replication multiplies total mass by factor^2.
        assert g.total == pytest.approx(9 * plane.sum())

    def test_rejects_bad_factor(self):
        with pytest.raises(ParameterError):
            nearest_upsample(np.zeros((2, 2)), 0)


def test_blur_then_pool_commutes_with_mass():
    # Pipeline identity: pooled blurred impulse keeps the blurred total.
    plane = np.zeros((16, 16))
    plane[8, 8] = 1.0
    blurred = gaussian_blur(RasterGrid.from_array(plane), 2.0)
    pooled = sum_pool(blurred, 4)
    assert pooled.total == pytest.approx(blurred.total, abs=1e-12)
