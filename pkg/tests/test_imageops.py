import numpy as np
import pytest

from ptreid.imageops import bilinear_sample, make_grid, resize_bilinear, rotate_image, warp_displacement


class TestResize:
    def test_identity_size_is_exact_copy(self, rng):
        img = rng.uniform(size=(16, 8, 3)).astype(np.float32)
        out = resize_bilinear(img, (16, 8))
        assert np.array_equal(out, img)
        assert out is not img

    def test_upsample_then_downsample_stays_close(self, rng):
        img = rng.uniform(size=(16, 8, 3))
        up = resize_bilinear(img, (32, 16))
        back = resize_bilinear(up, (16, 8))
        assert np.abs(back - img).max() < 0.35  # lossy but bounded

    def test_constant_image_preserved(self):
        img = np.full((10, 10, 3), 0.25)
        assert np.allclose(resize_bilinear(img, (7, 13)), 0.25)

    def test_invalid_target_rejected(self, rng):
        with pytest.raises(ValueError):
            resize_bilinear(rng.uniform(size=(4, 4, 3)), (0, 5))


class TestRotate:
    def test_zero_angle_copies(self, rng):
        img = rng.uniform(size=(12, 6, 3))
        assert np.array_equal(rotate_image(img, 0.0), img)

    def test_four_quarter_turns_on_square_restore(self, rng):
        img = rng.uniform(size=(9, 9, 3))
        out = img
        for _ in range(4):
            out = rotate_image(out, 90.0)
        assert np.abs(out - img).max() < 1e-9

    def test_border_replication_keeps_range(self, rng):
        img = rng.uniform(size=(12, 6, 3))
        out = rotate_image(img, 33.0)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestWarpAndSample:
    def test_zero_displacement_is_identity(self, rng):
        img = rng.uniform(size=(8, 8, 3))
        zero = np.zeros((8, 8))
        assert np.array_equal(warp_displacement(img, zero, zero), img)

    def test_integer_sampling_reads_pixels(self, rng):
        img = rng.uniform(size=(6, 5, 3))
        ys, xs = np.meshgrid(np.arange(6.0), np.arange(5.0), indexing="ij")
        assert np.array_equal(bilinear_sample(img, ys, xs), img)

    def test_out_of_frame_replicates_border(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        val = bilinear_sample(img, np.array([-5.0]), np.array([-5.0]))
        assert np.array_equal(val[0], img[0, 0])


class TestMakeGrid:
    def test_tiles_horizontally_with_separator(self, rng):
        tiles = [rng.uniform(size=(8, 4, 3)) for _ in range(3)]
        grid = make_grid(tiles, pad=2, pad_value=1.0)
        assert grid.shape == (8, 3 * 4 + 2 * 2, 3)
        assert np.array_equal(grid[:, :4], tiles[0])
        assert np.all(grid[:, 4:6] == 1.0)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ValueError):
            make_grid([rng.uniform(size=(8, 4, 3)), rng.uniform(size=(8, 5, 3))])
        with pytest.raises(ValueError):
            make_grid([])
