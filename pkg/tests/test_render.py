import numpy as np

from seqground.render import heatmap, overlay_points, raster_rgb, read_pnm, write_pgm, write_ppm


def test_pgm_round_trip(tmp_path):
    mask = np.zeros((5, 7), dtype=bool)
    mask[1:3, 2:6] = True
    write_pgm(tmp_path / "m.pgm", mask)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n255\n") and len(raw) == len(b"P5\n7 5\n255\n") + 35
    np.testing.assert_array_equal(read_pnm(tmp_path / "m.pgm"), mask.astype(np.uint8) * 255)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (4, 6, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_pnm(tmp_path / "a.ppm"), img)


def test_heatmap_range_and_peak(rng):
    h = heatmap(rng.random((8, 8)), 64)
    assert h.shape == (64, 64) and h.dtype == np.uint8
    assert h.max() == 255 and h.min() >= 0


def test_overlay_and_raster(scenes):
    s = scenes[0]
    img = overlay_points(s.gt_mask, [(10, 10), (20, 20)], scale=2)
    assert img.shape == (128, 128, 3)
    assert tuple(img[20, 20]) == (40, 220, 40)
    assert raster_rgb(s.raster).shape == (64, 64, 3)
