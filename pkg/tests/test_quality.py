import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcq import quality
from dcq.errors import ArgumentError
from dcq.quality import (
    QualityLabel,
    compression_ratio,
    is_defined,
    mape,
    mse,
    percentage_error,
    psnr,
    psnr_value,
    read_label_csv,
    ssim3d,
    write_label_csv,
)


def test_compression_ratio_cases():
    assert compression_ratio(1_048_576, 131_072) == 8.0
    assert compression_ratio(4096, 4096) == 1.0
    assert compression_ratio(2048, 4096) == 0.5
    with pytest.raises(ArgumentError):
        compression_ratio(1024, 0)


def test_mse_cases():
    assert mse([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert mse([0.0, 0.0], [1.0, 1.0]) == 1.0
    assert mse([0.0, 2.0], [1.0, 1.0]) == 1.0
    with pytest.raises(ArgumentError):
        mse([1.0], [1.0, 2.0])


def test_psnr_formula_cases():
    assert abs(psnr_value(1.0, 1e-4) - 40.0) < 1e-9
    assert abs(psnr_value(100.0, 1.0) - 40.0) < 1e-9
    # identical inputs -> undefined
    assert not is_defined(psnr([0.0, 1.0], [0.0, 1.0]))
    # zero range -> undefined
    assert not is_defined(psnr([3.0, 3.0], [3.0, 3.1]))


def test_psnr_shift_invariance():
    rng = np.random.default_rng(4)
    a = rng.random(512)
    b = a + rng.normal(0, 0.01, 512)
    assert abs(psnr(a, b) - psnr(a + 2.0, b + 2.0)) < 1e-9


def _brute_force_ssim(x, y, window, k1=0.01, k2=0.03):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    L = x.max() - x.min()
    c1 = (k1 * L) ** 2
    c2 = (k2 * L) ** 2
    vals = []
    nz, ny, nx = x.shape
    w = window
    for z in range(nz - w + 1):
        for yy in range(ny - w + 1):
            for xx in range(nx - w + 1):
                wx = x[z : z + w, yy : yy + w, xx : xx + w]
                wy = y[z : z + w, yy : yy + w, xx : xx + w]
                mx, my = wx.mean(), wy.mean()
                vx = (wx * wx).mean() - mx * mx
                vy = (wy * wy).mean() - my * my
                cxy = (wx * wy).mean() - mx * my
                vals.append(
                    ((2 * mx * my + c1) * (2 * cxy + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2))
                )
    return float(np.mean(vals))


def test_ssim_identity():
    rng = np.random.default_rng(0)
    x = rng.random((9, 9, 9))
    assert ssim3d(x, x) == 1.0


def test_ssim_symmetry_with_shared_range():
    rng = np.random.default_rng(1)
    a = rng.random((8, 8, 8))
    b = a + rng.normal(0, 0.05, a.shape)
    L = float(a.max() - a.min())
    assert abs(ssim3d(a, b, data_range=L) - ssim3d(b, a, data_range=L)) < 1e-12


def test_ssim_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(5):
        x = rng.random((8, 8, 8))
        y = x + rng.normal(0, 0.1, x.shape)
        assert abs(ssim3d(x, y) - _brute_force_ssim(x, y, 7)) < 1e-10


def test_ssim_small_window_matches_brute_force():
    rng = np.random.default_rng(3)
    x = rng.random((5, 6, 7))
    y = x + rng.normal(0, 0.2, x.shape)
    assert abs(ssim3d(x, y, window=3) - _brute_force_ssim(x, y, 3)) < 1e-10


def test_ssim_constant_cases():
    c = np.full((8, 8, 8), 2.5)
    assert ssim3d(c, c.copy()) == 1.0
    assert not is_defined(ssim3d(c, c + 0.1))


def test_ssim_validation():
    x = np.zeros((4, 4, 4))
    with pytest.raises(ArgumentError):
        ssim3d(x, np.zeros((4, 4, 5)))
    with pytest.raises(ArgumentError):
        ssim3d(x, x, window=7)


def test_percentage_error_cases():
    assert percentage_error(100.0, 90.0) == 10.0
    assert percentage_error(5.0, 5.0) == 0.0
    assert percentage_error(50.0, 55.0) == -10.0
    with pytest.raises(ArgumentError):
        percentage_error(0.0, 1.0)


def test_mape_cases():
    assert mape([(100.0, 90.0), (50.0, 55.0)]) == 10.0
    assert mape([(7.0, 7.0), (3.0, 3.0)]) == 0.0
    assert mape([(10.0, 5.0)]) == 50.0
    with pytest.raises(ArgumentError):
        mape([])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 100), st.floats(0.1, 100)), min_size=1, max_size=20),
       st.randoms())
def test_mape_order_independent(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert math.isclose(mape(pairs), mape(shuffled), rel_tol=1e-12)


def test_label_csv_roundtrip(tmp_path):
    rows = [
        QualityLabel("f0", 0, 1, "pred-eb", 1e-3, 5e-3, 7.5, 42.0, 0.99, -1.0, 2.0),
        QualityLabel("f0", 1, 0, "xform-eb", 1e-2, 5e-2, 3.25, quality.UNDEFINED, quality.UNDEFINED, 0.0, 0.0),
    ]
    path = tmp_path / "labels.csv"
    write_label_csv(rows, path)
    text = path.read_text().splitlines()
    assert text[0].startswith("field,timestep,block_id,codec")
    assert ",,," not in text[1]  # defined row has no empty metric cells
    back = read_label_csv(path)
    assert back[0].cr == 7.5 and back[0].psnr_db == 42.0
    assert not is_defined(back[1].psnr_db) and not is_defined(back[1].ssim)
