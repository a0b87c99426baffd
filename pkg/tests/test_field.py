import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcq.errors import ArgumentError, DataError, DimensionError
from dcq.field import (
    Block,
    SyntheticSpec,
    generate_synthetic,
    load_raw,
    minmax_normalize,
    sample_blocks,
    save_raw,
)


def test_load_raw_identity(tmp_path):
    path = tmp_path / "two.f32"
    np.array([0.0, 1.0], dtype="<f4").tofile(path)
    vol = load_raw(path, (1, 1, 2))
    assert vol.vmin == 0.0 and vol.vmax == 1.0
    assert vol.dims == (1, 1, 2)


def test_load_raw_size_mismatch(tmp_path):
    path = tmp_path / "short.f32"
    np.zeros(3, dtype="<f4").tofile(path)  # 12 bytes
    with pytest.raises(DimensionError, match="32"):
        load_raw(path, (2, 2, 2))


def test_load_raw_nan_reports_index(tmp_path):
    path = tmp_path / "nan.f32"
    data = np.arange(8, dtype="<f4")
    data[5] = np.nan
    data.tofile(path)
    with pytest.raises(DataError, match="index 5"):
        load_raw(path, (2, 2, 2))


def test_save_load_roundtrip(tmp_path):
    spec = SyntheticSpec(dims=(8, 6, 4), seed=3)
    vol = generate_synthetic(spec, 1)
    path = tmp_path / "v.f32"
    save_raw(vol, path)
    back = load_raw(path, vol.dims)
    assert np.array_equal(back.data, vol.data)


def test_synthetic_time_invariant_without_drift_or_noise():
    spec = SyntheticSpec(dims=(8, 8, 8), seed=42, n_modes=1, noise_amplitude=0.0, drift=0.0)
    v0 = generate_synthetic(spec, 0)
    v5 = generate_synthetic(spec, 5)
    assert np.array_equal(v0.data, v5.data)


def test_synthetic_deterministic():
    spec = SyntheticSpec(dims=(10, 9, 8), seed=7)
    a = generate_synthetic(spec, 3)
    b = generate_synthetic(spec, 3)
    assert np.array_equal(a.data, b.data)


def test_synthetic_drift_changes_volume():
    spec = SyntheticSpec(dims=(8, 8, 8), seed=11, noise_amplitude=0.0, drift=0.05)
    v0 = generate_synthetic(spec, 0)
    v9 = generate_synthetic(spec, 9)
    assert np.any(v0.data != v9.data)


def test_synthetic_finite():
    spec = SyntheticSpec(dims=(16, 16, 16), seed=5, noise_amplitude=0.5)
    vol = generate_synthetic(spec, 2)
    assert np.isfinite(vol.data).all()


def test_sample_blocks_single_origin():
    spec = SyntheticSpec(dims=(32, 32, 32), seed=1)
    vol = generate_synthetic(spec, 0)
    blocks = sample_blocks(vol, (32, 32, 32), 3, seed=9)
    assert len(blocks) == 3
    assert all(b.origin == (0, 0, 0) for b in blocks)


def test_sample_blocks_deterministic():
    spec = SyntheticSpec(dims=(64, 64, 64), seed=2)
    vol = generate_synthetic(spec, 0)
    a = sample_blocks(vol, (16, 16, 16), 32, seed=5)
    b = sample_blocks(vol, (16, 16, 16), 32, seed=5)
    assert [x.origin for x in a] == [y.origin for y in b]


def test_sample_blocks_origin_range():
    spec = SyntheticSpec(dims=(64, 64, 64), seed=2)
    vol = generate_synthetic(spec, 0)
    for b in sample_blocks(vol, (16, 16, 16), 64, seed=13):
        assert all(0 <= o <= 48 for o in b.origin)


def test_sample_blocks_content_matches_source():
    spec = SyntheticSpec(dims=(24, 20, 16), seed=6)
    vol = generate_synthetic(spec, 1)
    for b in sample_blocks(vol, (5, 4, 3), 20, seed=8):
        ox, oy, oz = b.origin
        bx, by, bz = b.dims
        region = vol.data[oz : oz + bz, oy : oy + by, ox : ox + bx]
        assert np.array_equal(b.data, region)
        assert b.source == (vol.field_name, vol.timestep)


def test_sample_blocks_too_large():
    spec = SyntheticSpec(dims=(8, 8, 8), seed=1)
    vol = generate_synthetic(spec, 0)
    with pytest.raises(DimensionError):
        sample_blocks(vol, (16, 8, 8), 1, seed=0)


def _block(values) -> Block:
    data = np.asarray(values, dtype=np.float32).reshape(1, 1, -1)
    return Block(data=data, origin=(0, 0, 0), source=("f", 0), block_id=0)


def test_minmax_normalize_affine_map():
    out, stats = minmax_normalize(_block([2.0, 4.0, 6.0]))
    assert np.allclose(out.data.ravel(), [0.0, 0.5, 1.0])
    assert (stats.bmin, stats.bmax) == (2.0, 6.0)
    assert not stats.degenerate


def test_minmax_normalize_degenerate():
    out, stats = minmax_normalize(_block([5.0, 5.0, 5.0]))
    assert np.array_equal(out.data.ravel(), [0.0, 0.0, 0.0])
    assert stats.degenerate


def test_minmax_normalize_exact_endpoints():
    rng = np.random.default_rng(0)
    out, _ = minmax_normalize(_block(rng.normal(size=64)))
    assert out.data.min() == 0.0 and out.data.max() == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, width=32), min_size=2, max_size=64).filter(lambda v: min(v) < max(v)))
def test_minmax_normalize_roundtrip(values):
    blk = _block(values)
    out, stats = minmax_normalize(blk)
    back = out.data.astype(np.float64) * (stats.bmax - stats.bmin) + stats.bmin
    scale = max(abs(stats.bmin), abs(stats.bmax), 1e-30)
    assert np.max(np.abs(back - blk.data.astype(np.float64))) <= 1e-6 * scale


def test_spec_validation():
    with pytest.raises(ArgumentError):
        SyntheticSpec(dims=(8, 8, 8), seed=0, n_modes=0)
    with pytest.raises(ArgumentError):
        SyntheticSpec(dims=(8, 8, 8), seed=0, noise_amplitude=-0.1)
    with pytest.raises(DimensionError):
        SyntheticSpec(dims=(0, 8, 8), seed=0)
