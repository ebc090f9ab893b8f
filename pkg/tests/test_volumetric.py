import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qclfm.coincidence import CoincidenceRecords
from qclfm.refocus import GridSpec
from qclfm.volumetric import (
    FocalStack,
    all_in_focus,
    depth_map,
    depth_preview_rgb,
    depth_values,
    sharpness,
    sweep,
)

GRID = GridSpec(32, 32, 1.0)


def _stripes(period=4):
    x = np.arange(32)
    return np.tile((x // (period // 2)) % 2, (32, 1)).astype(float)


def test_depth_values():
    assert depth_values(-500, 500, 250).tolist() == [-500, -250, 0, 250, 500]
    assert depth_values(0, 0, 0).tolist() == [0.0]
    # the end point is kept despite rounding
    assert len(depth_values(0, 0.3, 0.1)) == 4
    assert depth_values(0, 10, 3).tolist() == [0, 3, 6, 9]
    with pytest.raises(ValueError):
        depth_values(1, 0, 1)
    with pytest.raises(ValueError):
        depth_values(0, 1, 0)


@given(lo=st.floats(-5000, 5000), span=st.floats(0, 5000), step=st.floats(1, 1000))
def test_depth_values_properties(lo, span, step):
    z = depth_values(lo, lo + span, step)
    assert z[0] == lo
    assert z[-1] <= lo + span + 1e-6 * step
    assert lo + span - z[-1] < step * (1 + 1e-6)
    assert np.all(np.diff(z) > 0)


def test_focal_stack_validation():
    s = np.zeros((2, 32, 32))
    with pytest.raises(ValueError):
        FocalStack(np.array([0.0, 0.0]), s, GRID)
    with pytest.raises(ValueError):
        FocalStack(np.array([0.0]), s, GRID)
    with pytest.raises(ValueError):
        FocalStack(np.array([0.0, 1.0]), np.zeros((2, 16, 16)), GRID)
    with pytest.raises(ValueError):
        FocalStack(np.array([]), np.zeros((0, 32, 32)), GRID)
    st_ = FocalStack([0.0, 1.0], s + 1, GRID)
    assert len(st_) == 2
    assert np.all(st_.scaled(3).slices == 3)


def test_all_in_focus_is_sum():
    rng = np.random.default_rng(0)
    s = rng.uniform(0, 1, (3, 32, 32))
    aif = all_in_focus(FocalStack([-1.0, 0.0, 1.0], s, GRID))
    assert np.allclose(aif.total, s.sum(axis=0))
    assert aif.preview.min() == 0 and aif.preview.max() == 1
    flat = all_in_focus(FocalStack([0.0], np.ones((1, 32, 32)), GRID))
    assert np.all(flat.preview == 0)


def test_sharpness_methods():
    flat = np.ones((32, 32))
    assert np.allclose(sharpness(flat), 0)
    assert np.allclose(sharpness(flat, method="modified_laplacian"), 0)
    assert sharpness(_stripes()).mean() > 0
    with pytest.raises(ValueError):
        sharpness(flat, method="nope")


def test_depth_map_picks_sharp_slice():
    # textured band in the middle rows, blank rows above and below
    sharp = np.zeros((32, 32))
    sharp[12:20, :16] = _stripes()[12:20, :16]
    other = np.zeros((32, 32))
    other[12:20, 16:] = _stripes()[12:20, 16:]
    stack = FocalStack([-100.0, 100.0], np.stack([sharp, other]), GRID)
    d = depth_map(stack, window_px=5)
    fg = ~d.background
    assert np.all(d.depth_um[fg & (np.arange(32) < 12)[None, :]] == -100)
    assert np.all(d.depth_um[fg & (np.arange(32) > 20)[None, :]] == 100)
    assert np.all(np.isnan(d.depth_um[d.background]))
    assert 0 < d.foreground_fraction < 1
    assert d.background[0, 0] and not d.background[16, 5]
    rgb = depth_preview_rgb(d)
    assert rgb.shape == (32, 32, 3) and rgb.dtype == np.uint8
    assert np.all(rgb[d.background] == 0)


def test_depth_map_ties_go_to_smallest_abs_z():
    img = _stripes()
    stack = FocalStack([-200.0, -50.0, 50.0, 300.0], np.stack([img] * 4), GRID)
    d = depth_map(stack, window_px=5, mad_factor=-1.0)
    # exact ties everywhere: |z| = 50 on both sides, the negative one comes first
    assert np.all(d.index == 1)
    assert np.allclose(d.confidence, 0)


def test_depth_map_background_threshold():
    rng = np.random.default_rng(1)
    s = rng.normal(0, 1e-3, (2, 32, 32))
    s[0, 10:20, 10:20] += _stripes()[10:20, 10:20]
    d = depth_map(FocalStack([0.0, 10.0], s, GRID), window_px=3)
    assert d.background[0, 0] and d.background[31, 31]
    assert not d.background[15, 15]
    with pytest.raises(ValueError):
        depth_map(FocalStack([0.0], s[:1], GRID))


def test_sweep_independent_of_worker_count(rng):
    n = 3000
    xs, ys = rng.uniform(-10, 10, (2, n))
    kx, ky = rng.normal(0, 0.005, (2, n))
    rec = CoincidenceRecords(xs, ys, kx, ky, np.zeros(n))
    a = sweep(rec, -200, 200, 100, iterations=3, grid=GRID, workers=1)
    b = sweep(rec, -200, 200, 100, iterations=3, grid=GRID, workers=2)
    assert a.z_um.tolist() == [-200, -100, 0, 100, 200]
    assert np.array_equal(a.slices, b.slices)
