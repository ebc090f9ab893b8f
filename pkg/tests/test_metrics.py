import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qclfm.metrics import (
    DofCurve,
    DofParams,
    ElementScore,
    ResolvabilityReport,
    bar_contrast,
    conventional_dof,
    dof_curve,
    feature_contrast,
    fiber_contrast,
    non_decreasing_in_abs_z,
    resolvability,
)
from qclfm.scene import FiberSegment, fiber_scene, usaf_target


@pytest.fixture(scope="module")
def chart():
    return usaf_target(7, size=128, pitch_um=1.0)


def test_conventional_dof_values():
    assert conventional_dof(DofParams(e_um=5.0)) == pytest.approx(0.81 / 0.45**2 + 5 / (20 * 0.45))
    assert conventional_dof(DofParams(e_um=5.0)) == pytest.approx(4.6, abs=0.05)
    assert conventional_dof(DofParams(e_um=10.0)) == pytest.approx(5.1, abs=0.05)


@settings(max_examples=40)
@given(e=st.floats(0, 50), na=st.floats(0.05, 1.0), n=st.floats(1.0, 1.6))
def test_conventional_dof_monotone(e, na, n):
    base = conventional_dof(DofParams(n=n, na=na, e_um=e))
    assert conventional_dof(DofParams(n=n, na=na, e_um=e + 1)) > base
    assert conventional_dof(DofParams(n=n, na=min(1.0, na * 1.1), e_um=e)) <= base
    assert conventional_dof(DofParams(n=n * 1.1, na=na, e_um=e)) > base


def test_dof_params_validation():
    for kw in ({"na": 0}, {"na": 1.2}, {"magnification": 0}, {"n": 0.9}, {"e_um": -1}, {"wavelength_um": 0}):
        with pytest.raises(ValueError):
            DofParams(**kw)


def test_perfect_chart_has_unit_contrast(chart):
    img = np.abs(chart.transmission.values)
    rep = resolvability(img, chart)
    scored = [s for s in rep.scores if not s.note]
    assert scored
    assert all(s.contrast == pytest.approx(1.0) for s in scored)
    assert rep.smallest_resolved_um() == pytest.approx(min(s.spacing_um for s in scored))


def test_negative_chart_scores_the_same(chart):
    img = np.abs(chart.transmission.values)
    a = resolvability(img, chart)
    b = resolvability(1.0 - img, chart)
    assert [s.contrast for s in a.scores] == pytest.approx([s.contrast for s in b.scores])


def test_uniform_image_has_zero_contrast(chart):
    rep = resolvability(np.full(chart.shape, 3.0), chart)
    assert all(s.contrast == 0.0 for s in rep.scores if not s.note)
    assert rep.smallest_resolved_um() == np.inf


@settings(max_examples=25)
@given(a=st.floats(0.01, 100) | st.floats(-100, -0.01), b=st.floats(-50, 50), seed=st.integers(0, 2**31))
def test_contrast_affine_invariant(chart, a, b, seed):
    rng = np.random.default_rng(seed)
    img = np.abs(chart.transmission.values) + rng.normal(0, 0.2, chart.shape)
    el = chart.elements[0]
    c0, _ = bar_contrast(img, el, 1.0)
    c1, _ = bar_contrast(a * img + b, el, 1.0)
    assert c1 == pytest.approx(c0, abs=1e-9)


def test_element_outside_field_is_noted():
    big = usaf_target(7, size=128, pitch_um=1.0)
    cropped = np.ones((40, 40))
    c, note = bar_contrast(cropped, big.elements[0], 1.0)
    assert np.isnan(c) and note


def test_smallest_resolved_stops_at_first_failure():
    scores = [ElementScore(7, 1, 7.8, 0.9, True), ElementScore(7, 2, 7.0, 0.1, False),
              ElementScore(7, 3, 6.2, 0.8, True), ElementScore(7, 4, 5.5, float("nan"), False, "outside")]
    rep = ResolvabilityReport(scores, 0.2)
    assert rep.smallest_resolved_um() == 7.8
    assert rep.contrast_of(7, 3) == 0.8
    with pytest.raises(KeyError):
        rep.contrast_of(6, 1)
    assert rep.mean_contrast() == pytest.approx((0.9 + 0.1 + 0.8) / 3)
    assert len(rep.rows()) == 4


def test_threshold_controls_resolved_flag(chart):
    img = 0.5 + 0.1 * (np.abs(chart.transmission.values) - 0.5)
    img = img + np.random.default_rng(0).normal(0, 0.02, img.shape)
    lo = resolvability(img, chart, threshold=0.05).smallest_resolved_um()
    hi = resolvability(img, chart, threshold=0.99).smallest_resolved_um()
    assert hi == np.inf
    assert lo <= hi


def test_dof_curve_single_depth(chart):
    img = np.abs(chart.transmission.values)
    curve = dof_curve([0.0], lambda z: img, chart)
    assert curve.z_um.tolist() == [0.0]
    assert np.isfinite(curve.smallest_um[0])
    with pytest.raises(ValueError):
        dof_curve([], lambda z: img, chart)


def test_non_decreasing_in_abs_z():
    z = np.array([-2, -1, 0, 1, 2.0]) * 500
    good = DofCurve(z, np.array([9.0, 5.0, 4.0, 5.0, np.inf]))
    assert non_decreasing_in_abs_z(good)
    bad = DofCurve(z, np.array([9.0, 9.0, 4.0, 9.0, 9.0]))
    bad_far = DofCurve(np.arange(-3, 4) * 500.0, np.array([3.0, 3.0, 9.0, 4.0, 9.0, 3.0, 3.0]))
    assert non_decreasing_in_abs_z(bad)
    assert not non_decreasing_in_abs_z(bad_far)


def test_median_filter_treats_unresolved_as_huge():
    c = DofCurve(np.arange(3.0), np.array([np.inf, 4.0, np.inf]))
    assert np.all(c.median_filtered() >= 1e11)


def test_feature_and_fiber_contrast():
    f = FiberSegment((0.0, 0.0), 0.3, 80.0, 8.0, 0.0)
    scene = fiber_scene([f], size=128)
    img = np.abs(scene.targets[0].transmission.values)
    assert fiber_contrast(img, f, 1.0) == pytest.approx(1.0)
    assert fiber_contrast(np.ones_like(img), f, 1.0) == 0.0
    with pytest.raises(ValueError):
        feature_contrast(img, np.zeros(img.shape, bool), np.ones(img.shape, bool))
