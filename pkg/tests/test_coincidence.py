import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qclfm.coincidence import (
    Calibration,
    CoincidenceRecords,
    FitError,
    IdlerRegion,
    accidental_floor,
    expected_accidentals,
    fit_gaussian,
    gaussian,
    ghost_image,
    idler_singles,
    joint_momentum_histogram,
    match_times,
    pair_events,
    split_arms,
)
from qclfm.io import EVENT_DTYPE


def _greedy_oracle(ts, ti, gate):
    """All candidate pairs sorted by |dt| then signal index, accepted greedily."""
    cand = [(abs(s - i), a, b) for a, s in enumerate(ts) for b, i in enumerate(ti)
            if abs(s - i) <= gate / 2]
    cand.sort(key=lambda c: (c[0], c[1]))
    used_s, used_i, out = set(), set(), set()
    for _, a, b in cand:
        if a in used_s or b in used_i:
            continue
        used_s.add(a)
        used_i.add(b)
        out.add((a, b))
    return out


def _events(cam, x, y, t):
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["cam"] = cam
    ev["x_px"] = x
    ev["y_px"] = y
    ev["t_ns"] = t
    ev["cluster_size"] = 3
    return ev


def _merge(*parts):
    ev = np.concatenate(parts)
    return ev[np.argsort(ev["t_ns"], kind="stable")]


times = st.lists(st.integers(0, 400), min_size=0, max_size=40).map(sorted)


@settings(max_examples=60)
@given(ts=times, ti=times, gate=st.sampled_from([2.0, 10.0, 25.0]))
def test_match_times_properties(ts, ti, gate):
    s, i = match_times(ts, ti, gate)
    assert len(s) == len(i) <= min(len(ts), len(ti))
    assert len(set(s.tolist())) == len(s)
    assert len(set(i.tolist())) == len(i)
    ts_a, ti_a = np.asarray(ts, float), np.asarray(ti, float)
    if len(s):
        assert np.all(np.abs(ts_a[s] - ti_a[i]) <= gate / 2)
        assert np.all(np.diff(i) >= 0)


@settings(max_examples=60)
@given(ts=times, ti=times, gate=st.sampled_from([2.0, 10.0, 25.0]))
def test_match_times_total_matches_greedy_oracle(ts, ti, gate):
    s, i = match_times(ts, ti, gate)
    oracle = _greedy_oracle(ts, ti, gate)
    assert len(s) == len(oracle)
    # matched |dt| multiset is the same as the oracle's
    got = sorted(abs(ts[a] - ti[b]) for a, b in zip(s, i))
    want = sorted(abs(ts[a] - ti[b]) for a, b in oracle)
    assert got == want


def test_match_times_prefers_nearest():
    s, i = match_times([0.0, 3.0], [2.5], gate_ns=10)
    assert s.tolist() == [1] and i.tolist() == [0]
    # a tie goes to the earlier signal event
    s, i = match_times([0.0, 4.0], [2.0], gate_ns=10)
    assert s.tolist() == [0]


def test_match_times_errors():
    with pytest.raises(ValueError):
        match_times([1.0], [1.0], gate_ns=0)
    with pytest.raises(ValueError):
        match_times([2.0, 1.0], [1.0])
    s, i = match_times([], [1.0])
    assert len(s) == len(i) == 0


def test_idler_region_validation():
    with pytest.raises(ValueError):
        IdlerRegion(cam=None, rect_px=None)
    with pytest.raises(ValueError):
        IdlerRegion(cam=1, rect_px=(0, 0, 1, 1))
    ev = _events(0, [10.0, 200.0], [10.0, 200.0], [0, 1])
    r = IdlerRegion(cam=None, rect_px=(156, 156, 256, 256))
    assert r.contains(ev).tolist() == [False, True]
    sig, idl = split_arms(ev, r)
    assert len(sig) == len(idl) == 1


def test_calibration_maps():
    c = Calibration(signal_center_px=(10, 20), signal_scale=2.0, idler_center_px=(0, 0), idler_k_per_px=0.5)
    xs, ys = c.signal_coords(12, 19)
    assert (xs, ys) == (4.0, -2.0)
    kx, ky = c.idler_momenta(4, -2)
    assert (kx, ky) == (2.0, -1.0)


def test_pair_events_two_camera():
    t = np.arange(10) * 1000
    ev = _merge(_events(0, np.full(10, 127.5 + 4), np.full(10, 127.5), t),
                _events(1, np.full(10, 127.5), np.full(10, 127.5 + 2), t + 3))
    rec = pair_events(ev, gate_ns=10)
    assert len(rec) == 10
    assert np.allclose(rec.dt_ns, -3)
    assert np.allclose(rec.xs, 4 * 55 / 20)
    assert np.allclose(rec.kiy, 2 * 6.8e-3)
    with pytest.raises(ValueError):
        pair_events(ev[::-1])


def test_accidental_floor_matches_rate_product(rng):
    r1 = r2 = 1e4
    gate, duration = 10.0, 100.0
    span = duration * 1e9
    t1 = np.sort(rng.integers(0, int(span), rng.poisson(r1 * duration)))
    t2 = np.sort(rng.integers(0, int(span), rng.poisson(r2 * duration)))
    ev = _merge(_events(0, np.zeros(len(t1)), np.zeros(len(t1)), t1),
                _events(1, np.zeros(len(t2)), np.zeros(len(t2)), t2))
    expected = expected_accidentals(r1, r2, gate, duration)
    # r1 r2 tau T = 1e4 * 1e4 * 1e-8 s * 100 s
    assert expected == pytest.approx(100)
    n = len(pair_events(ev, gate))
    assert abs(n - expected) < 5 * np.sqrt(expected)
    shifted = len(accidental_floor(ev, gate))
    assert abs(shifted - expected) < 5 * np.sqrt(expected)


@settings(max_examples=30)
@given(a=st.floats(10, 1e5), b=st.floats(-0.01, 0.01), sigma=st.floats(2e-3, 1.5e-2))
def test_fit_gaussian_recovers_noiseless(a, b, sigma):
    k = np.linspace(-0.06, 0.06, 41)
    fit = fit_gaussian(gaussian(k, a, b, sigma), k)
    assert fit.a == pytest.approx(a, rel=1e-4)
    assert fit.b == pytest.approx(b, abs=1e-6)
    assert fit.sigma == pytest.approx(sigma, rel=1e-4)


def test_fit_gaussian_noisy_and_scale_invariant(rng):
    k = np.linspace(-0.05, 0.05, 31)
    y = rng.poisson(gaussian(k, 500, 0.001, 0.006)).astype(float)
    f1 = fit_gaussian(y, k, pitch_per_px=1e-3)
    f2 = fit_gaussian(7 * y, k)
    assert f1.sigma == pytest.approx(0.006, rel=0.05)
    assert f1.sigma_px == pytest.approx(f1.sigma / 1e-3)
    assert f2.sigma == pytest.approx(f1.sigma, rel=1e-6)
    assert f2.a == pytest.approx(7 * f1.a, rel=1e-6)


def test_fit_gaussian_errors():
    k = np.linspace(-1, 1, 11)
    with pytest.raises(ValueError):
        fit_gaussian(np.ones(4), np.arange(4.0))
    with pytest.raises(ValueError):
        fit_gaussian(-np.ones(11), k)
    with pytest.raises(FitError):
        fit_gaussian(np.zeros(11), k)
    with pytest.raises(FitError) as info:
        fit_gaussian(np.ones(11), k)
    assert len(info.value.last) == 3


def test_joint_histogram_sum_bins_centered(quiet):
    rec = CoincidenceRecords([0.0], [0.0], [0.0], [0.0], [0.0])
    h = joint_momentum_histogram(rec, k_range=0.1, bin_width=0.01, sum_range=0.03)
    assert len(h.sum_centers) % 2 == 1
    assert h.sum_centers[len(h.sum_centers) // 2] == pytest.approx(0.0)
    assert h.sum_hist.sum() == 1
    assert h.low_statistics


def test_joint_histogram_background_subtraction(rng):
    n = 5000
    k = rng.normal(0, 0.02, (n, 2))
    rec = CoincidenceRecords(k[:, 0], k[:, 1], -k[:, 0], -k[:, 1], np.zeros(n))
    h = joint_momentum_histogram(rec, 0.1, 0.005, background=rec, background_scale=1.0)
    assert h.background_subtracted
    assert np.allclose(h.sum_hist, 0) and np.allclose(h.joint_x, 0)


def test_ghost_image_normalisation():
    rec = CoincidenceRecords(np.zeros(3), np.zeros(3), [0.5, 0.5, 1.5], [0.5, 0.5, 0.5], np.zeros(3))
    edges = np.array([0.0, 1.0, 2.0])
    raw = ghost_image(rec, edges)
    assert raw.tolist() == [[2, 1], [0, 0]]
    singles = idler_singles([0.5, 0.5, 0.5, 0.5, 1.5, 1.5], [0.5] * 6, edges)
    norm = ghost_image(rec, edges, singles=singles)
    assert norm[0, 0] == pytest.approx(0.5)
    assert norm[0, 1] == pytest.approx(0.5)
    assert np.isnan(norm[1]).all()


def test_records_concatenate_and_subset():
    r = CoincidenceRecords(*(np.arange(4.0) + j for j in range(5)))
    both = CoincidenceRecords.concatenate([r, r.subset(slice(0, 2))])
    assert len(both) == 6
    assert len(CoincidenceRecords.concatenate([])) == 0
    assert len(r.columns()) == 5
