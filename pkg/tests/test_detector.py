import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qclfm.detector import (
    HIT_DTYPE,
    IDLER_CAM,
    SIGNAL_CAM,
    CameraParams,
    cluster_and_centroid,
    detect,
    hits_to_raw,
    label_clusters,
    merge_events,
    raw_to_hits,
)
from qclfm.io import raw_from_bytes, raw_to_bytes


def _union_find_labels(hits, gap=1, window_ns=100.0):
    """Brute-force O(n^2) connected components used as the clustering oracle."""
    n = len(hits)
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            h, g = hits[i], hits[j]
            if (h["cam"] == g["cam"] and abs(int(h["x"]) - int(g["x"])) <= gap
                    and abs(int(h["y"]) - int(g["y"])) <= gap
                    and abs(float(h["t_ns"]) - float(g["t_ns"])) <= window_ns):
                parent[find(i)] = find(j)
    return np.array([find(i) for i in range(n)])


def _same_partition(a, b):
    """True when two label arrays induce the same partition."""
    pairs = set(zip(a.tolist(), b.tolist()))
    return len(pairs) == len(set(a.tolist())) == len(set(b.tolist()))


def _random_hits(rng, n, size=12, span_ns=1000.0):
    hits = np.empty(n, dtype=HIT_DTYPE)
    hits["cam"] = rng.integers(0, 2, n)
    hits["x"] = rng.integers(0, size, n)
    hits["y"] = rng.integers(0, size, n)
    hits["t_ns"] = np.sort(rng.uniform(0, span_ns, n))
    hits["amplitude"] = rng.uniform(100, 2000, n)
    return hits


def _isolated_photons(n, spacing_ns=1000.0, grid=16, step=12):
    """Photons on a coarse grid with widely separated times (no cluster overlap)."""
    k = np.arange(n)
    x = 10 + step * (k % grid) + 0.2
    y = 10 + step * ((k // grid) % grid) - 0.1
    t = 1000.0 + spacing_ns * k
    return x, y, t


def test_camera_params_validation():
    with pytest.raises(ValueError):
        CameraParams(qe=0)
    with pytest.raises(ValueError):
        CameraParams(qe=1.5)
    with pytest.raises(ValueError):
        CameraParams(cluster_min=3, cluster_max=2)
    with pytest.raises(ValueError):
        CameraParams(cluster_max=10)
    with pytest.raises(ValueError):
        CameraParams(clock_ns=0)
    with pytest.raises(ValueError):
        CameraParams(blur_px=-1)


def test_jitter_budget_fits_timing_accuracy():
    p = CameraParams()
    total = p.jitter_ns**2 + p.clock_ns**2 / 12 + 1 / 12
    assert total == pytest.approx(p.sigma_t_ns**2)
    assert CameraParams(sigma_t_ns=0.1).jitter_ns == 0.0


def test_skew_decreases_with_amplitude():
    p = CameraParams()
    a = np.array([0.0, 500.0, 1000.0, 2000.0, 5000.0])
    s = p.skew(a)
    assert s[0] == p.skew_ns
    assert np.all(np.diff(s) <= 0)
    assert s[-1] == 0.0


def test_qe_thinning(rng):
    p = CameraParams(qe=0.07)
    n = 200_000
    x = rng.uniform(10, 240, n)
    y = rng.uniform(10, 240, n)
    t = np.sort(rng.uniform(0, 1e9, n))
    _, report, keep = detect(x, y, t, p, rng, return_detected=True)
    expected = n * p.qe
    assert abs(report.detected - expected) < 5 * np.sqrt(expected * (1 - p.qe))
    assert keep.sum() == report.detected
    assert report.photons_in == n


def test_cluster_sizes_within_range(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(400)
    hits, report = detect(x, y, t, p, rng)
    events = cluster_and_centroid(hits, p)
    assert len(events) == report.detected == 400
    assert events["cluster_size"].min() >= p.cluster_min
    assert events["cluster_size"].max() <= p.cluster_max
    # every size in the range occurs
    assert set(np.unique(events["cluster_size"]).tolist()) == set(range(p.cluster_min, p.cluster_max + 1))


def test_photon_count_recovered_at_unit_qe(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(1000)
    hits, _ = detect(x, y, t, p, rng)
    events = cluster_and_centroid(hits, p)
    assert len(events) == 1000
    # centroids land within a pixel of the true position
    order = np.argsort(events["t_ns"])
    assert np.max(np.abs(events["x_px"][order] - x)) < 1.0
    assert np.max(np.abs(events["y_px"][order] - y)) < 1.0


def test_event_timing_statistics(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(4000)
    hits, _ = detect(x, y, t, p, rng)
    events = cluster_and_centroid(hits, p)
    dt = events["t_ns"].astype(float) - t
    # skew correction removes the systematic delay; spread matches the accuracy
    assert abs(dt.mean()) < 0.5
    assert dt.std() == pytest.approx(p.sigma_t_ns, rel=0.1)


def test_hit_times_are_clock_quantised(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(200)
    hits, _ = detect(x, y, t, p, rng)
    ticks = hits["t_ns"] / p.clock_ns
    assert np.allclose(ticks, np.round(ticks))
    assert np.all(np.diff(hits["t_ns"]) >= 0)


def test_brightest_pixel_fires_first(rng):
    p = CameraParams(qe=1.0, sigma_t_ns=0.0, clock_ns=0.01)
    x, y, t = _isolated_photons(300)
    hits, _ = detect(x, y, t, p, rng)
    labels = label_clusters(hits)
    for lab in np.unique(labels)[:50]:
        c = hits[labels == lab]
        assert c["t_ns"][np.argmax(c["amplitude"])] == c["t_ns"].min()


def test_off_sensor_photons_counted(rng):
    p = CameraParams(qe=1.0, width=32, height=32)
    x = np.array([5.0, -3.0, 40.0, 10.0, 31.6])
    y = np.array([5.0, 5.0, 5.0, -0.6, 5.0])
    t = np.arange(5) * 1000.0
    _, report = detect(x, y, t, p, rng)
    assert report.off_sensor == 4
    assert report.detected == 1


def test_dark_counts_rate(rng):
    p = CameraParams(dark_rate_per_s=1e6, width=64, height=64)
    _, report = detect(np.empty(0), np.empty(0), np.empty(0), p, rng, duration_ns=1e7)
    assert abs(report.dark - 10_000) < 5 * 100
    hits, _ = detect(np.empty(0), np.empty(0), np.empty(0), p, rng, duration_ns=1e6, t0_ns=5e6)
    assert hits["t_ns"].min() >= 5e6
    assert hits["x"].max() < 64


def test_detect_deterministic():
    p = CameraParams()
    x, y, t = _isolated_photons(500)
    a, _ = detect(x, y, t, p, np.random.default_rng(7))
    b, _ = detect(x, y, t, p, np.random.default_rng(7))
    assert a.tobytes() == b.tobytes()


def test_camera_label_preserved(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(20)
    hits, _ = detect(x, y, t, p, rng, cam=IDLER_CAM)
    assert np.all(hits["cam"] == IDLER_CAM)
    assert np.all(cluster_and_centroid(hits, p)["cam"] == IDLER_CAM)


@settings(max_examples=30)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 80), gap=st.integers(1, 2),
       window=st.sampled_from([5.0, 50.0, 200.0]))
def test_label_clusters_matches_union_find(seed, n, gap, window):
    hits = _random_hits(np.random.default_rng(seed), n)
    labels = label_clusters(hits, gap=gap, window_ns=window)
    oracle = _union_find_labels(hits, gap=gap, window_ns=window)
    assert _same_partition(labels, oracle)


def test_chunked_clustering_matches_single_pass(rng):
    hits = _random_hits(rng, 3000, size=40, span_ns=2e5)
    p = CameraParams()
    whole = cluster_and_centroid(hits, p, chunk=10**9)
    parts = cluster_and_centroid(hits, p, chunk=50)
    assert len(whole) == len(parts)
    assert np.array_equal(np.sort(whole, order=["t_ns", "x_px", "y_px"]),
                          np.sort(parts, order=["t_ns", "x_px", "y_px"]))


def test_empty_inputs():
    p = CameraParams()
    assert len(label_clusters(np.empty(0, dtype=HIT_DTYPE))) == 0
    assert len(cluster_and_centroid(np.empty(0, dtype=HIT_DTYPE), p)) == 0
    hits, report = detect([], [], [], p, np.random.default_rng(0))
    assert len(hits) == 0 and report.detected == 0


def test_raw_round_trip(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(100)
    hits, _ = detect(x, y, t, p, rng)
    raw = hits_to_raw(hits)
    back = raw_from_bytes(raw_to_bytes(raw))
    assert back.tobytes() == raw.tobytes()
    again = raw_to_hits(back)
    # times are integer ns on disk
    assert np.max(np.abs(again["t_ns"] - hits["t_ns"])) <= 0.5
    assert np.array_equal(again["x"], hits["x"])
    assert np.array_equal(again["amplitude"], hits["amplitude"])


def test_merge_events_sorted(rng):
    p = CameraParams(qe=1.0)
    x, y, t = _isolated_photons(50)
    a = cluster_and_centroid(detect(x, y, t, p, rng, cam=SIGNAL_CAM)[0], p)
    b = cluster_and_centroid(detect(x, y, t + 300, p, rng, cam=IDLER_CAM)[0], p)
    m = merge_events(a, b)
    assert len(m) == 100
    assert np.all(np.diff(m["t_ns"].astype(np.int64)) >= 0)
