"""Intensified event-camera model: photon detection, clustering, centroiding.

A detected photon becomes a small cluster of pixel hits. Each hit carries a
clock-quantised timestamp that is late by an amount decreasing linearly with
the pixel's amplitude, so the brightest pixel of a cluster is registered
first. Clustering regroups hits that touch in space and time, takes the
amplitude-weighted centroid as position, and the brightest pixel's time
minus the modelled skew as event time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .io import EVENT_DTYPE

SIGNAL_CAM = 0
IDLER_CAM = 1

#: in-memory hit record; times stay in float ns until written as RAW1
HIT_DTYPE = np.dtype([("cam", "u1"), ("x", "u2"), ("y", "u2"), ("t_ns", "f8"), ("amplitude", "f4")])


@dataclass(frozen=True)
class CameraParams:
    """Event camera with an attached image intensifier.

    ``sigma_t_ns`` is the per-event timing accuracy after skew correction;
    the random per-event jitter is sized so clock quantisation and integer-ns
    storage fit inside it. ``blur_px`` adds Gaussian wander of the intensifier
    spot (the clustering blur knob).
    """

    width: int = 256
    height: int = 256
    pitch_um: float = 55.0
    clock_ns: float = 1.6
    sigma_t_ns: float = 2.4
    qe: float = 0.07
    cluster_min: int = 2
    cluster_max: int = 6
    footprint_sigma_px: float = 0.7
    gain_mean: float = 1000.0
    gain_spread: float = 0.3
    skew_ns: float = 20.0
    skew_ref_amplitude: float = 2000.0
    latency_ns: float = 100.0
    dark_rate_per_s: float = 0.0
    blur_px: float = 0.0

    def __post_init__(self):
        if not 0 < self.qe <= 1:
            raise ValueError(f"quantum efficiency must be in (0, 1], got {self.qe}")
        if not self.pitch_um > 0:
            raise ValueError("pixel pitch must be positive")
        if not self.clock_ns > 0:
            raise ValueError("clock resolution must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor must have at least one pixel")
        if not 1 <= self.cluster_min <= self.cluster_max <= 9:
            raise ValueError("cluster sizes must satisfy 1 <= min <= max <= 9")
        if self.sigma_t_ns < 0 or self.blur_px < 0 or self.dark_rate_per_s < 0:
            raise ValueError("sigma_t_ns, blur_px and dark_rate_per_s must be non-negative")

    @property
    def jitter_ns(self) -> float:
        """Std of the random per-event delay."""
        budget = self.sigma_t_ns**2 - self.clock_ns**2 / 12.0 - 1.0 / 12.0
        return float(np.sqrt(max(budget, 0.0)))

    def skew(self, amplitude) -> np.ndarray:
        """Extra delay of a pixel with the given amplitude."""
        a = np.asarray(amplitude, dtype=float)
        return self.skew_ns * np.clip(1.0 - a / self.skew_ref_amplitude, 0.0, 1.0)


@dataclass
class DetectReport:
    photons_in: int = 0
    detected: int = 0
    off_sensor: int = 0
    dark: int = 0

    def merge(self, other: "DetectReport") -> "DetectReport":
        return DetectReport(self.photons_in + other.photons_in, self.detected + other.detected,
                            self.off_sensor + other.off_sensor, self.dark + other.dark)


_NEIGHBOURS = np.array([(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)])


def detect(
    x_px,
    y_px,
    t_ns,
    params: CameraParams,
    rng,
    cam: int = SIGNAL_CAM,
    duration_ns: float | None = None,
    t0_ns: float = 0.0,
    return_detected: bool = False,
):
    """Turn photons at the camera plane (pixel units, sorted times) into raw hits.

    Pixel ``i`` spans ``[i - 0.5, i + 0.5)``. Returns ``(hits, report)``; with
    ``return_detected`` also the boolean mask of input photons that produced a
    cluster. Dark counts are single-pixel hits spread over
    ``[t0, t0 + duration)``.
    """
    x = np.asarray(x_px, dtype=float)
    y = np.asarray(y_px, dtype=float)
    t = np.asarray(t_ns, dtype=float)
    n = len(t)
    report = DetectReport(photons_in=n)
    keep = rng.uniform(0.0, 1.0, n) < params.qe
    if params.blur_px > 0:
        x = x + rng.normal(0.0, params.blur_px, n)
        y = y + rng.normal(0.0, params.blur_px, n)
    on = (x >= -0.5) & (x < params.width - 0.5) & (y >= -0.5) & (y < params.height - 0.5)
    report.off_sensor = int(np.sum(keep & ~on))
    keep &= on
    idx = np.flatnonzero(keep)
    report.detected = len(idx)
    x, y, t = x[idx], y[idx], t[idx]
    m = len(idx)

    px = np.floor(x + 0.5).astype(np.int64)
    py = np.floor(y + 0.5).astype(np.int64)
    if params.cluster_max == 1:
        sizes = np.ones(m, dtype=np.int64)
    else:
        sizes = rng.integers(params.cluster_min, params.cluster_max + 1, m)
    cx = px[:, None] + _NEIGHBOURS[None, :, 0]
    cy = py[:, None] + _NEIGHBOURS[None, :, 1]
    d2 = (cx - x[:, None]) ** 2 + (cy - y[:, None]) ** 2
    weight = np.exp(-d2 / (2.0 * params.footprint_sigma_px**2))
    inside = (cx >= 0) & (cx < params.width) & (cy >= 0) & (cy < params.height)
    weight = np.where(inside, weight, -1.0)
    order = np.argsort(-weight, axis=1, kind="stable")
    rank = np.empty_like(order)
    np.put_along_axis(rank, order, np.arange(9)[None, :].repeat(m, axis=0), axis=1)
    chosen = (rank < sizes[:, None]) & (weight > 0)

    gain = params.gain_mean * rng.lognormal(-0.5 * params.gain_spread**2, params.gain_spread, m)
    jitter = rng.normal(0.0, params.jitter_ns, m)
    amp = (gain[:, None] * np.maximum(weight, 0.0))[chosen]
    photon = np.nonzero(chosen)[0]
    t_hit = t[photon] + params.latency_ns + jitter[photon] + params.skew(amp)
    t_hit = np.floor(np.maximum(t_hit, 0.0) / params.clock_ns) * params.clock_ns

    hits = np.empty(len(amp), dtype=HIT_DTYPE)
    hits["cam"] = cam
    hits["x"] = cx[chosen]
    hits["y"] = cy[chosen]
    hits["t_ns"] = t_hit
    hits["amplitude"] = amp

    if params.dark_rate_per_s > 0:
        if duration_ns is None:
            duration_ns = float(t.max() - t.min()) if len(t) else 0.0
        nd = rng.poisson(params.dark_rate_per_s * duration_ns * 1e-9)
        dark = np.empty(nd, dtype=HIT_DTYPE)
        dark["cam"] = cam
        dark["x"] = rng.integers(0, params.width, nd)
        dark["y"] = rng.integers(0, params.height, nd)
        td = t0_ns + rng.uniform(0.0, duration_ns, nd) + params.latency_ns
        dark["amplitude"] = params.gain_mean * rng.lognormal(-0.5 * params.gain_spread**2,
                                                             params.gain_spread, nd)
        dark["t_ns"] = np.floor((td + params.skew(dark["amplitude"])) / params.clock_ns) * params.clock_ns
        report.dark = int(nd)
        hits = np.concatenate([hits, dark])
    hits = hits[np.argsort(hits["t_ns"], kind="stable")]
    if return_detected:
        return hits, report, keep
    return hits, report


def hits_to_raw(hits: np.ndarray) -> np.ndarray:
    from .io import RAW_DTYPE
    out = np.empty(len(hits), dtype=RAW_DTYPE)
    for name in ("cam", "x", "y", "amplitude"):
        out[name] = hits[name]
    out["t_ns"] = np.round(hits["t_ns"]).astype(np.uint64)
    return out


def raw_to_hits(raw: np.ndarray) -> np.ndarray:
    out = np.empty(len(raw), dtype=HIT_DTYPE)
    for name in ("cam", "x", "y", "amplitude"):
        out[name] = raw[name]
    out["t_ns"] = raw["t_ns"].astype(float)
    return out


def _segments(t: np.ndarray, window_ns: float, chunk: int):
    """Index ranges splitting time-sorted hits only where a gap exceeds the window."""
    n = len(t)
    if n == 0:
        return []
    breaks = np.flatnonzero(np.diff(t) > window_ns) + 1
    out = []
    start = 0
    while start < n:
        target = start + chunk
        if target >= n:
            out.append((start, n))
            break
        j = np.searchsorted(breaks, target)
        stop = int(breaks[j]) if j < len(breaks) else n
        out.append((start, stop))
        start = stop
    return out


def label_clusters(hits: np.ndarray, gap: int = 1, window_ns: float = 100.0) -> np.ndarray:
    """Connected-component labels for time-sorted hits (one camera or several)."""
    n = len(hits)
    if n == 0:
        return np.empty(0, dtype=np.int64)
    t = hits["t_ns"].astype(float)
    x = hits["x"].astype(np.int64)
    y = hits["y"].astype(np.int64)
    cam = hits["cam"]
    rows, cols = [], []
    k = 1
    while k < n:
        dt = t[k:] - t[:-k]
        close = dt <= window_ns
        if not close.any():
            break
        link = (close & (cam[k:] == cam[:-k]) & (np.abs(x[k:] - x[:-k]) <= gap)
                & (np.abs(y[k:] - y[:-k]) <= gap))
        i = np.flatnonzero(link)
        rows.append(i)
        cols.append(i + k)
        k += 1
    if rows:
        r = np.concatenate(rows)
        c = np.concatenate(cols)
    else:
        r = c = np.empty(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return labels


def cluster_and_centroid(
    hits: np.ndarray,
    params: CameraParams = CameraParams(),
    gap: int = 1,
    window_ns: float = 100.0,
    chunk: int = 500_000,
) -> np.ndarray:
    """Group raw hits into single-photon events (EVT1 records sorted by time).

    Hits join a cluster when they are 8-connected within ``gap`` pixels and
    within ``window_ns`` of a member. Work proceeds in chunks cut only at
    time gaps longer than the window, so no cluster straddles a boundary.
    """
    hits = np.asarray(hits)
    if len(hits) == 0:
        return np.empty(0, dtype=EVENT_DTYPE)
    hits = hits[np.argsort(hits["t_ns"], kind="stable")]
    parts = []
    for start, stop in _segments(hits["t_ns"].astype(float), window_ns, chunk):
        parts.append(_centroid_chunk(hits[start:stop], params, gap, window_ns))
    events = np.concatenate(parts)
    return events[np.argsort(events["t_ns"], kind="stable")]


def _centroid_chunk(hits, params, gap, window_ns):
    labels = label_clusters(hits, gap, window_ns)
    nlab = int(labels.max()) + 1
    a = hits["amplitude"].astype(float)
    wsum = np.bincount(labels, weights=a, minlength=nlab)
    xc = np.bincount(labels, weights=a * hits["x"], minlength=nlab) / wsum
    yc = np.bincount(labels, weights=a * hits["y"], minlength=nlab) / wsum
    size = np.bincount(labels, minlength=nlab)
    # brightest hit of each cluster
    order = np.lexsort((-a, labels))
    first = np.ones(len(order), dtype=bool)
    first[1:] = labels[order][1:] != labels[order][:-1]
    peak = order[first]
    t_peak = hits["t_ns"][peak].astype(float)
    t_evt = t_peak - params.latency_ns - params.skew(a[peak]) + params.clock_ns / 2.0
    ev = np.empty(nlab, dtype=EVENT_DTYPE)
    ev["cam"] = hits["cam"][peak]
    ev["x_px"] = xc
    ev["y_px"] = yc
    ev["t_ns"] = np.round(np.maximum(t_evt, 0.0)).astype(np.uint64)
    ev["cluster_size"] = np.minimum(size, np.iinfo(np.uint16).max)
    return ev


def merge_events(*streams) -> np.ndarray:
    events = np.concatenate([np.asarray(s, dtype=EVENT_DTYPE) for s in streams])
    return events[np.argsort(events["t_ns"], kind="stable")]
