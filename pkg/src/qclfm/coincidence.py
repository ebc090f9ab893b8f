"""Coincidence pairing, joint momentum histograms, Gaussian fits, ghost images."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .detector import SIGNAL_CAM, IDLER_CAM

DEFAULT_GATE_NS = 10.0


@dataclass
class CoincidenceRecords:
    """Matched signal/idler detections.

    ``xs``/``ys`` are signal coordinates after calibration (um in the sample
    plane, or 1/um when the signal arm images the Fourier plane); ``kix``/``kiy``
    are idler momenta in 1/um; ``dt_ns = t_signal - t_idler``.
    """

    xs: np.ndarray
    ys: np.ndarray
    kix: np.ndarray
    kiy: np.ndarray
    dt_ns: np.ndarray

    def __post_init__(self):
        for name in ("xs", "ys", "kix", "kiy", "dt_ns"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float))

    def __len__(self) -> int:
        return len(self.xs)

    def subset(self, index) -> "CoincidenceRecords":
        return CoincidenceRecords(self.xs[index], self.ys[index], self.kix[index],
                                  self.kiy[index], self.dt_ns[index])

    @classmethod
    def concatenate(cls, parts) -> "CoincidenceRecords":
        parts = list(parts)
        if not parts:
            return cls(*(np.empty(0) for _ in range(5)))
        return cls(*(np.concatenate([getattr(p, n) for p in parts])
                     for n in ("xs", "ys", "kix", "kiy", "dt_ns")))

    def columns(self):
        return [self.xs, self.ys, self.kix, self.kiy, self.dt_ns]


PAIRS_HEADER = ["xs_um", "ys_um", "kix", "kiy", "dt_ns"]


@dataclass(frozen=True)
class IdlerRegion:
    """Which detections belong to the idler arm.

    Either a camera id (two-camera mode) or a pixel rectangle
    ``[x0, x1) x [y0, y1)`` on a single shared camera.
    """

    cam: int | None = IDLER_CAM
    rect_px: tuple | None = None

    def __post_init__(self):
        if (self.cam is None) == (self.rect_px is None):
            raise ValueError("idler region needs exactly one of cam or rect_px")

    def contains(self, events: np.ndarray) -> np.ndarray:
        if self.rect_px is None:
            return events["cam"] == self.cam
        x0, y0, x1, y1 = self.rect_px
        x, y = events["x_px"], events["y_px"]
        return (x >= x0) & (x < x1) & (y >= y0) & (y < y1)


@dataclass(frozen=True)
class Calibration:
    """Linear pixel-to-physical maps for both arms.

    Signal: ``xs = (x_px - center) * signal_scale``. Idler:
    ``k = (x_px - center) * idler_k_per_px``.
    """

    signal_center_px: tuple = (127.5, 127.5)
    signal_scale: float = 55.0 / 20.0
    idler_center_px: tuple = (127.5, 127.5)
    idler_k_per_px: float = 6.8e-3

    def signal_coords(self, x_px, y_px):
        cx, cy = self.signal_center_px
        return (np.asarray(x_px, float) - cx) * self.signal_scale, (np.asarray(y_px, float) - cy) * self.signal_scale

    def idler_momenta(self, x_px, y_px):
        cx, cy = self.idler_center_px
        return (np.asarray(x_px, float) - cx) * self.idler_k_per_px, (np.asarray(y_px, float) - cy) * self.idler_k_per_px


def match_times(t_signal, t_idler, gate_ns: float = DEFAULT_GATE_NS):
    """Greedy nearest-in-time unique matching of two sorted time streams.

    A pair needs ``|t_s - t_i| <= gate / 2``. Candidates are accepted in order
    of increasing ``|dt|``; ties go to the earlier signal event. Returns index
    arrays ``(signal_idx, idler_idx)`` ordered by idler time.
    """
    ts = np.asarray(t_signal, dtype=float)
    ti = np.asarray(t_idler, dtype=float)
    if not gate_ns > 0:
        raise ValueError(f"gate must be positive, got {gate_ns}")
    if np.any(np.diff(ts) < 0) or np.any(np.diff(ti) < 0):
        raise ValueError("event times must be sorted")
    if len(ts) == 0 or len(ti) == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    half = gate_ns / 2.0
    lo = np.searchsorted(ts, ti - half, side="left")
    hi = np.searchsorted(ts, ti + half, side="right")
    counts = hi - lo
    total = int(counts.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    idl = np.repeat(np.arange(len(ti)), counts)
    starts = np.repeat(np.cumsum(counts) - counts, counts)
    sig = np.repeat(lo, counts) + (np.arange(total) - starts)
    adt = np.abs(ts[sig] - ti[idl])

    # candidates whose signal and idler appear exactly once cannot conflict
    sig_mult = np.bincount(sig, minlength=len(ts))[sig]
    idl_mult = counts[idl]
    free = (sig_mult == 1) & (idl_mult == 1)
    keep_sig = [sig[free]]
    keep_idl = [idl[free]]

    contested = np.flatnonzero(~free)
    if len(contested):
        order = contested[np.lexsort((sig[contested], adt[contested]))]
        used_s = set()
        used_i = set()
        out_s, out_i = [], []
        for c in order:
            s, i = int(sig[c]), int(idl[c])
            if s in used_s or i in used_i:
                continue
            used_s.add(s)
            used_i.add(i)
            out_s.append(s)
            out_i.append(i)
        keep_sig.append(np.array(out_s, dtype=np.int64))
        keep_idl.append(np.array(out_i, dtype=np.int64))
    s_idx = np.concatenate(keep_sig)
    i_idx = np.concatenate(keep_idl)
    order = np.argsort(i_idx, kind="stable")
    return s_idx[order], i_idx[order]


def split_arms(events: np.ndarray, idler_region: IdlerRegion):
    is_idler = idler_region.contains(events)
    if idler_region.rect_px is None:
        is_signal = events["cam"] == SIGNAL_CAM
    else:
        is_signal = ~is_idler
    return events[is_signal], events[is_idler]


def pair_events(
    events: np.ndarray,
    gate_ns: float = DEFAULT_GATE_NS,
    idler_region: IdlerRegion = IdlerRegion(),
    calibration: Calibration = Calibration(),
    idler_shift_ns: float = 0.0,
) -> CoincidenceRecords:
    """Pair signal and idler detection events (EVT1 record array, sorted by time).

    ``idler_shift_ns`` delays the idler stream before matching; a shift much
    larger than the gate leaves only accidental coincidences.
    """
    t = events["t_ns"].astype(np.int64)
    if np.any(np.diff(t) < 0):
        raise ValueError("events must be sorted by time")
    sig, idl = split_arms(events, idler_region)
    ts = sig["t_ns"].astype(float)
    ti = idl["t_ns"].astype(float) + idler_shift_ns
    s_idx, i_idx = match_times(ts, ti, gate_ns)
    xs, ys = calibration.signal_coords(sig["x_px"][s_idx], sig["y_px"][s_idx])
    kx, ky = calibration.idler_momenta(idl["x_px"][i_idx], idl["y_px"][i_idx])
    return CoincidenceRecords(xs, ys, kx, ky, ts[s_idx] - ti[i_idx])


def accidental_floor(events, gate_ns=DEFAULT_GATE_NS, idler_region=IdlerRegion(),
                     calibration=Calibration(), shift_ns=None) -> CoincidenceRecords:
    """Records from pairing against an idler stream delayed far beyond the gate."""
    if shift_ns is None:
        shift_ns = 1000.0 * gate_ns
    return pair_events(events, gate_ns, idler_region, calibration, idler_shift_ns=shift_ns)


def expected_accidentals(rate1_per_s, rate2_per_s, gate_ns, duration_s) -> float:
    """``r1 r2 tau T`` for two independent Poisson streams."""
    return rate1_per_s * rate2_per_s * gate_ns * 1e-9 * duration_s


# --- joint momentum distribution -------------------------------------------------------


@dataclass
class JointMomentumHistogram:
    """Histograms of the dual-Fourier-plane calibration run.

    ``joint_x[i, j]`` counts pairs with ``k1x`` in bin ``i`` and ``k2x`` in bin
    ``j`` (likewise ``joint_y``); ``sum_hist[iy, ix]`` counts
    ``(k1x + k2x, k1y + k2y)``. Counts are floats because accidental
    background may have been subtracted.
    """

    edges: np.ndarray
    joint_x: np.ndarray
    joint_y: np.ndarray
    sum_edges: np.ndarray
    sum_hist: np.ndarray
    n_records: int
    background_subtracted: bool = False
    low_statistics: bool = False

    @property
    def sum_centers(self) -> np.ndarray:
        return 0.5 * (self.sum_edges[1:] + self.sum_edges[:-1])

    def sum_profile_x(self, half_width_bins: int = 0) -> np.ndarray:
        """Cross-section of the sum histogram along kx through its central row(s)."""
        c = self.sum_hist.shape[0] // 2
        return self.sum_hist[c - half_width_bins:c + half_width_bins + 1].sum(axis=0)

    def sum_profile_y(self, half_width_bins: int = 0) -> np.ndarray:
        c = self.sum_hist.shape[1] // 2
        return self.sum_hist[:, c - half_width_bins:c + half_width_bins + 1].sum(axis=1)


MIN_RECORDS = 1000


def joint_momentum_histogram(
    records: CoincidenceRecords,
    k_range: float,
    bin_width: float,
    sum_range: float | None = None,
    sum_bin_width: float | None = None,
    background: CoincidenceRecords | None = None,
    background_scale: float = 1.0,
) -> JointMomentumHistogram:
    """Joint and sum-coordinate histograms of signal (``xs``) and idler (``kix``) momenta.

    ``k_range`` is the half-width of the joint histograms. The sum histogram
    is centred on zero with half-width ``sum_range`` and an odd number of bins
    so one bin straddles the origin. ``background`` records (e.g. from
    :func:`accidental_floor`) are histogrammed the same way, scaled and
    subtracted.
    """
    n = len(records)
    low = n < MIN_RECORDS
    if low:
        warnings.warn(f"only {n} coincidence records; histograms are unreliable", RuntimeWarning,
                      stacklevel=2)
    nb = int(round(2 * k_range / bin_width))
    edges = np.linspace(-k_range, k_range, nb + 1)
    sum_bin_width = bin_width if sum_bin_width is None else sum_bin_width
    sum_range = k_range / 4 if sum_range is None else sum_range
    ns = 2 * int(np.ceil(sum_range / sum_bin_width - 0.5)) + 1
    half = ns * sum_bin_width / 2
    sum_edges = np.linspace(-half, half, ns + 1)

    def hists(r):
        jx = np.histogram2d(r.xs, r.kix, bins=(edges, edges))[0]
        jy = np.histogram2d(r.ys, r.kiy, bins=(edges, edges))[0]
        sh = np.histogram2d(r.ys + r.kiy, r.xs + r.kix, bins=(sum_edges, sum_edges))[0]
        return jx, jy, sh

    jx, jy, sh = hists(records)
    if background is not None and len(background):
        bx, by, bs = hists(background)
        jx = jx - background_scale * bx
        jy = jy - background_scale * by
        sh = sh - background_scale * bs
    return JointMomentumHistogram(edges, jx, jy, sum_edges, sh, n,
                                  background_subtracted=background is not None, low_statistics=low)


# --- Gaussian fit ---------------------------------------------------------------------


class FitError(RuntimeError):
    """Gaussian fit failed; ``last`` holds the last iterate ``(a, b, sigma)``."""

    def __init__(self, message, last):
        super().__init__(message)
        self.last = last


@dataclass(frozen=True)
class GaussianFit:
    a: float
    b: float
    sigma: float
    residual_norm: float
    sigma_px: float | None = None


def gaussian(k, a, b, sigma):
    return a * np.exp(-((k - b) ** 2) / (2.0 * sigma**2))


def fit_gaussian(profile, centers, pitch_per_px: float | None = None, max_iter: int = 200) -> GaussianFit:
    """Least-squares fit of ``a exp(-(k - b)^2 / (2 sigma^2))`` to a 1D histogram.

    Raises :class:`FitError` when the optimiser hits ``max_iter`` or the width
    exceeds the histogram's domain (a flat profile).
    """
    y = np.asarray(profile, dtype=float)
    k = np.asarray(centers, dtype=float)
    if y.shape != k.shape or y.ndim != 1:
        raise ValueError("profile and centers must be 1D arrays of equal length")
    if len(y) < 5:
        raise ValueError(f"need at least 5 bins, got {len(y)}")
    if np.any(y < 0):
        raise ValueError("histogram counts must be non-negative")
    if not np.any(y > 0):
        raise FitError("empty histogram", (0.0, 0.0, np.nan))
    domain = k.max() - k.min()
    # moment estimates as the starting point
    w = y / y.sum()
    b0 = float(np.sum(w * k))
    s0 = float(np.sqrt(max(np.sum(w * (k - b0) ** 2), (domain / len(k)) ** 2)))
    a0 = float(y.max())
    scale = a0

    def resid(p):
        return (gaussian(k, p[0], p[1], p[2]) - y) / scale

    res = least_squares(resid, x0=[a0, b0, s0], method="lm", max_nfev=max_iter * 4,
                        xtol=1e-15, ftol=1e-15, gtol=1e-15)
    a, b, s = res.x
    s = abs(s)
    if res.status == 0:
        raise FitError(f"fit did not converge in {max_iter} iterations", (a, b, s))
    if s > domain:
        raise FitError(f"fitted width {s:.3g} exceeds the histogram domain {domain:.3g}", (a, b, s))
    rnorm = float(np.linalg.norm(gaussian(k, a, b, s) - y))
    return GaussianFit(float(a), float(b), float(s), rnorm,
                       None if pitch_per_px is None else float(s / pitch_per_px))


# --- ghost imaging --------------------------------------------------------------------


def ghost_image(records: CoincidenceRecords, edges_x, edges_y=None, singles=None,
                min_singles: float = 1.0) -> np.ndarray:
    """Coincidence histogram in idler coordinates, indexed ``[ky, kx]``.

    When ``singles`` (a histogram of all idler detections on the same bins) is
    given, the result is normalised by it; bins with fewer than
    ``min_singles`` counts are NaN.
    """
    edges_y = edges_x if edges_y is None else edges_y
    hist = np.histogram2d(records.kiy, records.kix, bins=(edges_y, edges_x))[0]
    if singles is None:
        return hist
    singles = np.asarray(singles, dtype=float)
    out = np.full(hist.shape, np.nan)
    ok = singles >= min_singles
    out[ok] = hist[ok] / singles[ok]
    return out


def idler_singles(kix, kiy, edges_x, edges_y=None) -> np.ndarray:
    edges_y = edges_x if edges_y is None else edges_y
    return np.histogram2d(kiy, kix, bins=(edges_y, edges_x))[0]
