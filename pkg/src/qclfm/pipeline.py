"""Forward simulation: pairs through the scene, onto the cameras, back to coincidences.

Two detection models are offered. ``ideal_records`` hands transmitted
photons straight to the reconstruction with optional Gaussian position and
momentum noise (fast; used for large sweeps). ``camera_events`` runs the full
event-camera chain (quantum efficiency, intensifier clusters, clock and
timing skew) and returns the detection events that :func:`pair_events`
consumes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coincidence import Calibration, CoincidenceRecords, IdlerRegion, pair_events
from .detector import IDLER_CAM, SIGNAL_CAM, CameraParams, DetectReport, cluster_and_centroid, detect
from .io import EVENT_DTYPE
from .rays import OpticalSystem, solve_angles
from .scene import Illumination, as_scene, illuminate
from .source import PhotonPairs, PumpParams, batch_seed, sample_pairs

DEFAULT_BATCH = 1_000_000
THREADS_ENV = "QCLFM_THREADS"


def thread_count(env=None) -> int:
    """Worker cap from ``QCLFM_THREADS`` (default 1)."""
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def parallel_map(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, fanned out over threads; order is preserved."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))


def depth_seed(seed: int, index: int) -> int:
    """Independent per-depth seed for sweeps that re-simulate at every z."""
    return int(np.random.SeedSequence([int(seed), 0x5EED, int(index)]).generate_state(1)[0])


@dataclass(frozen=True)
class IdealDetection:
    """Perfect detectors plus optional Gaussian noise on the measured coordinates."""

    position_blur_um: float = 0.0
    momentum_blur_per_um: float = 0.0


def calibration_from_optics(signal_arm: OpticalSystem, idler_arm: OpticalSystem,
                            pitch_um: float, wavelength_um: float,
                            signal_center_px=(127.5, 127.5), idler_center_px=(127.5, 127.5)) -> Calibration:
    """Pixel calibration implied by the two arms.

    The signal arm must image the sample (``B = 0``), giving ``pitch / |M|``
    um per pixel. The idler arm must map angle to position (``A = 0``), so a
    camera offset ``r`` means ``theta = r / B`` and ``k = k0 r / B``.
    """
    ms = signal_arm.matrix
    if abs(ms.B) > 1e-6 * max(1.0, abs(ms.A)):
        raise ValueError("signal arm does not image the sample plane (B != 0)")
    mi = idler_arm.matrix
    if abs(mi.A) > 1e-9:
        raise ValueError("idler arm does not map the crystal's far field (A != 0)")
    theta_per_px, _ = solve_angles(mi, 0.0, pitch_um)
    k0 = 2.0 * np.pi / wavelength_um
    return Calibration(tuple(signal_center_px), pitch_um / abs(ms.A), tuple(idler_center_px),
                       abs(float(theta_per_px)) * k0)


def _split_counts(n: int, batch_size: int) -> np.ndarray:
    nbatch = max(1, -(-n // batch_size))
    counts = np.full(nbatch, n // nbatch)
    counts[: n - counts.sum()] += 1
    return counts


def pair_batches(pump: PumpParams, n_pairs: int, seed: int, duration_s: float = 1.0,
                 signal_sigma=None, batch_size: int = DEFAULT_BATCH):
    """Yield ``(batch_index, pairs)`` over consecutive equal time slices."""
    counts = _split_counts(int(n_pairs), batch_size)
    slice_s = duration_s / len(counts)
    for b, count in enumerate(counts):
        if count == 0:
            continue
        yield b, sample_pairs(pump, count, batch_seed(seed, b), slice_s, signal_sigma=signal_sigma,
                              t0_ns=b * slice_s * 1e9)


def _rng(seed: int, batch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(batch), int(stream)]))


def ideal_records(
    scene,
    pump: PumpParams,
    n_pairs: int,
    seed: int,
    detection: IdealDetection = IdealDetection(),
    illumination: Illumination = Illumination(),
    signal_sigma=None,
    exact_tilt: bool = False,
    batch_size: int = DEFAULT_BATCH,
) -> CoincidenceRecords:
    """Coincidences of every transmitted signal photon with its idler, noise optional."""
    scene = as_scene(scene)
    parts = []
    for b, pairs in pair_batches(pump, n_pairs, seed, 1.0, signal_sigma, batch_size):
        res = illuminate(scene, pairs.ksx, pairs.ksy, _rng(seed, b, 1), illumination, exact_tilt=exact_tilt)
        a = res.accepted
        m = int(a.sum())
        xs, ys = res.x_um[a], res.y_um[a]
        kx, ky = pairs.kix[a], pairs.kiy[a]
        rng = _rng(seed, b, 2)
        if detection.position_blur_um > 0:
            xs = xs + rng.normal(0.0, detection.position_blur_um, m)
            ys = ys + rng.normal(0.0, detection.position_blur_um, m)
        if detection.momentum_blur_per_um > 0:
            kx = kx + rng.normal(0.0, detection.momentum_blur_per_um, m)
            ky = ky + rng.normal(0.0, detection.momentum_blur_per_um, m)
        parts.append(CoincidenceRecords(xs, ys, kx, ky, np.zeros(m)))
    return CoincidenceRecords.concatenate(parts)


def ideal_idler_singles(pump: PumpParams, n_pairs: int, seed: int, edges_x, edges_y=None,
                        signal_sigma=None, batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Idler momentum histogram of every pair of an :func:`ideal_records` run (same seed)."""
    edges_y = edges_x if edges_y is None else edges_y
    total = np.zeros((len(edges_y) - 1, len(edges_x) - 1))
    for _, pairs in pair_batches(pump, n_pairs, seed, 1.0, signal_sigma, batch_size):
        total += np.histogram2d(pairs.kiy, pairs.kix, bins=(edges_y, edges_x))[0]
    return total


@dataclass
class CameraRun:
    """Detection events of a camera simulation plus bookkeeping."""

    events: np.ndarray
    n_pairs: int
    transmitted: int
    signal: DetectReport = field(default_factory=DetectReport)
    idler: DetectReport = field(default_factory=DetectReport)
    both_detected: int = 0
    truth: PhotonPairs | None = None

    def summary(self) -> dict:
        return {
            "pairs": int(self.n_pairs),
            "signal_transmitted": int(self.transmitted),
            "signal_detected": int(self.signal.detected),
            "idler_detected": int(self.idler.detected),
            "pairs_both_detected": int(self.both_detected),
            "signal_off_sensor": int(self.signal.off_sensor),
            "idler_off_sensor": int(self.idler.off_sensor),
            "dark_events": int(self.signal.dark + self.idler.dark),
            "events": int(len(self.events)),
        }


def camera_events(
    scene,
    pump: PumpParams,
    duration_s: float,
    seed: int,
    calibration: Calibration = Calibration(),
    signal_camera: CameraParams = CameraParams(),
    idler_camera: CameraParams | None = None,
    idler_region: IdlerRegion = IdlerRegion(),
    illumination: Illumination = Illumination(),
    signal_sigma=None,
    fourier_signal: bool = False,
    n_pairs: int | None = None,
    keep_truth: bool = False,
    batch_size: int = DEFAULT_BATCH,
    gap_px: int = 1,
    window_ns: float = 100.0,
) -> CameraRun:
    """Simulate ``duration_s`` of acquisition and return centroided events.

    ``scene=None`` means no target. With ``fourier_signal`` the signal camera
    images the crystal's far field too (the momentum-correlation setup), so
    signal pixels encode ``k_s`` with the idler scale. In single-camera mode
    (``idler_region.rect_px`` set) both arms land on camera 0 and are told
    apart only by position.
    """
    if duration_s < 0:
        raise ValueError("duration must be non-negative")
    if n_pairs is None:
        n_pairs = int(np.random.default_rng(np.random.SeedSequence([int(seed), 0xD0])).poisson(
            pump.pair_rate_per_s * duration_s))
    idler_camera = signal_camera if idler_camera is None else idler_camera
    single = idler_region.rect_px is not None
    icam = SIGNAL_CAM if single else IDLER_CAM
    scene = None if scene is None else as_scene(scene)
    hits = []
    sig_rep, idl_rep = DetectReport(), DetectReport()
    transmitted = both = 0
    truths = []
    if n_pairs == 0 or duration_s == 0:
        return CameraRun(np.empty(0, dtype=EVENT_DTYPE), 0, 0)
    slice_ns = duration_s * 1e9 / len(_split_counts(n_pairs, batch_size))
    for b, pairs in pair_batches(pump, n_pairs, seed, duration_s, signal_sigma, batch_size):
        n = len(pairs)
        if fourier_signal:
            ok = np.ones(n, dtype=bool)
            spx = pairs.ksx / calibration.idler_k_per_px + calibration.signal_center_px[0]
            spy = pairs.ksy / calibration.idler_k_per_px + calibration.signal_center_px[1]
        elif scene is None:
            ok = np.ones(n, dtype=bool)
            half = signal_camera.width / 2.0
            rng = _rng(seed, b, 1)
            spx = rng.uniform(-half, half, n) + calibration.signal_center_px[0]
            spy = rng.uniform(-half, half, n) + calibration.signal_center_px[1]
        else:
            res = illuminate(scene, pairs.ksx, pairs.ksy, _rng(seed, b, 1), illumination)
            ok = res.accepted
            spx = res.x_um / calibration.signal_scale + calibration.signal_center_px[0]
            spy = res.y_um / calibration.signal_scale + calibration.signal_center_px[1]
        transmitted += int(ok.sum())
        rng = _rng(seed, b, 2)
        t0 = b * slice_ns
        sel = np.flatnonzero(ok)
        h_s, rep_s, det_s = detect(spx[sel], spy[sel], pairs.t_ns[sel], signal_camera, rng, SIGNAL_CAM,
                                   duration_ns=slice_ns, t0_ns=t0, return_detected=True)
        ipx = pairs.kix / calibration.idler_k_per_px + calibration.idler_center_px[0]
        ipy = pairs.kiy / calibration.idler_k_per_px + calibration.idler_center_px[1]
        # one camera has one dark-count process, already drawn with the signal arm
        h_i, rep_i, det_i = detect(ipx, ipy, pairs.t_ns, idler_camera, rng, icam,
                                   duration_ns=0.0 if single else slice_ns, t0_ns=t0,
                                   return_detected=True)
        rep_s.photons_in += n - len(sel)
        sig_rep = sig_rep.merge(rep_s)
        idl_rep = idl_rep.merge(rep_i)
        both += int(np.sum(det_i[sel] & det_s))
        hits.extend([h_s, h_i])
        if keep_truth:
            truths.append(pairs)
    allhits = np.concatenate(hits)
    events = cluster_and_centroid(allhits, signal_camera, gap_px, window_ns)
    truth = PhotonPairs.concatenate(truths) if keep_truth else None
    return CameraRun(events, int(n_pairs), transmitted, sig_rep, idl_rep, both, truth)


def camera_records(run: CameraRun, gate_ns: float = 10.0, idler_region: IdlerRegion = IdlerRegion(),
                   calibration: Calibration = Calibration()) -> CoincidenceRecords:
    return pair_events(run.events, gate_ns, idler_region, calibration)
