"""Digital refocusing: ray-trace rebinning followed by Gerchberg-Saxton retrieval.

Depths follow the sample convention: ``z`` is the sample's axial position
relative to the measurement (objective focal) plane, positive towards the
objective. Ray tracing moves each photon from the measurement plane to the
plane at ``z``; the wave step propagates the measured amplitude by ``z`` to
reach the sample and by ``-z`` to come back.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .coincidence import CoincidenceRecords
from .fields import ComplexField, propagate

DEFAULT_SMOOTHING_PX = 0.5


@dataclass(frozen=True)
class GridSpec:
    """Reconstruction grid in sample-plane coordinates, centred on the optical axis."""

    width: int = 128
    height: int = 128
    pitch_um: float = 1.0
    wavelength_um: float = 0.810

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("grid must be at least 2x2")
        if not self.pitch_um > 0:
            raise ValueError("grid pitch must be positive")
        if not self.wavelength_um > 0:
            raise ValueError("wavelength must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength_um

    def indices(self, x_um, y_um, bilinear: bool = False):
        fx = np.asarray(x_um) / self.pitch_um + self.width // 2
        fy = np.asarray(y_um) / self.pitch_um + self.height // 2
        if bilinear:
            return fx, fy
        return np.floor(fx + 0.5).astype(np.int64), np.floor(fy + 0.5).astype(np.int64)


class RefocusWarning(UserWarning):
    """Photons fell off the reconstruction grid."""


@dataclass(frozen=True, eq=False)
class ShiftedSumImage:
    """Coincidence counts after per-photon ray shifts to depth ``z_um``.

    ``amplitude`` is the square root of the counts after optional Gaussian
    smoothing (``smoothing_px``; zero leaves the counts untouched).
    """

    counts: np.ndarray
    z_um: float
    grid: GridSpec
    dropped: int = 0
    smoothing_px: float = 0.0

    @property
    def pitch_um(self) -> float:
        return self.grid.pitch_um

    @property
    def amplitude(self) -> np.ndarray:
        c = self.counts
        if self.smoothing_px > 0:
            c = gaussian_filter(c, self.smoothing_px, mode="wrap")
        return np.sqrt(np.maximum(c, 0.0))

    def field(self) -> ComplexField:
        return ComplexField(self.amplitude.astype(np.complex128), self.grid.pitch_um, self.grid.wavelength_um)


def ray_angles(kx, ky, wavelength_um: float):
    """Paraxial ray slopes ``k_t / k_z`` for transverse wavenumbers ``(kx, ky)``."""
    k0 = 2.0 * np.pi / wavelength_um
    kz = np.sqrt(k0**2 - np.asarray(kx) ** 2 - np.asarray(ky) ** 2)
    return np.asarray(kx) / kz, np.asarray(ky) / kz


def ray_trace_refocus(
    records: CoincidenceRecords,
    z_um: float,
    grid: GridSpec = GridSpec(),
    negate_idler: bool = True,
    bilinear: bool = False,
    smoothing_px: float = DEFAULT_SMOOTHING_PX,
    warn_dropped: bool = True,
) -> ShiftedSumImage:
    """Shift every signal position by ``theta * z`` and histogram onto ``grid``.

    The signal momentum is inferred as ``-k_idler`` (``negate_idler``);
    turning that off exists only for sign regression checks. Photons landing
    off the grid are counted in ``dropped``.
    """
    if len(records) == 0:
        raise ValueError("no coincidence records to refocus")
    z_um = float(z_um)
    if not np.isfinite(z_um):
        raise ValueError("refocus depth must be finite")
    sign = -1.0 if negate_idler else 1.0
    tx, ty = ray_angles(sign * records.kix, sign * records.kiy, grid.wavelength_um)
    x = records.xs + tx * z_um
    y = records.ys + ty * z_um
    h, w = grid.shape
    if bilinear:
        fx, fy = grid.indices(x, y, bilinear=True)
        x0 = np.floor(fx).astype(np.int64)
        y0 = np.floor(fy).astype(np.int64)
        ax, ay = fx - x0, fy - y0
        counts = np.zeros(h * w)
        inside_any = np.zeros(len(x), dtype=bool)
        for dx, dy, wt in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                           (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
            ix, iy = x0 + dx, y0 + dy
            ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
            inside_any |= ok & (wt > 0)
            counts += np.bincount(iy[ok] * w + ix[ok], weights=wt[ok], minlength=h * w)
        dropped = int(np.sum(~inside_any))
        counts = counts.reshape(h, w)
    else:
        ix, iy = grid.indices(x, y)
        ok = (ix >= 0) & (ix < w) & (iy >= 0) & (iy < h)
        dropped = int(np.sum(~ok))
        counts = np.bincount(iy[ok] * w + ix[ok], minlength=h * w).reshape(h, w).astype(float)
    if dropped and warn_dropped:
        warnings.warn(f"{dropped} of {len(records)} photons fell off the grid at z = {z_um} um",
                      RefocusWarning, stacklevel=2)
    return ShiftedSumImage(counts, z_um, grid, dropped, smoothing_px)


@dataclass(frozen=True, eq=False)
class RetrievalResult:
    """Recovered sample-plane field and the per-iteration diffraction-plane residual."""

    field: ComplexField
    errors: np.ndarray
    z_um: float

    @property
    def iterations(self) -> int:
        return len(self.errors)

    @property
    def amplitude(self) -> np.ndarray:
        return self.field.amplitude()


def gs_retrieve(
    measured,
    z_um: float,
    iterations: int = 10,
    known_phase=None,
    pitch_um: float | None = None,
    wavelength_um: float | None = None,
    tolerance: float | None = None,
    callback=None,
) -> RetrievalResult:
    """Gerchberg-Saxton amplitude retrieval with a known sample phase.

    Each loop: attach the current phase to the measured amplitude (flat on
    the first pass), propagate by ``z`` to the sample, impose
    ``known_phase`` (zero by default), propagate back by ``-z`` and keep only
    the new phase. The residual recorded per loop is the normalised RMS
    difference between the back-propagated amplitude and the measurement over
    pixels with non-zero measured amplitude.

    ``measured`` is a :class:`ShiftedSumImage` or a real amplitude array (then
    ``pitch_um`` and ``wavelength_um`` are required). The returned field is
    the sample-plane estimate of the last loop with the known phase applied.
    ``callback(i, diffraction_field)`` sees the diffraction-plane field after
    each amplitude replacement. Iteration stops early once the residual drops
    below ``tolerance``.
    """
    if isinstance(measured, ShiftedSumImage):
        amp = measured.amplitude
        pitch_um = measured.grid.pitch_um
        wavelength_um = measured.grid.wavelength_um
    else:
        amp = np.asarray(measured, dtype=float)
        if pitch_um is None or wavelength_um is None:
            raise ValueError("pitch_um and wavelength_um are required with a raw amplitude array")
    iterations = int(iterations)
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if np.any(amp < 0) or not np.any(amp > 0):
        raise ValueError("measured amplitude must be non-negative and not all zero")
    phase = np.zeros(amp.shape) if known_phase is None else np.asarray(known_phase, dtype=float)
    if phase.shape != amp.shape:
        raise ValueError("known phase does not match the measured grid")
    known = np.exp(1j * phase)
    support = amp > 0
    norm = np.sqrt(np.sum(amp[support] ** 2))

    diffraction = ComplexField(amp.astype(np.complex128), pitch_um, wavelength_um)
    errors = []
    sample = None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for i in range(iterations):
            back = propagate(diffraction, z_um)
            sample = back.with_values(np.abs(back.values) * known)
            forward = propagate(sample, -z_um)
            err = np.sqrt(np.sum((np.abs(forward.values[support]) - amp[support]) ** 2)) / norm
            errors.append(float(err))
            diffraction = forward.with_values(amp * np.exp(1j * np.angle(forward.values)))
            if callback is not None:
                callback(i, diffraction)
            if tolerance is not None and err < tolerance:
                break
    return RetrievalResult(sample, np.asarray(errors), float(z_um))


def refocus(records: CoincidenceRecords, z_um: float, grid: GridSpec = GridSpec(),
            iterations: int = 10, smoothing_px: float = DEFAULT_SMOOTHING_PX,
            known_phase=None, negate_idler: bool = True, warn_dropped: bool = True,
            bilinear: bool = False, tolerance: float | None = None):
    """Ray-trace to ``z`` then retrieve; returns ``(ShiftedSumImage, RetrievalResult)``."""
    shifted = ray_trace_refocus(records, z_um, grid, negate_idler=negate_idler, bilinear=bilinear,
                                smoothing_px=smoothing_px, warn_dropped=warn_dropped)
    return shifted, gs_retrieve(shifted, z_um, iterations, known_phase=known_phase, tolerance=tolerance)
