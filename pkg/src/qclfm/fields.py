"""Complex scalar fields and angular-spectrum propagation.

Fields are stored as a single complex grid indexed ``[y, x]``. The forward
FFT uses the ``exp(-i k x)`` kernel without normalisation and the inverse
carries the ``1/N`` factor, which is numpy's default convention. Spatial
frequencies follow the signed FFT index layout
``k_x[j] = 2 pi j' / (N * pitch)`` with ``j'`` in ``[-N/2, N/2)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AliasingWarning",
    "ComplexField",
    "SpatialFrequencyGrid",
    "frequency_grid",
    "propagate",
    "inverse_propagate",
    "aliasing_limit",
]


class AliasingWarning(UserWarning):
    """The propagation distance wraps the transfer-function phase on this grid."""


@dataclass(frozen=True, eq=False)
class ComplexField:
    """Complex amplitude sampled on a regular grid.

    Attributes
    ----------
    values : ndarray
        Complex array of shape ``(height, width)``. Stored read-only.
    pitch_um : float
        Sample spacing in micrometres.
    wavelength_um : float
        Vacuum wavelength in micrometres.
    """

    values: np.ndarray
    pitch_um: float
    wavelength_um: float

    def __post_init__(self):
        values = np.array(self.values, dtype=np.complex128, copy=True)
        if values.ndim != 2:
            raise ValueError(f"field values must be 2D, got shape {values.shape}")
        if values.shape[0] < 2 or values.shape[1] < 2:
            raise ValueError(f"field must be at least 2x2, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite values")
        if not (self.pitch_um > 0 and np.isfinite(self.pitch_um)):
            raise ValueError(f"pitch_um must be positive, got {self.pitch_um}")
        if not (self.wavelength_um > 0 and np.isfinite(self.wavelength_um)):
            raise ValueError(f"wavelength_um must be positive, got {self.wavelength_um}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "pitch_um", float(self.pitch_um))
        object.__setattr__(self, "wavelength_um", float(self.wavelength_um))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength_um

    def amplitude(self) -> np.ndarray:
        return np.abs(self.values)

    def phase(self) -> np.ndarray:
        return np.angle(self.values)

    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def power(self) -> float:
        """Total power ``sum |u|^2 * pitch^2``."""
        return float(np.sum(self.intensity()) * self.pitch_um**2)

    def with_values(self, values) -> "ComplexField":
        """New field on the same grid carrying ``values``."""
        return ComplexField(values, self.pitch_um, self.wavelength_um)

    def same_grid(self, other: "ComplexField") -> bool:
        return (
            self.shape == other.shape
            and self.pitch_um == other.pitch_um
            and self.wavelength_um == other.wavelength_um
        )

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-centre coordinates (x, y) in micrometres, origin at the grid centre."""
        return grid_coordinates(self.width, self.height, self.pitch_um)

    @classmethod
    def from_amplitude_phase(cls, amplitude, phase, pitch_um, wavelength_um) -> "ComplexField":
        amplitude = np.asarray(amplitude, dtype=float)
        return cls(amplitude * np.exp(1j * np.asarray(phase, dtype=float)), pitch_um, wavelength_um)

    @classmethod
    def constant(cls, value, width, height, pitch_um, wavelength_um) -> "ComplexField":
        return cls(np.full((height, width), value, dtype=np.complex128), pitch_um, wavelength_um)


def grid_coordinates(width: int, height: int, pitch_um: float) -> tuple[np.ndarray, np.ndarray]:
    """1D pixel-centre coordinates with the origin at index ``N // 2``."""
    x = (np.arange(width) - width // 2) * pitch_um
    y = (np.arange(height) - height // 2) * pitch_um
    return x, y


@dataclass(frozen=True, eq=False)
class SpatialFrequencyGrid:
    """Transverse and longitudinal wavenumbers for a field grid (all in 1/um).

    ``kz`` is zero on evanescent entries; ``kappa`` holds the decay constant
    ``sqrt(kx^2 + ky^2 - k^2)`` there and zero elsewhere.
    """

    kx: np.ndarray
    ky: np.ndarray
    k: float
    kz: np.ndarray
    kappa: np.ndarray
    evanescent: np.ndarray


def frequency_grid(width: int, height: int, pitch_um: float, wavelength_um: float) -> SpatialFrequencyGrid:
    kx = 2.0 * np.pi * np.fft.fftfreq(width, d=pitch_um)
    ky = 2.0 * np.pi * np.fft.fftfreq(height, d=pitch_um)
    k = 2.0 * np.pi / wavelength_um
    kt2 = kx[np.newaxis, :] ** 2 + ky[:, np.newaxis] ** 2
    evanescent = kt2 > k**2
    kz = np.sqrt(np.where(evanescent, 0.0, k**2 - kt2))
    kappa = np.sqrt(np.where(evanescent, kt2 - k**2, 0.0))
    return SpatialFrequencyGrid(kx=kx, ky=ky, k=k, kz=kz, kappa=kappa, evanescent=evanescent)


def aliasing_limit(field: ComplexField) -> float:
    """Distance beyond which the transfer function phase is undersampled."""
    n = min(field.width, field.height)
    return n * field.pitch_um**2 / field.wavelength_um


def transfer_function(grid: SpatialFrequencyGrid, z_um: float) -> np.ndarray:
    """``exp(i kz z)`` on propagating entries, ``exp(-kappa |z|)`` on evanescent ones."""
    propagating = np.exp(1j * grid.kz * z_um)
    return np.where(grid.evanescent, np.exp(-grid.kappa * abs(z_um)), propagating)


def propagate(field: ComplexField, z_um: float, pad: int = 1) -> ComplexField:
    """Angular-spectrum propagation of ``field`` by ``z_um`` (negative reverses).

    Evanescent components are attenuated by ``exp(-kappa |z|)`` regardless of
    direction, so a forward/backward round trip recovers the propagating band.

    With ``pad > 1`` the field is zero-padded to ``pad`` times its size before
    propagating and cropped back afterwards, which suppresses wrap-around of
    light diffracted past the grid edge. The default treats the grid as one
    period of a periodic field. Distances past :func:`aliasing_limit` of the
    (padded) grid emit an :class:`AliasingWarning`.
    """
    if not isinstance(field, ComplexField):
        raise TypeError("propagate expects a ComplexField")
    z_um = float(z_um)
    if not np.isfinite(z_um):
        raise ValueError(f"propagation distance must be finite, got {z_um}")
    pad = int(pad)
    if pad < 1:
        raise ValueError(f"pad must be >= 1, got {pad}")
    if z_um == 0.0:
        return field
    values = field.values
    if pad > 1:
        h, w = field.shape
        big = np.zeros((h * pad, w * pad), dtype=np.complex128)
        oy, ox = (h * pad - h) // 2, (w * pad - w) // 2
        big[oy:oy + h, ox:ox + w] = values
        values = big
    height, width = values.shape
    limit = min(width, height) * field.pitch_um**2 / field.wavelength_um
    if abs(z_um) > limit:
        warnings.warn(
            f"|z| = {abs(z_um):.4g} um exceeds N*pitch^2/lambda = {limit:.4g} um; "
            "zero-pad the grid to avoid wrap-around",
            AliasingWarning,
            stacklevel=2,
        )
    grid = frequency_grid(width, height, field.pitch_um, field.wavelength_um)
    out = np.fft.ifft2(np.fft.fft2(values) * transfer_function(grid, z_um))
    if pad > 1:
        out = out[oy:oy + field.height, ox:ox + field.width]
    return field.with_values(out)


def inverse_propagate(field: ComplexField, z_um: float, pad: int = 1) -> ComplexField:
    """Undo a propagation by ``z_um``; identical to ``propagate(field, -z_um)``."""
    return propagate(field, -float(z_um), pad=pad)


def band_limit(field: ComplexField, fraction: float = 1.0) -> ComplexField:
    """Zero every spatial frequency with ``|k_t| > fraction * k`` (and evanescent ones)."""
    grid = frequency_grid(field.width, field.height, field.pitch_um, field.wavelength_um)
    kt2 = grid.kx[np.newaxis, :] ** 2 + grid.ky[:, np.newaxis] ** 2
    keep = kt2 <= (fraction * grid.k) ** 2
    return field.with_values(np.fft.ifft2(np.fft.fft2(field.values) * keep))
