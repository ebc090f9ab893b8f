"""Entangled photon-pair source model.

Pairs are born at a shared point drawn from the pump intensity profile.
Signal transverse momenta follow a Gaussian marginal; the idler momentum is
``-k_s + delta`` with ``delta`` Gaussian of width ``momentum_sigma(pump)`` per
component. Arrivals are Poisson over the requested duration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

#: Momentum pitch of one idler camera pixel at the crystal Fourier plane (1/um).
MOMENTUM_PITCH_PER_PX = 6.8e-3


@dataclass(frozen=True)
class PumpParams:
    coherence_length_um: float = 200.0
    waist_um: float = 500.0
    pump_wavelength_um: float = 0.405
    pair_rate_per_s: float = 15e6
    crystal_aperture_um: float = 1000.0

    def __post_init__(self):
        if not self.coherence_length_um > 0:
            raise ValueError(f"coherence length must be positive, got {self.coherence_length_um}")
        if not self.waist_um > 0:
            raise ValueError(f"pump waist must be positive, got {self.waist_um}")
        if not self.pump_wavelength_um > 0:
            raise ValueError(f"pump wavelength must be positive, got {self.pump_wavelength_um}")
        if not self.pair_rate_per_s > 0:
            raise ValueError(f"pair rate must be positive, got {self.pair_rate_per_s}")
        if not self.crystal_aperture_um > 0:
            raise ValueError(f"crystal aperture must be positive, got {self.crystal_aperture_um}")

    @property
    def photon_wavelength_um(self) -> float:
        """Degenerate down-conversion: each photon at twice the pump wavelength."""
        return 2.0 * self.pump_wavelength_um


def momentum_sigma(pump: PumpParams) -> float:
    """Std of each component of ``k_signal + k_idler``, in 1/um."""
    lc, wp = pump.coherence_length_um, pump.waist_um
    if lc <= 0 or wp <= 0:
        raise ValueError("coherence length and waist must be positive")
    return float(np.sqrt(1.0 / lc**2 + 1.0 / (4.0 * wp**2)))


def default_signal_sigma(momentum_pitch_per_px: float = MOMENTUM_PITCH_PER_PX,
                         patch_px: float = 100.0) -> float:
    """Marginal width putting +-2 sigma of the idler beam across ``patch_px`` camera pixels."""
    return patch_px * momentum_pitch_per_px / 4.0


@dataclass
class PhotonPairs:
    """Struct-of-arrays batch of pair events.

    Positions are at the crystal plane in um, momenta in 1/um, birth times in ns.
    """

    x_um: np.ndarray
    y_um: np.ndarray
    ksx: np.ndarray
    ksy: np.ndarray
    kix: np.ndarray
    kiy: np.ndarray
    t_ns: np.ndarray
    wavelength_um: float
    # optional per-photon offset of the idler birth point (position blur)
    idler_dx_um: np.ndarray | None = None
    idler_dy_um: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.t_ns)

    def subset(self, index) -> "PhotonPairs":
        pick = lambda a: None if a is None else a[index]
        return PhotonPairs(
            self.x_um[index], self.y_um[index], self.ksx[index], self.ksy[index],
            self.kix[index], self.kiy[index], self.t_ns[index], self.wavelength_um,
            pick(self.idler_dx_um), pick(self.idler_dy_um),
        )

    @classmethod
    def concatenate(cls, batches) -> "PhotonPairs":
        batches = list(batches)
        cat = lambda name: np.concatenate([getattr(b, name) for b in batches])
        blur = all(b.idler_dx_um is not None for b in batches)
        return cls(
            cat("x_um"), cat("y_um"), cat("ksx"), cat("ksy"), cat("kix"), cat("kiy"), cat("t_ns"),
            batches[0].wavelength_um,
            cat("idler_dx_um") if blur else None, cat("idler_dy_um") if blur else None,
        )

    def truth_columns(self):
        return [self.x_um, self.y_um, self.ksx, self.ksy, self.kix, self.kiy, self.t_ns]


TRUTH_HEADER = ["x_um", "y_um", "ksx", "ksy", "kix", "kiy", "t_ns"]


def _truncated_gaussian(rng, n, sigma, half_width):
    out = rng.normal(0.0, sigma, n)
    bad = np.abs(out) > half_width
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, bad.sum())
        bad = np.abs(out) > half_width
    return out


def sample_pairs(
    pump: PumpParams,
    n: int,
    seed,
    duration_s: float = 1.0,
    signal_sigma: float | None = None,
    position_blur_um: float = 0.0,
    t0_ns: float = 0.0,
) -> PhotonPairs:
    """Draw ``n`` pairs; deterministic for a given ``seed``.

    ``seed`` may be an int, a sequence of ints, or a ``numpy.random.SeedSequence``.
    Birth times are sorted uniform draws over ``[t0, t0 + duration)``, i.e. the
    arrival times of a Poisson process conditioned on ``n`` events.
    """
    n = int(n)
    if n < 1:
        raise ValueError(f"need at least one pair, got n={n}")
    if not duration_s > 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    if signal_sigma is None:
        signal_sigma = default_signal_sigma()
    rng = np.random.default_rng(seed)
    sigma_sum = momentum_sigma(pump)
    # intensity exp(-2 r^2 / w^2) has std w / 2 per axis
    half = pump.crystal_aperture_um / 2.0
    x = _truncated_gaussian(rng, n, pump.waist_um / 2.0, half)
    y = _truncated_gaussian(rng, n, pump.waist_um / 2.0, half)
    ksx = rng.normal(0.0, signal_sigma, n)
    ksy = rng.normal(0.0, signal_sigma, n)
    kix = -ksx + rng.normal(0.0, sigma_sum, n)
    kiy = -ksy + rng.normal(0.0, sigma_sum, n)
    t = t0_ns + np.sort(rng.uniform(0.0, duration_s * 1e9, n))
    dx = dy = None
    if position_blur_um > 0:
        dx = rng.normal(0.0, position_blur_um, n)
        dy = rng.normal(0.0, position_blur_um, n)
    k0 = 2.0 * np.pi / pump.photon_wavelength_um
    np.clip(ksx, -0.99 * k0, 0.99 * k0, out=ksx)
    np.clip(ksy, -0.99 * k0, 0.99 * k0, out=ksy)
    return PhotonPairs(x, y, ksx, ksy, kix, kiy, t, pump.photon_wavelength_um, dx, dy)


def batch_seed(seed: int, batch: int) -> np.random.SeedSequence:
    """Independent seed for batch ``batch`` of a run seeded with ``seed``."""
    return np.random.SeedSequence([int(seed), int(batch)])


def sample_pairs_batched(pump, n, seed, duration_s, batch_size=1_000_000, **kwargs):
    """Yield pairs in time-ordered batches with derived per-batch seeds.

    The duration is split into equal slices, one per batch, so concatenating
    the batches in order keeps birth times sorted.
    """
    n = int(n)
    nbatch = max(1, -(-n // batch_size))
    counts = np.full(nbatch, n // nbatch)
    counts[: n - counts.sum()] += 1
    slice_s = duration_s / nbatch
    for b, count in enumerate(counts):
        if count == 0:
            continue
        yield sample_pairs(pump, count, batch_seed(seed, b), slice_s,
                           t0_ns=b * slice_s * 1e9, **kwargs)
