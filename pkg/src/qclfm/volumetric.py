"""Focal stacks, all-in-focus composites and depth maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import laplace, uniform_filter

from .coincidence import CoincidenceRecords
from .pipeline import parallel_map
from .refocus import DEFAULT_SMOOTHING_PX, GridSpec, refocus

DEFAULT_WINDOW_PX = 9


@dataclass(frozen=True, eq=False)
class FocalStack:
    """Recovered amplitudes ``slices[i]`` at strictly increasing depths ``z_um[i]``."""

    z_um: np.ndarray
    slices: np.ndarray
    grid: GridSpec

    def __post_init__(self):
        z = np.asarray(self.z_um, dtype=float)
        s = np.asarray(self.slices, dtype=float)
        if s.ndim != 3 or len(z) != len(s):
            raise ValueError("slices must be an (n, height, width) array matching z")
        if len(z) == 0:
            raise ValueError("empty stack")
        if np.any(np.diff(z) <= 0):
            raise ValueError("stack depths must be strictly increasing")
        if s.shape[1:] != self.grid.shape:
            raise ValueError("slice shape does not match the grid")
        object.__setattr__(self, "z_um", z)
        object.__setattr__(self, "slices", s)

    def __len__(self) -> int:
        return len(self.z_um)

    def scaled(self, factor: float) -> "FocalStack":
        return FocalStack(self.z_um, self.slices * factor, self.grid)


def depth_values(z_min_um: float, z_max_um: float, z_step_um: float) -> np.ndarray:
    """``z_min, z_min + step, ...`` up to ``z_max`` inclusive (to a millionth of a step)."""
    if z_max_um < z_min_um:
        raise ValueError("z_max must not be below z_min")
    if z_max_um > z_min_um and not z_step_um > 0:
        raise ValueError("z_step must be positive")
    if z_max_um == z_min_um:
        return np.array([float(z_min_um)])
    n = int(np.floor((z_max_um - z_min_um) / z_step_um + 1e-6)) + 1
    return z_min_um + z_step_um * np.arange(n)


def sweep(
    records: CoincidenceRecords,
    z_min_um: float,
    z_max_um: float,
    z_step_um: float,
    iterations: int = 10,
    grid: GridSpec = GridSpec(),
    smoothing_px: float = DEFAULT_SMOOTHING_PX,
    known_phase=None,
    workers: int = 1,
    bilinear: bool = False,
    tolerance: float | None = None,
) -> FocalStack:
    """Refocus and retrieve at every depth of the sweep.

    Slices are independent; ``workers > 1`` computes them on a thread pool
    and the result does not depend on the worker count.
    """
    z = depth_values(z_min_um, z_max_um, z_step_um)

    def one(zi):
        return refocus(records, zi, grid, iterations, smoothing_px, known_phase, warn_dropped=False,
                       bilinear=bilinear, tolerance=tolerance)[1].amplitude

    return FocalStack(z, np.stack(parallel_map(one, z, workers)), grid)


@dataclass(frozen=True, eq=False)
class AllInFocus:
    total: np.ndarray

    @property
    def preview(self) -> np.ndarray:
        lo, hi = float(self.total.min()), float(self.total.max())
        if hi == lo:
            return np.zeros_like(self.total)
        return (self.total - lo) / (hi - lo)


def all_in_focus(stack: FocalStack) -> AllInFocus:
    """Pixel-wise sum of the slice amplitudes."""
    return AllInFocus(stack.slices.sum(axis=0))


def sharpness(image: np.ndarray, window_px: int = DEFAULT_WINDOW_PX, method: str = "variance") -> np.ndarray:
    """Local focus score: variance in a ``window`` box, or the summed modified Laplacian."""
    img = np.asarray(image, dtype=float)
    if method == "variance":
        mean = uniform_filter(img, window_px, mode="reflect")
        sq = uniform_filter(img * img, window_px, mode="reflect")
        return np.maximum(sq - mean * mean, 0.0)
    if method == "modified_laplacian":
        kx = np.abs(2 * img - np.roll(img, 1, 1) - np.roll(img, -1, 1))
        ky = np.abs(2 * img - np.roll(img, 1, 0) - np.roll(img, -1, 0))
        return uniform_filter(kx + ky, window_px, mode="reflect")
    raise ValueError(f"unknown sharpness method {method!r}")


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Per-pixel depth (NaN where masked), peak prominence and background mask."""

    depth_um: np.ndarray
    confidence: np.ndarray
    background: np.ndarray
    index: np.ndarray
    threshold: float

    @property
    def foreground_fraction(self) -> float:
        return float(np.mean(~self.background))


def depth_map(stack: FocalStack, window_px: int = DEFAULT_WINDOW_PX, method: str = "variance",
              mad_factor: float = 2.0) -> DepthMap:
    """Argmax-sharpness depth per pixel.

    Ties go to the slice with the smallest ``|z|``. Pixels whose peak score
    does not exceed ``median + mad_factor * MAD`` of all peak scores are
    background. Confidence is the relative gap between the best and the
    second-best score.
    """
    if len(stack) < 2:
        raise ValueError("a depth map needs at least two slices")
    scores = np.stack([sharpness(s, window_px, method) for s in stack.slices])
    order = np.lexsort((stack.z_um, np.abs(stack.z_um)))
    best_in_order = np.argmax(scores[order], axis=0)
    index = order[best_in_order]
    ranked = np.sort(scores, axis=0)
    peak, second = ranked[-1], ranked[-2]
    with np.errstate(invalid="ignore", divide="ignore"):
        confidence = np.where(peak > 0, (peak - second) / peak, 0.0)
    med = np.median(peak)
    mad = np.median(np.abs(peak - med))
    threshold = float(med + mad_factor * mad)
    background = peak <= threshold
    depth = np.where(background, np.nan, stack.z_um[index])
    return DepthMap(depth, confidence, background, index, threshold)


def depth_preview_rgb(dmap: DepthMap, z_range=None) -> np.ndarray:
    """Colour-coded depth (blue near ``z_min`` to red near ``z_max``), black background."""
    d = dmap.depth_um
    if z_range is None:
        finite = d[np.isfinite(d)]
        z_range = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    lo, hi = z_range
    t = np.clip((np.nan_to_num(d, nan=lo) - lo) / (hi - lo if hi > lo else 1.0), 0.0, 1.0)
    rgb = np.stack([t, 1.0 - np.abs(2.0 * t - 1.0), 1.0 - t], axis=-1)
    rgb[dmap.background] = 0.0
    return (rgb * 255).round().astype(np.uint8)
