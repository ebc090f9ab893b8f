"""Resolution and depth-of-field metrics.

Bar contrast is measured on the known chart geometry: pixel values are
replaced by their absolute deviation from the median of an annulus around
the element, then the mean deviation over the bars is compared with the mean
over the gaps between them. Taking the absolute deviation makes the score
independent of chart polarity and of any affine intensity change.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .fields import grid_coordinates
from .scene import SceneTarget, UsafElement

DEFAULT_THRESHOLD = 0.2


@dataclass(frozen=True)
class DofParams:
    """Conventional microscope: index ``n``, wavelength, NA, magnification, resolved distance ``e``."""

    n: float = 1.0
    wavelength_um: float = 0.810
    na: float = 0.45
    magnification: float = 20.0
    e_um: float = 5.0

    def __post_init__(self):
        if not 0 < self.na <= 1:
            raise ValueError(f"NA must be in (0, 1], got {self.na}")
        if not self.magnification > 0:
            raise ValueError("magnification must be positive")
        if self.n < 1:
            raise ValueError("refractive index must be >= 1")
        if not self.wavelength_um > 0 or self.e_um < 0:
            raise ValueError("wavelength must be positive and e non-negative")


def conventional_dof(p: DofParams) -> float:
    """``n lambda / NA^2 + n e / (M NA)`` in um."""
    if p.na == 0:
        raise ValueError("NA must be non-zero")
    return p.n * p.wavelength_um / p.na**2 + p.n * p.e_um / (p.magnification * p.na)


@dataclass(frozen=True)
class ElementScore:
    group: int
    element: int
    spacing_um: float
    contrast: float
    resolved: bool
    note: str = ""


@dataclass
class ResolvabilityReport:
    scores: list
    threshold: float
    z_um: float = 0.0

    def smallest_resolved_um(self) -> float:
        """Chart reading: walk from the coarsest element down, stop at the first failure.

        Returns ``inf`` when even the coarsest scored element fails.
        """
        scored = sorted((s for s in self.scores if not s.note), key=lambda s: -s.spacing_um)
        best = np.inf
        for s in scored:
            if not s.resolved:
                break
            best = s.spacing_um
        return float(best)

    def contrast_of(self, group: int, element: int) -> float:
        for s in self.scores:
            if s.group == group and s.element == element:
                return s.contrast
        raise KeyError((group, element))

    def mean_contrast(self) -> float:
        vals = [s.contrast for s in self.scores if not s.note]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self):
        return [(self.z_um, s.group, s.element, s.spacing_um, s.contrast, int(s.resolved))
                for s in self.scores]


REPORT_HEADER = ["z_um", "group", "element", "spacing_um", "contrast", "resolved"]


def _box(xc, yc, x0, y0, x1, y1):
    return ((xc >= x0) & (xc < x1))[np.newaxis, :] & ((yc >= y0) & (yc < y1))[:, np.newaxis]


def bar_contrast(image: np.ndarray, el: UsafElement, pitch_um: float) -> tuple[float, str]:
    """Contrast of one element (the weaker of its two bar orientations)."""
    h, w_px = image.shape
    xc, yc = grid_coordinates(w_px, h, pitch_um)
    w = el.bar_width_um
    vx, vy = el.vertical_origin_um
    hx, hy = el.horizontal_origin_um
    x0, y0, x1, y1 = vx, vy, hx + 5 * w, vy + 5 * w
    if x0 < xc[0] - pitch_um / 2 or y0 < yc[0] - pitch_um / 2 or x1 > xc[-1] + pitch_um / 2 or y1 > yc[-1] + pitch_um / 2:
        return float("nan"), "outside field of view"
    ring = _box(xc, yc, x0 - 2 * w, y0 - 2 * w, x1 + 2 * w, y1 + 2 * w) & ~_box(xc, yc, x0 - w, y0 - w, x1 + w, y1 + w)
    if not ring.any():
        return float("nan"), "no background annulus"
    dev = np.abs(image - np.median(image[ring]))
    contrasts = []
    for orient in ("v", "h"):
        bars = np.zeros(image.shape, dtype=bool)
        gaps = np.zeros(image.shape, dtype=bool)
        for i in range(3):
            if orient == "v":
                bars |= _box(xc, yc, vx + 2 * i * w, vy, vx + (2 * i + 1) * w, vy + 5 * w)
                if i < 2:
                    gaps |= _box(xc, yc, vx + (2 * i + 1) * w, vy, vx + (2 * i + 2) * w, vy + 5 * w)
            else:
                bars |= _box(xc, yc, hx, hy + 2 * i * w, hx + 5 * w, hy + (2 * i + 1) * w)
                if i < 2:
                    gaps |= _box(xc, yc, hx, hy + (2 * i + 1) * w, hx + 5 * w, hy + (2 * i + 2) * w)
        if not bars.any() or not gaps.any():
            return float("nan"), "element below grid sampling"
        b, g = dev[bars].mean(), dev[gaps].mean()
        contrasts.append(0.0 if b + g == 0 else max(0.0, (b - g) / (b + g)))
    return float(min(contrasts)), ""


def resolvability(image, target: SceneTarget, threshold: float = DEFAULT_THRESHOLD,
                  pitch_um: float | None = None, z_um: float = 0.0) -> ResolvabilityReport:
    """Score every USAF element of ``target`` on ``image`` (same grid as the target)."""
    image = np.asarray(image, dtype=float)
    if pitch_um is None:
        pitch_um = target.pitch_um
    scores = []
    for el in target.elements:
        c, note = bar_contrast(image, el, pitch_um)
        scores.append(ElementScore(el.group, el.element, el.line_spacing_um, c,
                                   bool(not note and c >= threshold), note))
    return ResolvabilityReport(scores, float(threshold), float(z_um))


@dataclass
class DofCurve:
    z_um: np.ndarray
    smallest_um: np.ndarray
    reports: list = field(default_factory=list)

    def median_filtered(self, size: int = 3) -> np.ndarray:
        """Running median along z; unresolved depths (``inf``) count as a huge spacing."""
        vals = np.where(np.isfinite(self.smallest_um), self.smallest_um, 1e12)
        return median_filter(vals, size=size, mode="nearest")


def dof_curve(
    z_values: Sequence[float],
    image_at: Callable[[float], np.ndarray],
    target: SceneTarget,
    threshold: float = DEFAULT_THRESHOLD,
) -> DofCurve:
    """Smallest resolvable spacing versus depth.

    ``image_at(z)`` returns the reconstructed amplitude for a chart placed at
    depth ``z`` (registered to ``target``'s in-focus geometry).
    """
    z_values = [float(z) for z in z_values]
    if not z_values:
        raise ValueError("need at least one depth")
    reports = []
    for z in z_values:
        reports.append(resolvability(image_at(z), target, threshold, z_um=z))
    return DofCurve(np.asarray(z_values), np.array([r.smallest_resolved_um() for r in reports]), reports)


def non_decreasing_in_abs_z(curve: DofCurve, exclude_zero: bool = True, size: int = 3) -> bool:
    """Median-filtered spacing never improves when moving away from focus on either side."""
    z = curve.z_um
    vals = curve.median_filtered(size)
    ok = True
    for side in (z >= 0, z <= 0):
        sel = side & ~((z == 0) & exclude_zero)
        order = np.argsort(np.abs(z[sel]))
        v = vals[sel][order]
        ok &= bool(np.all(np.diff(v) >= 0))
    return ok


def feature_contrast(image, feature: np.ndarray, ring: np.ndarray) -> float:
    """Background-subtracted Michelson contrast of a feature against its surroundings.

    Values become absolute deviations from the ring's median; the contrast
    compares the mean deviation over ``feature`` with that over ``ring``.
    """
    image = np.asarray(image, dtype=float)
    if not feature.any() or not ring.any():
        raise ValueError("feature and ring masks must be non-empty")
    dev = np.abs(image - np.median(image[ring]))
    f, r = dev[feature].mean(), dev[ring].mean()
    return 0.0 if f + r == 0 else float(max(0.0, (f - r) / (f + r)))


def fiber_regions(fiber, size: int, pitch_um: float, exclude=None, inner_um: float | None = None,
                  outer_um: float | None = None):
    """Core pixels of a fibre and a surrounding ring, both minus ``exclude``."""
    from dataclasses import replace

    from .scene import fiber_mask

    d = fiber.diameter_um
    inner = d if inner_um is None else inner_um
    outer = 2.5 * d if outer_um is None else outer_um
    core = fiber_mask(fiber, size, pitch_um)
    near = fiber_mask(replace(fiber, diameter_um=d + 2 * inner), size, pitch_um)
    far = fiber_mask(replace(fiber, diameter_um=d + 2 * outer), size, pitch_um)
    ring = far & ~near
    if exclude is not None:
        core = core & ~exclude
        ring = ring & ~exclude
    return core, ring


def fiber_contrast(image, fiber, pitch_um: float, exclude=None) -> float:
    core, ring = fiber_regions(fiber, np.asarray(image).shape[0], pitch_um, exclude)
    return feature_contrast(image, core, ring)
