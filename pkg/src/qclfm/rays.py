"""Paraxial ray-transfer (ABCD) optics.

Both transverse axes share one matrix (rotationally symmetric elements).
Positions are in micrometres and angles in radians, so ``B`` carries um and
``C`` carries 1/um.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

DET_TOLERANCE = 1e-9
DEFAULT_MIN_B_UM = 1.0


class DegenerateSystemError(ValueError):
    """Positions alone cannot determine angles (|B| too small)."""


@dataclass(frozen=True)
class RayTransferMatrix:
    A: float
    B: float
    C: float
    D: float

    @classmethod
    def identity(cls) -> "RayTransferMatrix":
        return cls(1.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, m) -> "RayTransferMatrix":
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))

    def as_array(self) -> np.ndarray:
        return np.array([[self.A, self.B], [self.C, self.D]])

    @property
    def det(self) -> float:
        return self.A * self.D - self.B * self.C

    def __matmul__(self, other: "RayTransferMatrix") -> "RayTransferMatrix":
        # self acts after other
        return RayTransferMatrix(
            self.A * other.A + self.B * other.C,
            self.A * other.B + self.B * other.D,
            self.C * other.A + self.D * other.C,
            self.C * other.B + self.D * other.D,
        )


@dataclass(frozen=True)
class FreeSpace:
    d_um: float

    def matrix(self) -> RayTransferMatrix:
        return RayTransferMatrix(1.0, float(self.d_um), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {"type": "free_space", "d_um": self.d_um}


@dataclass(frozen=True)
class ThinLens:
    f_um: float

    def matrix(self) -> RayTransferMatrix:
        if self.f_um == 0:
            raise ValueError("thin lens focal length must be non-zero")
        return RayTransferMatrix(1.0, 0.0, -1.0 / float(self.f_um), 1.0)

    def to_dict(self) -> dict:
        return {"type": "thin_lens", "f_um": self.f_um}


Element = Union[FreeSpace, ThinLens]


def element_from_dict(spec: dict) -> Element:
    kind = spec.get("type")
    keys = set(spec) - {"type"}
    if kind == "free_space":
        if keys != {"d_um"}:
            raise ValueError(f"free_space element takes exactly 'd_um', got {sorted(keys)}")
        return FreeSpace(float(spec["d_um"]))
    if kind == "thin_lens":
        if keys != {"f_um"}:
            raise ValueError(f"thin_lens element takes exactly 'f_um', got {sorted(keys)}")
        return ThinLens(float(spec["f_um"]))
    raise ValueError(f"unknown optical element type {kind!r}")


@dataclass(frozen=True)
class OpticalSystem:
    """Elements in the order light meets them."""

    elements: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    def __add__(self, other: "OpticalSystem") -> "OpticalSystem":
        return OpticalSystem(self.elements + other.elements)

    @property
    def matrix(self) -> RayTransferMatrix:
        return compose(self)

    @property
    def magnification(self) -> float | None:
        """Transverse magnification ``A`` when the system images (``B == 0``)."""
        m = compose(self)
        if abs(m.B) > 1e-9 * max(1.0, abs(m.A), abs(m.D)):
            return None
        return m.A

    def to_list(self) -> list[dict]:
        return [e.to_dict() for e in self.elements]

    @classmethod
    def from_list(cls, items: Sequence[dict]) -> "OpticalSystem":
        return cls(tuple(element_from_dict(item) for item in items))


def compose(system: OpticalSystem | Sequence[Element]) -> RayTransferMatrix:
    """Ordered product of element matrices; the first element acts first."""
    elements = system.elements if isinstance(system, OpticalSystem) else tuple(system)
    if not elements:
        raise ValueError("optical system has no elements")
    m = RayTransferMatrix.identity()
    for element in elements:
        m = element.matrix() @ m
    if abs(m.det - 1.0) > DET_TOLERANCE * max(1.0, abs(m.A * m.D), abs(m.B * m.C)):
        raise ArithmeticError(f"composed matrix has det {m.det!r}, expected 1")
    return m


@dataclass(frozen=True)
class RayState:
    """Ray position ``r`` (um) and angle ``theta`` (rad); arrays broadcast per axis."""

    r: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(theta))):
            raise ValueError("ray state must be finite")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "theta", theta)


def apply(m: RayTransferMatrix, ray: RayState) -> RayState:
    """``r2 = A r1 + B theta1``, ``theta2 = C r1 + D theta1`` on each axis."""
    return RayState(m.A * ray.r + m.B * ray.theta, m.C * ray.r + m.D * ray.theta)


def solve_angles(m: RayTransferMatrix, r1, r2, min_b_um: float = DEFAULT_MIN_B_UM):
    """Angles at both planes from the two measured positions.

    Returns ``(theta1, theta2)`` with ``theta1 = (r2 - A r1) / B`` and
    ``theta2 = C r1 + D theta1``.
    """
    if abs(m.B) < min_b_um:
        raise DegenerateSystemError(
            f"|B| = {abs(m.B):.3g} um is below {min_b_um} um; positions do not fix angles"
        )
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    theta1 = (r2 - m.A * r1) / m.B
    theta2 = m.C * r1 + m.D * theta1
    return theta1, theta2


def four_f_relay(f1_um: float, f2_um: float) -> OpticalSystem:
    """Two-lens telecentric relay; magnification ``-f2/f1``."""
    return OpticalSystem((FreeSpace(f1_um), ThinLens(f1_um), FreeSpace(f1_um + f2_um),
                          ThinLens(f2_um), FreeSpace(f2_um)))


def fourier_system(f_um: float) -> OpticalSystem:
    """Single-lens 2f system mapping input angle to output position (``A = 0``, ``B = f``)."""
    return OpticalSystem((FreeSpace(f_um), ThinLens(f_um), FreeSpace(f_um)))
