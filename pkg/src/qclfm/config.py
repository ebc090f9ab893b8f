"""Experiment configuration (JSON, strict).

Every physical quantity carries its unit in the key name. Unknown keys are
errors; keys starting with ``_`` are free-form annotations and are dropped
before validation.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .coincidence import Calibration, IdlerRegion
from .detector import CameraParams
from .io import read_field
from .metrics import DofParams
from .pipeline import IdealDetection, calibration_from_optics
from .rays import OpticalSystem
from .refocus import GridSpec
from .scene import (FiberSegment, Illumination, SceneTarget, VolumetricScene, fiber_phantom, fiber_scene,
                    half_plane_target, usaf_target)
from .source import PumpParams, default_signal_sigma

# idler Fourier lens giving 6.8e-3 1/um per 55 um pixel at 810 nm
DEFAULT_IDLER_F_UM = 62740.0


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, validate_default=True)


class SourceConfig(_Strict):
    coherence_length_um: float = Field(200.0, gt=0)
    waist_um: float = Field(500.0, gt=0)
    pump_wavelength_um: float = Field(0.405, gt=0)
    pair_rate_per_s: float = Field(15e6, gt=0)
    crystal_aperture_um: float = Field(1000.0, gt=0)
    signal_sigma_per_um: float | None = Field(None, gt=0)

    def pump(self) -> PumpParams:
        return PumpParams(self.coherence_length_um, self.waist_um, self.pump_wavelength_um,
                          self.pair_rate_per_s, self.crystal_aperture_um)

    def signal_sigma(self, momentum_pitch_per_um: float) -> float:
        if self.signal_sigma_per_um is not None:
            return self.signal_sigma_per_um
        return default_signal_sigma(momentum_pitch_per_um)


class FreeSpaceConfig(_Strict):
    type: Literal["free_space"]
    d_um: float


class ThinLensConfig(_Strict):
    type: Literal["thin_lens"]
    f_um: float

    @field_validator("f_um")
    @classmethod
    def _nonzero(cls, v):
        if v == 0:
            raise ValueError("focal length must be non-zero")
        return v


Element = Annotated[Union[FreeSpaceConfig, ThinLensConfig], Field(discriminator="type")]


def _relay(f1, f2):
    return [{"type": "free_space", "d_um": f1}, {"type": "thin_lens", "f_um": f1},
            {"type": "free_space", "d_um": f1 + f2}, {"type": "thin_lens", "f_um": f2},
            {"type": "free_space", "d_um": f2}]


class ArmsConfig(_Strict):
    signal: list[Element] = Field(default_factory=lambda: _relay(10000.0, 200000.0), min_length=1)
    idler: list[Element] = Field(default_factory=lambda: [
        {"type": "free_space", "d_um": DEFAULT_IDLER_F_UM}, {"type": "thin_lens", "f_um": DEFAULT_IDLER_F_UM},
        {"type": "free_space", "d_um": DEFAULT_IDLER_F_UM}], min_length=1)
    signal_center_px: tuple[float, float] = (127.5, 127.5)
    idler_center_px: tuple[float, float] = (127.5, 127.5)
    signal_scale_um_per_px: float | None = Field(None, gt=0)
    idler_momentum_pitch_per_um: float | None = Field(None, gt=0)

    def systems(self) -> tuple[OpticalSystem, OpticalSystem]:
        return (OpticalSystem.from_list([e.model_dump() for e in self.signal]),
                OpticalSystem.from_list([e.model_dump() for e in self.idler]))

    def calibration(self, camera_pitch_um: float, wavelength_um: float) -> Calibration:
        sig, idl = self.systems()
        cal = calibration_from_optics(sig, idl, camera_pitch_um, wavelength_um,
                                      self.signal_center_px, self.idler_center_px)
        return Calibration(cal.signal_center_px,
                           self.signal_scale_um_per_px or cal.signal_scale,
                           cal.idler_center_px,
                           self.idler_momentum_pitch_per_um or cal.idler_k_per_px)


class CameraConfig(_Strict):
    width_px: int = Field(256, ge=1)
    height_px: int = Field(256, ge=1)
    pitch_um: float = Field(55.0, gt=0)
    clock_ns: float = Field(1.6, gt=0)
    sigma_t_ns: float = Field(2.4, ge=0)
    qe: float = Field(0.07, gt=0, le=1)
    cluster_min_px: int = Field(2, ge=1, le=9)
    cluster_max_px: int = Field(6, ge=1, le=9)
    footprint_sigma_px: float = Field(0.7, gt=0)
    gain_mean: float = Field(1000.0, gt=0)
    gain_spread: float = Field(0.3, ge=0)
    skew_ns: float = Field(20.0, ge=0)
    skew_ref_amplitude: float = Field(2000.0, gt=0)
    latency_ns: float = Field(100.0, ge=0)
    dark_rate_per_s: float = Field(0.0, ge=0)
    blur_px: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _sizes(self):
        if self.cluster_min_px > self.cluster_max_px:
            raise ValueError("cluster_min_px must not exceed cluster_max_px")
        return self

    def params(self) -> CameraParams:
        return CameraParams(self.width_px, self.height_px, self.pitch_um, self.clock_ns, self.sigma_t_ns,
                            self.qe, self.cluster_min_px, self.cluster_max_px, self.footprint_sigma_px,
                            self.gain_mean, self.gain_spread, self.skew_ns, self.skew_ref_amplitude,
                            self.latency_ns, self.dark_rate_per_s, self.blur_px)


class DetectorConfig(_Strict):
    mode: Literal["two_camera", "single_camera"] = "two_camera"
    idler_region_px: tuple[float, float, float, float] | None = None
    signal_camera: CameraConfig = CameraConfig()
    idler_camera: CameraConfig | None = None
    gap_px: int = Field(1, ge=0)
    window_ns: float = Field(100.0, gt=0)

    @model_validator(mode="after")
    def _region(self):
        if self.mode == "single_camera":
            if self.idler_region_px is None:
                raise ValueError("single_camera mode needs idler_region_px")
            if self.idler_camera is not None:
                raise ValueError("single_camera mode uses signal_camera only")
            x0, y0, x1, y1 = self.idler_region_px
            if not (x1 > x0 and y1 > y0):
                raise ValueError("idler_region_px must be [x0, y0, x1, y1] with x1 > x0 and y1 > y0")
        elif self.idler_region_px is not None:
            raise ValueError("idler_region_px is only valid in single_camera mode")
        return self

    def idler_region(self) -> IdlerRegion:
        if self.mode == "single_camera":
            return IdlerRegion(cam=None, rect_px=tuple(self.idler_region_px))
        return IdlerRegion()


class _SceneBase(_Strict):
    size_px: int = Field(256, ge=2)
    pitch_um: float = Field(1.0, gt=0)


class UsafSceneConfig(_SceneBase):
    type: Literal["usaf"]
    groups: list[int] = Field(default_factory=lambda: [7], min_length=1)
    elements: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5, 6], min_length=1)
    z_offset_um: float = 0.0
    positive: bool = True


class FiberConfig(_Strict):
    center_um: tuple[float, float] = (0.0, 0.0)
    angle_deg: float = 0.0
    length_um: float = Field(200.0, gt=0)
    diameter_um: float = Field(7.0, gt=0)
    z_um: float = 0.0


class FibersSceneConfig(_SceneBase):
    type: Literal["fibers"]
    fibers: list[FiberConfig] = Field(min_length=1)


class PhantomSceneConfig(_SceneBase):
    type: Literal["fiber_phantom"]
    n_fibers: int = Field(10, ge=1)
    diameter_range_um: tuple[float, float] = (5.0, 10.0)
    z_range_um: tuple[float, float] = (-1500.0, 1500.0)
    seed: int = 0


class HalfPlaneSceneConfig(_SceneBase):
    type: Literal["half_plane"]
    z_offset_um: float = 0.0
    angle_deg: float = 0.0


class FieldSceneConfig(_Strict):
    type: Literal["field"]
    path: str
    z_offset_um: float = 0.0


class NoSceneConfig(_Strict):
    type: Literal["none"]


SceneConfig = Annotated[
    Union[UsafSceneConfig, FibersSceneConfig, PhantomSceneConfig, HalfPlaneSceneConfig,
          FieldSceneConfig, NoSceneConfig],
    Field(discriminator="type"),
]


class IlluminationConfig(_Strict):
    mode: Literal["uniform", "gaussian"] = "uniform"
    waist_um: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _waist(self):
        if self.mode == "gaussian" and self.waist_um <= 0:
            raise ValueError("gaussian illumination needs waist_um > 0")
        return self

    def illumination(self) -> Illumination:
        return Illumination(self.mode, self.waist_um)


class ReconstructionConfig(_Strict):
    width_px: int = Field(256, ge=2)
    height_px: int = Field(256, ge=2)
    pitch_um: float = Field(1.0, gt=0)
    z_um: float = 0.0
    z_min_um: float = -500.0
    z_max_um: float = 500.0
    z_step_um: float = Field(250.0, gt=0)
    iterations: int = Field(10, ge=1)
    gate_ns: float = Field(10.0, gt=0)
    smoothing_px: float = Field(0.5, ge=0)
    threshold: float = Field(0.2, ge=0, le=1)
    tolerance: float | None = Field(None, gt=0)
    bilinear: bool = False
    sharpness_window_px: int = Field(9, ge=1)

    @model_validator(mode="after")
    def _range(self):
        if self.z_max_um < self.z_min_um:
            raise ValueError("z_max_um must not be below z_min_um")
        return self

    def grid(self, wavelength_um: float) -> GridSpec:
        return GridSpec(self.width_px, self.height_px, self.pitch_um, wavelength_um)


class SimulationConfig(_Strict):
    duration_s: float = Field(1.0, ge=0)
    detection: Literal["camera", "ideal"] = "camera"
    fourier_signal: bool = False
    position_blur_um: float = Field(0.0, ge=0)
    momentum_blur_per_um: float = Field(0.0, ge=0)
    batch_pairs: int = Field(1_000_000, ge=1)

    def ideal(self) -> IdealDetection:
        return IdealDetection(self.position_blur_um, self.momentum_blur_per_um)


class MicroscopeConfig(_Strict):
    refractive_index: float = Field(1.0, ge=1)
    na: float = Field(0.45, gt=0, le=1)
    magnification: float = Field(20.0, gt=0)

    def dof_params(self, wavelength_um: float, e_um: float) -> DofParams:
        return DofParams(self.refractive_index, wavelength_um, self.na, self.magnification, e_um)


class ExperimentConfig(_Strict):
    seed: int = 0
    source: SourceConfig = SourceConfig()
    arms: ArmsConfig = ArmsConfig()
    detector: DetectorConfig = DetectorConfig()
    scene: SceneConfig = Field(default_factory=lambda: UsafSceneConfig(type="usaf"))
    illumination: IlluminationConfig = IlluminationConfig()
    reconstruction: ReconstructionConfig = ReconstructionConfig()
    simulation: SimulationConfig = SimulationConfig()
    microscope: MicroscopeConfig = MicroscopeConfig()

    @property
    def wavelength_um(self) -> float:
        return 2.0 * self.source.pump_wavelength_um

    def calibration(self) -> Calibration:
        try:
            return self.arms.calibration(self.detector.signal_camera.pitch_um, self.wavelength_um)
        except (ValueError, ArithmeticError) as exc:
            raise ConfigError(f"arms: {exc}") from exc

    def signal_camera(self) -> CameraParams:
        return self.detector.signal_camera.params()

    def idler_camera(self) -> CameraParams:
        cam = self.detector.idler_camera or self.detector.signal_camera
        return cam.params()

    def build_scene(self) -> VolumetricScene | None:
        """The configured target; ``None`` for ``"type": "none"``.

        A ``field`` scene reads an FLD1 transmission (path relative to the
        working directory); read failures raise ``OSError``.
        """
        sc = self.scene
        lam = self.wavelength_um
        try:
            if sc.type == "none":
                return None
            if sc.type == "usaf":
                t = usaf_target(sc.groups, sc.elements, sc.pitch_um, sc.size_px, lam, sc.z_offset_um, sc.positive)
                return VolumetricScene((t,))
            if sc.type == "fibers":
                fibers = [FiberSegment(tuple(f.center_um), float(np.deg2rad(f.angle_deg)), f.length_um,
                                       f.diameter_um, f.z_um) for f in sc.fibers]
                return fiber_scene(fibers, sc.pitch_um, sc.size_px, lam)
            if sc.type == "fiber_phantom":
                return fiber_phantom(sc.n_fibers, sc.diameter_range_um, sc.z_range_um, sc.seed,
                                     sc.pitch_um, sc.size_px, lam)
            if sc.type == "half_plane":
                return VolumetricScene((half_plane_target(sc.size_px, sc.pitch_um, lam, sc.z_offset_um,
                                                          sc.angle_deg),))
        except ValueError as exc:
            raise ConfigError(f"scene: {exc}") from None
        f = read_field(sc.path)
        if not np.isclose(f.wavelength_um, lam, rtol=1e-6):
            raise ConfigError(f"scene.path: field wavelength {f.wavelength_um} um does not match the "
                              f"photon wavelength {lam} um")
        try:
            return VolumetricScene((SceneTarget(f, sc.z_offset_um),))
        except ValueError as exc:
            raise ConfigError(f"scene.path: {exc}") from None

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _strip_annotations(obj):
    if isinstance(obj, dict):
        return {k: _strip_annotations(v) for k, v in obj.items() if not str(k).startswith("_")}
    if isinstance(obj, list):
        return [_strip_annotations(v) for v in obj]
    return obj


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    try:
        return ExperimentConfig.model_validate(_strip_annotations(data))
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path) -> ExperimentConfig:
    """Read and validate a JSON config. Missing files raise ``OSError``."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def preset_path(name: str = "paper") -> Path:
    return Path(__file__).parent / "presets" / f"{name}.json"


def load_preset(name: str = "paper") -> ExperimentConfig:
    return load_config(preset_path(name))


def with_overrides(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy with top-level fields or nested sections replaced (``reconstruction={"z_um": 5}``)."""
    data = cfg.to_dict()
    for key, value in sections.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return config_from_dict(data)
