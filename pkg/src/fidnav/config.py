"""Scenario configuration: schema, validation, YAML loading, model builders.

A scenario file is a nested YAML mapping mirroring the dataclasses below.
Every omitted field falls back to the nominal scenario (tactical IMU,
100 m fiducial spacing, 15 m cruise altitude, 5 Hz camera, 1 Hz GNSS).
Unknown keys are rejected with the offending dotted path.  All numeric
fields carry their unit in the field name.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

from .sensors import CameraModel, GnssModel
from .truth import IMU_GRADES, ImuSpec, TrajectoryPlan

__all__ = [
    "ConfigError",
    "TrajectoryConfig",
    "FiducialConfig",
    "ImuConfig",
    "CameraConfig",
    "GnssConfig",
    "FilterConfig",
    "SimConfig",
    "ScenarioConfig",
    "load_config",
    "save_config",
]


class ConfigError(ValueError):
    """Configuration problem; the message names the offending field."""


@dataclass(frozen=True)
class TrajectoryConfig:
    ground_speed_mps: float = 15.0
    start_altitude_m: float = 120.0
    cruise_altitude_m: float = 15.0
    weave_amplitude_m: float = 40.0
    weave_count: int = 2
    weave_duration_s: float = 35.0
    descent_start_s: float = 35.0
    descent_duration_s: float = 20.0
    duration_s: float = 105.0


@dataclass(frozen=True)
class FiducialConfig:
    spacing_m: float = 100.0
    cross_track_offset_m: float = 6.0


@dataclass(frozen=True)
class ImuConfig:
    grade: str = "tactical"  # commercial | tactical | navigation | custom
    sigma_ss_accel_g: float | None = None  # required for grade: custom
    vrw_mps_sqrt_hr: float | None = None
    sigma_ss_gyro_deg_hr: float | None = None
    arw_deg_sqrt_hr: float | None = None
    tau_accel_s: float = 100.0
    tau_gyro_s: float = 100.0
    rate_hz: float = 100.0


@dataclass(frozen=True)
class CameraConfig:
    rate_hz: float = 5.0
    fov_deg: float = 40.0
    fov_is_half_cone: bool = True  # False reads fov_deg as a full cone
    los_sigma_3_mrad: float = 3.64  # 3-sigma per-axis projection noise
    lever_arm_m: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class GnssConfig:
    rate_hz: float = 1.0
    sigma_3_m: tuple[float, float, float] = (1.0, 1.0, 3.0)  # 3-sigma NED
    cutoff_altitude_m: float = 40.0


@dataclass(frozen=True)
class FilterConfig:
    init_pos_sigma_m: float = 1.0
    init_vel_sigma_mps: float = 0.1
    init_att_sigma_deg: float = 0.5
    init_mount_sigma_deg: float = 0.1
    r_scale: float = 1.0  # scales the filter's assumed R (diagnostic)


@dataclass(frozen=True)
class SimConfig:
    truth_rate_hz: float = 200.0
    log_every_s: float = 0.1


_SECTIONS: dict[str, type] = {
    "trajectory": TrajectoryConfig,
    "fiducials": FiducialConfig,
    "imu": ImuConfig,
    "camera": CameraConfig,
    "gnss": GnssConfig,
    "filter": FilterConfig,
    "sim": SimConfig,
}


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete scenario description; see module docstring for defaults."""

    seed: int = 1
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    fiducials: FiducialConfig = field(default_factory=FiducialConfig)
    imu: ImuConfig = field(default_factory=ImuConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    gnss: GnssConfig = field(default_factory=GnssConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    sim: SimConfig = field(default_factory=SimConfig)

    # -- construction ---------------------------------------------------------

    @classmethod
    def from_dict(cls, data: dict | None) -> "ScenarioConfig":
        data = dict(data or {})
        known = {"seed"} | set(_SECTIONS)
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown config key '{key}'")
        kwargs: dict = {}
        if "seed" in data:
            kwargs["seed"] = _coerce(data["seed"], int, "seed")
        for name, section_cls in _SECTIONS.items():
            if name in data:
                kwargs[name] = _build_section(section_cls, data[name], name)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        out: dict = {"seed": self.seed}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
            for key, val in out[name].items():
                if isinstance(val, tuple):
                    out[name][key] = list(val)
        return out

    # -- validation -----------------------------------------------------------

    def validate(self) -> None:
        tr, im, cam, gn, fl, sim = (
            self.trajectory,
            self.imu,
            self.camera,
            self.gnss,
            self.filter,
            self.sim,
        )
        _require(tr.duration_s > 0, "trajectory.duration_s must be positive")
        _require(tr.cruise_altitude_m > 0, "trajectory.cruise_altitude_m must be positive")
        _require(tr.ground_speed_mps > 0, "trajectory.ground_speed_mps must be positive")
        _require(self.fiducials.spacing_m > 0, "fiducials.spacing_m must be positive")
        _require(im.rate_hz > 0, "imu.rate_hz must be positive")
        _require(im.tau_accel_s > 0, "imu.tau_accel_s must be positive")
        _require(im.tau_gyro_s > 0, "imu.tau_gyro_s must be positive")
        if im.grade == "custom":
            for name in (
                "sigma_ss_accel_g",
                "vrw_mps_sqrt_hr",
                "sigma_ss_gyro_deg_hr",
                "arw_deg_sqrt_hr",
            ):
                _require(
                    getattr(im, name) is not None,
                    f"imu.{name} is required when imu.grade is 'custom'",
                )
        elif im.grade not in IMU_GRADES:
            raise ConfigError(
                f"imu.grade must be one of {sorted(IMU_GRADES)} or 'custom'"
            )
        _require(cam.rate_hz > 0, "camera.rate_hz must be positive")
        _require(0 < cam.fov_deg < 180, "camera.fov_deg must lie in (0, 180)")
        _require(cam.los_sigma_3_mrad > 0, "camera.los_sigma_3_mrad must be positive")
        _require(gn.rate_hz > 0, "gnss.rate_hz must be positive")
        _require(
            all(s > 0 for s in gn.sigma_3_m) and len(gn.sigma_3_m) == 3,
            "gnss.sigma_3_m must be three positive values",
        )
        _require(fl.r_scale > 0, "filter.r_scale must be positive")
        _require(sim.truth_rate_hz > 0, "sim.truth_rate_hz must be positive")
        _require(sim.log_every_s > 0, "sim.log_every_s must be positive")

        # rate compatibility: the scheduler works on integer IMU-step grids
        ratio = sim.truth_rate_hz / im.rate_hz
        _require(
            abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 2 and round(ratio) % 2 == 0,
            "sim.truth_rate_hz must be an even integer multiple of imu.rate_hz",
        )
        for name, rate in (("gnss.rate_hz", gn.rate_hz), ("camera.rate_hz", cam.rate_hz)):
            per = im.rate_hz / rate
            _require(
                abs(per - round(per)) < 1e-9 and round(per) >= 1,
                f"imu.rate_hz must be an integer multiple of {name}",
            )
        steps = sim.log_every_s * im.rate_hz
        _require(
            abs(steps - round(steps)) < 1e-9 and round(steps) >= 1,
            "sim.log_every_s must be an integer multiple of the IMU period",
        )
        # plan-level geometry checks (raises ValueError on a bad descent)
        try:
            from .truth import plan_trajectory

            plan_trajectory(self.build_plan())
        except ValueError as exc:
            raise ConfigError(f"trajectory: {exc}") from exc

    # -- builders ---------------------------------------------------------------

    def build_plan(self) -> TrajectoryPlan:
        tr = self.trajectory
        return TrajectoryPlan(
            ground_speed=tr.ground_speed_mps,
            start_altitude=tr.start_altitude_m,
            cruise_altitude=tr.cruise_altitude_m,
            weave_amplitude=tr.weave_amplitude_m,
            weave_count=tr.weave_count,
            weave_duration=tr.weave_duration_s,
            descent_start=tr.descent_start_s,
            descent_duration=tr.descent_duration_s,
            duration=tr.duration_s,
            gnss_cutoff_altitude=self.gnss.cutoff_altitude_m,
        )

    def build_imu_spec(self) -> ImuSpec:
        im = self.imu
        if im.grade == "custom":
            return ImuSpec(
                sigma_ss_accel_g=im.sigma_ss_accel_g,
                vrw=im.vrw_mps_sqrt_hr,
                sigma_ss_gyro_dph=im.sigma_ss_gyro_deg_hr,
                arw=im.arw_deg_sqrt_hr,
                tau_accel=im.tau_accel_s,
                tau_gyro=im.tau_gyro_s,
            )
        return replace(
            IMU_GRADES[im.grade], tau_accel=im.tau_accel_s, tau_gyro=im.tau_gyro_s
        )

    def build_camera(self) -> CameraModel:
        cam = self.camera
        return CameraModel(
            fov=np.deg2rad(cam.fov_deg),
            fov_is_half_cone=cam.fov_is_half_cone,
            sigma_los=cam.los_sigma_3_mrad * 1e-3 / 3.0,
            rate_hz=cam.rate_hz,
            lever_arm=np.asarray(cam.lever_arm_m, dtype=float),
        )

    def build_gnss(self) -> GnssModel:
        gn = self.gnss
        return GnssModel(
            sigma=np.asarray(gn.sigma_3_m, dtype=float) / 3.0,
            rate_hz=gn.rate_hz,
            cutoff_altitude=gn.cutoff_altitude_m,
        )


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _coerce(value, target_type, path: str):
    try:
        if target_type is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        return target_type(value)
    except (TypeError, ValueError):
        raise ConfigError(f"'{path}' has invalid value {value!r}") from None


def _build_section(section_cls: type, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a mapping")
    known = {f.name: f for f in fields(section_cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{path}.{key}'")
        default = known[key].default
        if isinstance(default, bool):
            kwargs[key] = _coerce(value, bool, f"{path}.{key}")
        elif isinstance(default, int) and not isinstance(default, bool):
            kwargs[key] = _coerce(value, int, f"{path}.{key}")
        elif isinstance(default, float):
            kwargs[key] = _coerce(value, float, f"{path}.{key}")
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"'{path}.{key}' must be a list")
            kwargs[key] = tuple(float(v) for v in value)
        else:
            kwargs[key] = value
    return section_cls(**kwargs)


def load_config(path: str | None = None) -> ScenarioConfig:
    """Load a scenario from YAML; None or an empty file gives the nominal one."""
    if path is None:
        cfg = ScenarioConfig()
        cfg.validate()
        return cfg
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return ScenarioConfig.from_dict(data)


def save_config(cfg: ScenarioConfig, path: str) -> None:
    """Write a scenario as YAML; loading it back reproduces the config."""
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
