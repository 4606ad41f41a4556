"""Discrete measurement synthesis: GNSS position fixes and camera LOS.

GNSS fixes are the true position plus per-axis Gaussian noise, available
only above a cutoff altitude (a pure function of altitude, no hysteresis).
LOS measurements are pinhole projections of the camera-to-fiducial vector,
gated by a field-of-view cone around the camera boresight (body z-axis for
the default mount).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attitude import quat_to_dcm
from .truth import FiducialField, TruthState

__all__ = [
    "GnssModel",
    "CameraModel",
    "GnssMeas",
    "LosMeas",
    "gnss_measure",
    "los_vector",
    "los_measure",
    "visible_fiducials",
]


def _identity_quat() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class GnssModel:
    """Loosely-coupled GNSS receiver model.

    ``sigma`` is the per-axis 1-sigma noise in meters (NED order); fixes
    are unavailable below ``cutoff_altitude``.
    """

    sigma: np.ndarray = field(default_factory=lambda: np.array([1.0 / 3.0, 1.0 / 3.0, 1.0]))
    rate_hz: float = 1.0
    cutoff_altitude: float = 40.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.sigma.shape != (3,) or np.any(self.sigma <= 0.0):
            raise ValueError("GnssModel.sigma must be three positive values")
        if self.rate_hz <= 0.0:
            raise ValueError("GnssModel.rate_hz must be positive")


@dataclass(frozen=True)
class CameraModel:
    """Downward-looking camera with a cone field-of-view gate.

    ``fov`` is the configured field-of-view angle in radians.  With
    ``fov_is_half_cone`` (default) the gate accepts LOS directions within
    ``fov`` of the boresight; otherwise ``fov`` is read as a full cone and
    the gate is ``fov/2``.  ``sigma_los`` is the per-axis projection noise
    sigma in tangent units.
    """

    q_cb: np.ndarray = field(default_factory=_identity_quat)
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fov: float = np.deg2rad(40.0)
    fov_is_half_cone: bool = True
    sigma_los: float = 3.64e-3 / 3.0
    rate_hz: float = 5.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "q_cb", np.asarray(self.q_cb, dtype=float))
        object.__setattr__(self, "lever_arm", np.asarray(self.lever_arm, dtype=float))
        if not 0.0 < self.fov < np.pi:
            raise ValueError("CameraModel.fov must lie in (0, pi)")
        if self.sigma_los <= 0.0:
            raise ValueError("CameraModel.sigma_los must be positive")
        if self.rate_hz <= 0.0:
            raise ValueError("CameraModel.rate_hz must be positive")

    @property
    def gate_angle(self) -> float:
        """Half-angle of the visibility cone, radians."""
        return self.fov if self.fov_is_half_cone else 0.5 * self.fov


@dataclass(frozen=True)
class GnssMeas:
    """GNSS position fix (NED, meters) at time t."""

    z: np.ndarray
    t: float


@dataclass(frozen=True)
class LosMeas:
    """Image-plane projection pair (tangent units) of one fiducial at time t."""

    z: np.ndarray
    fiducial_id: int
    t: float


def gnss_measure(
    x: TruthState,
    model: GnssModel,
    rng: np.random.Generator | None = None,
    t: float = 0.0,
) -> GnssMeas | None:
    """True position plus Gaussian noise, or None below the cutoff altitude."""
    if x.altitude < model.cutoff_altitude:
        return None
    z = x.p.copy()
    if rng is not None:
        z = z + rng.normal(0.0, 1.0, 3) * model.sigma
    return GnssMeas(z=z, t=t)


def los_vector(
    x: TruthState, fiducial_pos: np.ndarray, lever_arm: np.ndarray | None = None
) -> np.ndarray:
    """Camera-frame vector from the camera to a fiducial (meters).

    Rotates the NED relative position into the body frame, subtracts the
    body-frame lever arm, then rotates into the camera frame.
    """
    r_f = np.asarray(fiducial_pos, dtype=float)
    d_b = np.zeros(3) if lever_arm is None else np.asarray(lever_arm, dtype=float)
    t_nb = quat_to_dcm(x.q_bn).T
    t_bc = quat_to_dcm(x.q_cb).T
    return t_bc @ (t_nb @ (r_f - x.p) - d_b)


def los_measure(
    x: TruthState,
    fiducial_id: int,
    field_: FiducialField,
    camera: CameraModel,
    rng: np.random.Generator | None = None,
    t: float = 0.0,
) -> LosMeas:
    """Pinhole projection of the LOS to one fiducial, plus Gaussian noise.

    The fiducial must be in front of the camera (positive boresight
    component); a violation indicates a gating bug in the caller.
    """
    los = los_vector(x, field_.position_of(fiducial_id), camera.lever_arm)
    if los[2] <= 0.0:
        raise ValueError(f"fiducial {fiducial_id} is behind the camera")
    z = np.array([los[0] / los[2], los[1] / los[2]])
    if rng is not None:
        z = z + rng.normal(0.0, camera.sigma_los, 2)
    return LosMeas(z=z, fiducial_id=int(fiducial_id), t=t)


def visible_fiducials(
    x: TruthState, field_: FiducialField, camera: CameraModel
) -> list[int]:
    """Ids of fiducials inside the camera's visibility cone, ascending.

    A fiducial is visible when its LOS has a positive boresight component
    and lies within the gate angle of the boresight.  Every visible
    fiducial is reported; simultaneous sightings are processed as separate
    measurements by the caller.
    """
    cos_gate = np.cos(camera.gate_angle)
    out: list[int] = []
    for fid, pos in zip(field_.ids, field_.positions):
        los = los_vector(x, pos, camera.lever_arm)
        norm = np.linalg.norm(los)
        if norm == 0.0 or los[2] <= 0.0:
            continue
        if los[2] / norm >= cos_gate:
            out.append(int(fid))
    return out
