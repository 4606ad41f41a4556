"""Truth-side simulation: reference trajectory, truth-state dynamics, IMU.

The truth state carries NED position and velocity, the body-to-NED attitude
quaternion, accelerometer and gyroscope biases (first-order Gauss-Markov),
and a constant camera-mount quaternion.  The reference trajectory is
analytic (closed-form position/velocity/acceleration/attitude), so planned
kinematics are exactly self-consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .attitude import quat_mult, quat_normalize, quat_to_dcm
from .units import (
    GRAVITY,
    GRAVITY_NED,
    accel_bias_to_si,
    arw_to_psd,
    discrete_noise_sigma,
    gyro_bias_to_si,
    vrw_to_psd,
)

__all__ = [
    "ImuSpec",
    "IMU_GRADES",
    "TruthState",
    "TruthRates",
    "ImuSample",
    "TrajectoryPlan",
    "TrajectoryReference",
    "FiducialField",
    "plan_trajectory",
    "place_fiducials",
    "truth_derivative",
    "step_truth",
    "ecrv_transition",
    "imu_sample",
]

MAX_TRUTH_DT = 0.02
MAX_DESCENT_ACCEL = 3.0 * GRAVITY


@dataclass(frozen=True)
class ImuSpec:
    """IMU error specification in data-sheet units.

    Attributes
    ----------
    sigma_ss_accel_g:
        Steady-state accelerometer bias sigma, g.
    vrw:
        Velocity random walk, (m/s)/sqrt(hr).
    sigma_ss_gyro_dph:
        Steady-state gyroscope bias sigma, deg/hr.
    arw:
        Angular random walk, deg/sqrt(hr).
    tau_accel, tau_gyro:
        Bias correlation time constants, s.
    """

    sigma_ss_accel_g: float
    vrw: float
    sigma_ss_gyro_dph: float
    arw: float
    tau_accel: float = 100.0
    tau_gyro: float = 100.0

    def __post_init__(self) -> None:
        for name in ("sigma_ss_accel_g", "vrw", "sigma_ss_gyro_dph", "arw"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"ImuSpec.{name} must be nonnegative")
        if self.tau_accel <= 0.0 or self.tau_gyro <= 0.0:
            raise ValueError("ImuSpec time constants must be positive")

    @property
    def sigma_ss_accel(self) -> float:
        """Accel bias steady-state sigma, m/s^2."""
        return accel_bias_to_si(self.sigma_ss_accel_g)

    @property
    def sigma_ss_gyro(self) -> float:
        """Gyro bias steady-state sigma, rad/s."""
        return gyro_bias_to_si(self.sigma_ss_gyro_dph)

    @property
    def accel_noise_psd(self) -> float:
        """Accelerometer white-noise PSD, m^2/s^3."""
        return vrw_to_psd(self.vrw)

    @property
    def gyro_noise_psd(self) -> float:
        """Gyroscope white-noise PSD, rad^2/s."""
        return arw_to_psd(self.arw)


IMU_GRADES: dict[str, ImuSpec] = {
    "commercial": ImuSpec(0.0100, 0.600, 10.0, 0.700),
    "tactical": ImuSpec(0.0010, 0.060, 1.0, 0.070),
    "navigation": ImuSpec(0.0001, 0.006, 0.1, 0.007),
}


def _unit4(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise ValueError(f"{name} must be a length-4 quaternion")
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise ValueError(f"{name} must be unit norm")
    return q


@dataclass
class TruthState:
    """Full truth state: position/velocity (NED), attitude, biases, mount."""

    p: np.ndarray
    v: np.ndarray
    q_bn: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    q_cb: np.ndarray

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.b_a = np.asarray(self.b_a, dtype=float)
        self.b_g = np.asarray(self.b_g, dtype=float)
        self.q_bn = _unit4(self.q_bn, "q_bn")
        self.q_cb = _unit4(self.q_cb, "q_cb")

    @property
    def altitude(self) -> float:
        """Height above the fiducial plane (m); down coordinate negated."""
        return -float(self.p[2])

    def copy(self) -> "TruthState":
        return TruthState(
            self.p.copy(),
            self.v.copy(),
            self.q_bn.copy(),
            self.b_a.copy(),
            self.b_g.copy(),
            self.q_cb.copy(),
        )


@dataclass
class TruthRates:
    """Time derivative of the truth state (camera-mount rate is zero)."""

    dp: np.ndarray
    dv: np.ndarray
    dq_bn: np.ndarray
    db_a: np.ndarray
    db_g: np.ndarray


@dataclass(frozen=True)
class ImuSample:
    """One discrete IMU output: specific force (m/s^2), rate (rad/s), time."""

    nu_tilde: np.ndarray
    omega_tilde: np.ndarray
    t: float = 0.0


@dataclass(frozen=True)
class TrajectoryPlan:
    """Parameters of the flight profile.

    The profile flies north at constant ground speed, weaves east-west
    while at the start altitude, then descends on a smooth ramp to the
    cruise altitude above the fiducial plane and holds it to the end.
    """

    ground_speed: float = 15.0  # m/s, northward
    start_altitude: float = 120.0  # m
    cruise_altitude: float = 15.0  # m above fiducial plane
    weave_amplitude: float = 40.0  # m, east-west
    weave_count: int = 2
    weave_duration: float = 35.0  # s
    descent_start: float = 35.0  # s
    descent_duration: float = 20.0  # s
    duration: float = 105.0  # s
    gnss_cutoff_altitude: float = 40.0  # m


def _smoothstep(u: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quintic 0->1 ramp with zero slope and curvature at both ends."""
    u = np.clip(u, 0.0, 1.0)
    s = u**3 * (6.0 * u * u - 15.0 * u + 10.0)
    ds = 30.0 * u * u * (u - 1.0) ** 2
    dds = 60.0 * u * (2.0 * u - 1.0) * (u - 1.0)
    return s, ds, dds


class TrajectoryReference:
    """Closed-form reference trajectory produced by :func:`plan_trajectory`.

    All evaluation methods accept a scalar time or an array of times and
    broadcast accordingly.  Velocity and acceleration are the exact time
    derivatives of the position profile.
    """

    def __init__(self, plan: TrajectoryPlan) -> None:
        self.plan = plan

    # -- east weave channel -------------------------------------------------

    def _east(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pl = self.plan
        ts = pl.weave_duration
        if pl.weave_amplitude == 0.0 or pl.weave_count == 0 or ts <= 0.0:
            z = np.zeros_like(t)
            return z, z.copy(), z.copy()
        a = pl.weave_amplitude
        om = 2.0 * np.pi * pl.weave_count / ts
        k = np.pi / ts
        active = t < ts
        tt = np.where(active, t, 0.0)
        w = np.sin(k * tt) ** 2
        dw = k * np.sin(2.0 * k * tt)
        ddw = 2.0 * k * k * np.cos(2.0 * k * tt)
        s = np.sin(om * tt)
        c = np.cos(om * tt)
        e = a * w * s
        de = a * (dw * s + w * om * c)
        dde = a * (ddw * s + 2.0 * dw * om * c - w * om * om * s)
        return (
            np.where(active, e, 0.0),
            np.where(active, de, 0.0),
            np.where(active, dde, 0.0),
        )

    # -- vertical channel ----------------------------------------------------

    def _altitude(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pl = self.plan
        drop = pl.start_altitude - pl.cruise_altitude
        if pl.descent_duration <= 0.0 or drop == 0.0:
            alt = np.full_like(t, pl.start_altitude if drop != 0.0 else pl.cruise_altitude)
            z = np.zeros_like(t)
            return alt, z, z.copy()
        u = (t - pl.descent_start) / pl.descent_duration
        s, ds, dds = _smoothstep(u)
        alt = pl.start_altitude - drop * s
        dalt = -drop * ds / pl.descent_duration
        ddalt = -drop * dds / pl.descent_duration**2
        return alt, dalt, ddalt

    # -- public evaluation ----------------------------------------------------

    def position(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        e, _, _ = self._east(t)
        alt, _, _ = self._altitude(t)
        out = np.stack([self.plan.ground_speed * t, e, -alt], axis=-1)
        return out

    def velocity(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        _, de, _ = self._east(t)
        _, dalt, _ = self._altitude(t)
        vn = np.broadcast_to(self.plan.ground_speed, t.shape).copy()
        return np.stack([vn, de, -dalt], axis=-1)

    def acceleration(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        _, _, dde = self._east(t)
        _, _, ddalt = self._altitude(t)
        zn = np.zeros_like(t)
        return np.stack([zn, dde, -ddalt], axis=-1)

    def heading(self, t) -> np.ndarray:
        v = self.velocity(t)
        return np.arctan2(v[..., 1], v[..., 0])

    def heading_rate(self, t) -> np.ndarray:
        v = self.velocity(t)
        a = self.acceleration(t)
        vn, ve = v[..., 0], v[..., 1]
        return (a[..., 1] * vn - a[..., 0] * ve) / (vn * vn + ve * ve)

    def attitude(self, t) -> np.ndarray:
        """Body-to-NED quaternion: yaw follows the velocity heading."""
        psi = self.heading(t)
        half = 0.5 * psi
        out = np.zeros(np.shape(half) + (4,))
        out[..., 0] = np.cos(half)
        out[..., 3] = np.sin(half)
        return out

    def angular_rate(self, t) -> np.ndarray:
        """Body angular rate (rad/s); yaw-only motion, so z component only."""
        psid = self.heading_rate(t)
        out = np.zeros(np.shape(psid) + (3,))
        out[..., 2] = psid
        return out

    def specific_force(self, t) -> np.ndarray:
        """True specific force in the body frame (acceleration minus gravity)."""
        a = self.acceleration(t)
        psi = self.heading(t)
        f_n = a[..., 0]
        f_e = a[..., 1]
        f_d = a[..., 2] - GRAVITY
        c, s = np.cos(psi), np.sin(psi)
        return np.stack([c * f_n + s * f_e, -s * f_n + c * f_e, f_d], axis=-1)

    def altitude(self, t) -> np.ndarray:
        alt, _, _ = self._altitude(np.asarray(t, dtype=float))
        return alt

    def gnss_loss_time(self) -> float:
        """Time at which altitude first drops below the GNSS cutoff."""
        pl = self.plan
        cutoff = pl.gnss_cutoff_altitude
        if pl.start_altitude < cutoff:
            return 0.0
        if pl.cruise_altitude >= cutoff:
            return np.inf
        lo = pl.descent_start
        hi = pl.descent_start + pl.descent_duration
        for _ in range(80):  # bisection; altitude is monotone on the ramp
            mid = 0.5 * (lo + hi)
            if self.altitude(mid) > cutoff:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    def descent_end_time(self) -> float:
        return self.plan.descent_start + self.plan.descent_duration

    def initial_truth(self, q_cb: np.ndarray | None = None) -> TruthState:
        """Truth state on the reference at t = 0 with zero biases."""
        if q_cb is None:
            q_cb = np.array([1.0, 0.0, 0.0, 0.0])
        t0 = np.asarray(0.0)
        return TruthState(
            p=self.position(t0),
            v=self.velocity(t0),
            q_bn=self.attitude(t0),
            b_a=np.zeros(3),
            b_g=np.zeros(3),
            q_cb=np.asarray(q_cb, dtype=float),
        )


def plan_trajectory(plan: TrajectoryPlan) -> TrajectoryReference:
    """Validate a plan and return its closed-form reference trajectory.

    Rejects non-positive durations/altitudes and descent ramps that would
    demand more than 3 g of vertical acceleration.
    """
    if plan.duration <= 0.0:
        raise ValueError("plan duration must be positive")
    if plan.cruise_altitude <= 0.0:
        raise ValueError("cruise altitude must be positive")
    if plan.ground_speed <= 0.0:
        raise ValueError("ground speed must be positive")
    if plan.descent_start < 0.0 or plan.descent_duration < 0.0:
        raise ValueError("descent timing must be nonnegative")
    if plan.descent_start + plan.descent_duration > plan.duration:
        raise ValueError("descent must finish within the plan duration")
    drop = abs(plan.start_altitude - plan.cruise_altitude)
    if drop > 0.0:
        if plan.descent_duration <= 0.0:
            raise ValueError("descent duration must be positive when altitudes differ")
        # peak |s''| of the quintic ramp is 10/sqrt(3)
        peak = drop * (10.0 / np.sqrt(3.0)) / plan.descent_duration**2
        if peak > MAX_DESCENT_ACCEL:
            raise ValueError(
                f"descent needs {peak / GRAVITY:.2f} g vertical acceleration (> 3 g)"
            )
    return TrajectoryReference(plan)


@dataclass(frozen=True)
class FiducialField:
    """Surveyed fiducial locations: ids and NED positions on the ground plane."""

    ids: np.ndarray
    positions: np.ndarray  # shape (n, 3)

    def __post_init__(self) -> None:
        if len(self.ids) != len(set(int(i) for i in self.ids)):
            raise ValueError("fiducial ids must be unique")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("fiducial positions must be finite")

    def __len__(self) -> int:
        return len(self.ids)

    def position_of(self, fid: int) -> np.ndarray:
        idx = np.nonzero(self.ids == fid)[0]
        if len(idx) == 0:
            raise KeyError(f"unknown fiducial id {fid}")
        return self.positions[idx[0]]


def place_fiducials(
    ref: TrajectoryReference, spacing: float = 100.0, offset: float = 6.0
) -> FiducialField:
    """Lay fiducials along the low-altitude corridor of the ground trace.

    Markers are placed every ``spacing`` meters of along-track distance,
    starting where the descent ends, on alternating sides of the trace at
    ``+-offset`` cross-track.  All markers sit on the ground plane (d = 0).
    """
    if spacing <= 0.0:
        raise ValueError("fiducial spacing must be positive")
    t0 = ref.descent_end_time()
    t1 = ref.plan.duration
    # dense sample of the horizontal trace for arc length and tangents
    ts = np.linspace(t0, t1, max(int((t1 - t0) * 50), 2))
    pos = ref.position(ts)[:, :2]
    seg = np.diff(pos, axis=0)
    seglen = np.hypot(seg[:, 0], seg[:, 1])
    arc = np.concatenate([[0.0], np.cumsum(seglen)])
    total = arc[-1]
    n_fid = int(np.floor(total / spacing + 1e-9)) + 1
    targets = np.arange(n_fid) * spacing
    north = np.interp(targets, arc, pos[:, 0])
    east = np.interp(targets, arc, pos[:, 1])
    vel = ref.velocity(np.interp(targets, arc, ts))
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    # unit cross-track vector: trace tangent rotated +90 deg (toward east)
    lat_n = -np.sin(heading)
    lat_e = np.cos(heading)
    signs = np.where(np.arange(n_fid) % 2 == 0, 1.0, -1.0)
    positions = np.stack(
        [north + signs * offset * lat_n, east + signs * offset * lat_e, np.zeros(n_fid)],
        axis=-1,
    )
    return FiducialField(ids=np.arange(n_fid), positions=positions)


def truth_derivative(
    x: TruthState,
    nu_b: np.ndarray,
    omega_b: np.ndarray,
    spec: ImuSpec,
    noise_accel: np.ndarray | None = None,
    noise_gyro: np.ndarray | None = None,
) -> TruthRates:
    """Truth-state time derivative driven by true specific force and rate.

    Position integrates velocity; velocity integrates rotated specific force
    plus gravity; the attitude quaternion follows the body rate; each bias
    decays with its time constant plus (optional) process noise.  The
    camera-mount quaternion is constant.
    """
    t_bn = quat_to_dcm(x.q_bn)
    dv = t_bn @ np.asarray(nu_b, dtype=float) + GRAVITY_NED
    omega_q = np.array([0.0, omega_b[0], omega_b[1], omega_b[2]])
    dq = 0.5 * quat_mult(x.q_bn, omega_q)
    db_a = -x.b_a / spec.tau_accel
    db_g = -x.b_g / spec.tau_gyro
    if noise_accel is not None:
        db_a = db_a + np.asarray(noise_accel, dtype=float)
    if noise_gyro is not None:
        db_g = db_g + np.asarray(noise_gyro, dtype=float)
    return TruthRates(dp=x.v.copy(), dv=dv, dq_bn=dq, db_a=db_a, db_g=db_g)


def ecrv_transition(
    b: np.ndarray,
    tau: float,
    sigma_ss: float,
    dt: float,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """Exact discrete step of a first-order Gauss-Markov bias.

    ``b+ = exp(-dt/tau) b + w`` with ``Var(w) = sigma_ss^2 (1 - exp(-2 dt/tau))``,
    which preserves the stationary variance ``sigma_ss^2`` exactly for any dt.
    Broadcasts over leading axes of ``b``; ``rng=None`` suppresses the noise.
    """
    phi = np.exp(-dt / tau)
    out = phi * np.asarray(b, dtype=float)
    if rng is not None and sigma_ss > 0.0:
        w_sigma = sigma_ss * np.sqrt(1.0 - phi * phi)
        out = out + rng.normal(0.0, w_sigma, size=np.shape(out))
    return out


def step_truth(
    x: TruthState,
    nu_b: np.ndarray,
    omega_b: np.ndarray,
    spec: ImuSpec,
    dt: float,
    rng: np.random.Generator | None = None,
) -> TruthState:
    """Advance the truth state by ``dt`` under constant body-frame inputs.

    Kinematics (p, v, q) use a classical 4th-order Runge-Kutta step of the
    deterministic dynamics; biases use the exact discrete Gauss-Markov
    transition.  The attitude quaternion is renormalized afterward.
    """
    if not 0.0 < dt <= MAX_TRUTH_DT:
        raise ValueError(f"truth step must satisfy 0 < dt <= {MAX_TRUTH_DT}")
    nu_b = np.asarray(nu_b, dtype=float)
    omega_q = np.array([0.0, omega_b[0], omega_b[1], omega_b[2]])

    def deriv(p, v, q):
        dv = quat_to_dcm(q) @ nu_b + GRAVITY_NED
        dq = 0.5 * quat_mult(q, omega_q)
        return v, dv, dq

    p0, v0, q0 = x.p, x.v, x.q_bn
    k1 = deriv(p0, v0, q0)
    k2 = deriv(p0 + 0.5 * dt * k1[0], v0 + 0.5 * dt * k1[1], q0 + 0.5 * dt * k1[2])
    k3 = deriv(p0 + 0.5 * dt * k2[0], v0 + 0.5 * dt * k2[1], q0 + 0.5 * dt * k2[2])
    k4 = deriv(p0 + dt * k3[0], v0 + dt * k3[1], q0 + dt * k3[2])
    p = p0 + dt / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
    v = v0 + dt / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
    q = quat_normalize(q0 + dt / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]))

    b_a = ecrv_transition(x.b_a, spec.tau_accel, spec.sigma_ss_accel, dt, rng)
    b_g = ecrv_transition(x.b_g, spec.tau_gyro, spec.sigma_ss_gyro, dt, rng)
    return TruthState(p=p, v=v, q_bn=q, b_a=b_a, b_g=b_g, q_cb=x.q_cb.copy())


def imu_sample(
    x: TruthState,
    nu_b: np.ndarray,
    omega_b: np.ndarray,
    spec: ImuSpec,
    dt: float,
    rng: np.random.Generator | None = None,
    t: float = 0.0,
) -> ImuSample:
    """Corrupt true specific force and rate with the truth biases and noise.

    The additive noise per axis has standard deviation ``sqrt(psd / dt)``
    for a sample interval ``dt``; ``rng=None`` gives the noise-free sample.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    nu = np.asarray(nu_b, dtype=float) + x.b_a
    om = np.asarray(omega_b, dtype=float) + x.b_g
    if rng is not None:
        nu = nu + rng.normal(0.0, discrete_noise_sigma(spec.accel_noise_psd, dt), 3)
        om = om + rng.normal(0.0, discrete_noise_sigma(spec.gyro_noise_psd, dt), 3)
    return ImuSample(nu_tilde=nu, omega_tilde=om, t=t)
