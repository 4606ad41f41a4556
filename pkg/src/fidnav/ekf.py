"""18-error-state extended Kalman filter for the fiducial-aided navigator.

Error-state ordering (SI units): position, velocity, attitude small-angle,
accelerometer bias, gyroscope bias, camera-mount small-angle.  The error is
defined as truth minus estimate for the additive states; attitude errors
``dtheta`` satisfy ``q_true = correction_quat(dtheta) (x) q_est``, so the
posterior correction applies the estimated error with exactly the same map
(:func:`apply_correction`).

Propagation integrates the estimated state and the covariance jointly with
a classical 4th-order Runge-Kutta step (the Riccati derivative is
``F P + P F' + B Q B'``); updates use the Joseph form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .attitude import correction_quat, quat_conj, quat_mult, quat_normalize, quat_to_dcm, skew
from .sensors import CameraModel, GnssModel
from .truth import ImuSample, ImuSpec, TruthRates, TruthState
from .units import GRAVITY, GRAVITY_NED

__all__ = [
    "N_ERR",
    "POS",
    "VEL",
    "ATT",
    "BA",
    "BG",
    "MOUNT",
    "NavState",
    "MeasModel",
    "UpdateResult",
    "FilterNumericsError",
    "nav_derivative",
    "linearize_dynamics",
    "process_noise",
    "process_noise_diag",
    "initial_covariance",
    "propagate",
    "propagate_batch",
    "predict_gnss_measurement",
    "predict_los_measurement",
    "joseph_update",
    "update",
    "apply_correction",
    "error_between",
    "pack_state",
    "check_covariance",
]

N_ERR = 18
POS = slice(0, 3)
VEL = slice(3, 6)
ATT = slice(6, 9)
BA = slice(9, 12)
BG = slice(12, 15)
MOUNT = slice(15, 18)

MAX_RESIDUAL_COND = 1e12


class FilterNumericsError(RuntimeError):
    """Raised when the covariance loses positive semidefiniteness."""


@dataclass
class NavState:
    """Estimated state: position/velocity (NED), attitude, biases, mount."""

    p: np.ndarray
    v: np.ndarray
    q_bn: np.ndarray
    b_a: np.ndarray
    b_g: np.ndarray
    q_cb: np.ndarray

    def __post_init__(self) -> None:
        self.p = np.asarray(self.p, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        self.q_bn = np.asarray(self.q_bn, dtype=float)
        self.b_a = np.asarray(self.b_a, dtype=float)
        self.b_g = np.asarray(self.b_g, dtype=float)
        self.q_cb = np.asarray(self.q_cb, dtype=float)
        for name in ("q_bn", "q_cb"):
            if abs(np.linalg.norm(getattr(self, name)) - 1.0) > 1e-6:
                raise ValueError(f"NavState.{name} must be unit norm")

    def copy(self) -> "NavState":
        return NavState(
            self.p.copy(),
            self.v.copy(),
            self.q_bn.copy(),
            self.b_a.copy(),
            self.b_g.copy(),
            self.q_cb.copy(),
        )


def pack_state(nav: NavState) -> np.ndarray:
    """Pack the propagated part of the state into a length-16 vector."""
    return np.concatenate([nav.p, nav.v, nav.q_bn, nav.b_a, nav.b_g])


def _unpack_state(x: np.ndarray, q_cb: np.ndarray) -> NavState:
    return NavState(
        p=x[0:3].copy(),
        v=x[3:6].copy(),
        q_bn=x[6:10].copy(),
        b_a=x[10:13].copy(),
        b_g=x[13:16].copy(),
        q_cb=q_cb.copy(),
    )


# --------------------------------------------------------------------------
# jitted propagation core
# --------------------------------------------------------------------------


@njit(cache=True)
def _nav_deriv16(x, nu, om, tau_a, tau_g):
    """Derivative of the packed estimated state under one IMU sample.

    Returns the derivative together with the body-to-NED DCM and the
    rotated bias-corrected specific force (reused by the Riccati stage).
    """
    dx = np.empty(16)
    t_bn = quat_to_dcm(x[6:10])
    f_n = t_bn @ (nu - x[10:13])
    dx[0:3] = x[3:6]
    dx[3] = f_n[0]
    dx[4] = f_n[1]
    dx[5] = f_n[2] + GRAVITY
    w0 = om[0] - x[13]
    w1 = om[1] - x[14]
    w2 = om[2] - x[15]
    qw, qx, qy, qz = x[6], x[7], x[8], x[9]
    dx[6] = 0.5 * (-qx * w0 - qy * w1 - qz * w2)
    dx[7] = 0.5 * (qw * w0 + qy * w2 - qz * w1)
    dx[8] = 0.5 * (qw * w1 - qx * w2 + qz * w0)
    dx[9] = 0.5 * (qw * w2 + qx * w1 - qy * w0)
    dx[10:13] = -x[10:13] / tau_a
    dx[13:16] = -x[13:16] / tau_g
    return dx, t_bn, f_n


@njit(cache=True)
def _cov_deriv(P, t_bn, f_n, tau_a, tau_g, bqbt_diag):
    """Riccati derivative F P + P F' + B Q B' using the sparse F blocks."""
    FP = np.zeros((18, 18))
    FP[0:3] = P[3:6]
    FP[3:6] = skew(f_n) @ P[6:9] - t_bn @ P[9:12]
    FP[6:9] = t_bn @ P[12:15]
    FP[9:12] = -P[9:12] / tau_a
    FP[12:15] = -P[12:15] / tau_g
    out = FP + FP.T
    for i in range(18):
        out[i, i] += bqbt_diag[i]
    return out


@njit(cache=True)
def _rk4_step(x, P, nu, om, dt, tau_a, tau_g, bqbt_diag):
    d1, t1, f1 = _nav_deriv16(x, nu, om, tau_a, tau_g)
    p1 = _cov_deriv(P, t1, f1, tau_a, tau_g, bqbt_diag)
    d2, t2, f2 = _nav_deriv16(x + 0.5 * dt * d1, nu, om, tau_a, tau_g)
    p2 = _cov_deriv(P + 0.5 * dt * p1, t2, f2, tau_a, tau_g, bqbt_diag)
    d3, t3, f3 = _nav_deriv16(x + 0.5 * dt * d2, nu, om, tau_a, tau_g)
    p3 = _cov_deriv(P + 0.5 * dt * p2, t3, f3, tau_a, tau_g, bqbt_diag)
    d4, t4, f4 = _nav_deriv16(x + dt * d3, nu, om, tau_a, tau_g)
    p4 = _cov_deriv(P + dt * p3, t4, f4, tau_a, tau_g, bqbt_diag)
    xn = x + (dt / 6.0) * (d1 + 2.0 * d2 + 2.0 * d3 + d4)
    qn = np.sqrt(xn[6] ** 2 + xn[7] ** 2 + xn[8] ** 2 + xn[9] ** 2)
    xn[6:10] /= qn
    Pn = P + (dt / 6.0) * (p1 + 2.0 * p2 + 2.0 * p3 + p4)
    Pn = 0.5 * (Pn + Pn.T)
    return xn, Pn


@njit(cache=True)
def _propagate_chunk(x, P, nus, oms, dt, tau_a, tau_g, bqbt_diag):
    for i in range(nus.shape[0]):
        x, P = _rk4_step(x, P, nus[i], oms[i], dt, tau_a, tau_g, bqbt_diag)
    return x, P


# --------------------------------------------------------------------------
# dynamics contracts
# --------------------------------------------------------------------------


def nav_derivative(nav: NavState, imu: ImuSample, spec: ImuSpec) -> TruthRates:
    """Estimated-state derivative: bias-corrected IMU drives the kinematics.

    Bias estimates decay with their time constants (no process noise); the
    camera-mount rate is zero.
    """
    dx, _, _ = _nav_deriv16(
        pack_state(nav),
        np.asarray(imu.nu_tilde, dtype=float),
        np.asarray(imu.omega_tilde, dtype=float),
        spec.tau_accel,
        spec.tau_gyro,
    )
    return TruthRates(
        dp=dx[0:3], dv=dx[3:6], dq_bn=dx[6:10], db_a=dx[10:13], db_g=dx[13:16]
    )


def linearize_dynamics(
    nav: NavState, imu: ImuSample, spec: ImuSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Error-state dynamics matrix F (18x18) and noise coupling B (18x12).

    Block layout: velocity error responds to attitude error through the
    cross-product of the rotated specific force and to accel-bias error
    through -T; attitude error responds to gyro-bias error through +T; the
    biases decay with -1/tau; the camera-mount row is zero.
    """
    t_bn = quat_to_dcm(nav.q_bn)
    f_n = t_bn @ (np.asarray(imu.nu_tilde, dtype=float) - nav.b_a)
    F = np.zeros((N_ERR, N_ERR))
    F[POS, VEL] = np.eye(3)
    F[VEL, ATT] = skew(f_n)
    F[VEL, BA] = -t_bn
    F[ATT, BG] = t_bn
    F[BA, BA] = -np.eye(3) / spec.tau_accel
    F[BG, BG] = -np.eye(3) / spec.tau_gyro
    B = np.zeros((N_ERR, 12))
    B[VEL, 0:3] = -t_bn
    B[ATT, 3:6] = t_bn
    B[BA, 6:9] = np.eye(3)
    B[BG, 9:12] = np.eye(3)
    return F, B


def process_noise(spec: ImuSpec) -> np.ndarray:
    """12x12 PSD matrix of the process-noise vector [n_nu, n_om, n_a, n_g].

    White IMU noise blocks carry the random-walk PSDs; bias blocks carry
    ``2 sigma_ss^2 / tau`` so the Gauss-Markov variance is stationary.
    """
    return np.diag(process_noise_diag(spec))


def process_noise_diag(spec: ImuSpec) -> np.ndarray:
    q_a = 2.0 * spec.sigma_ss_accel**2 / spec.tau_accel
    q_g = 2.0 * spec.sigma_ss_gyro**2 / spec.tau_gyro
    return np.repeat([spec.accel_noise_psd, spec.gyro_noise_psd, q_a, q_g], 3)


def bqbt_diag(spec: ImuSpec) -> np.ndarray:
    """Diagonal of B Q B' (exact: the isotropic blocks commute with T)."""
    return np.concatenate([np.zeros(3), process_noise_diag(spec), np.zeros(3)])


def initial_covariance(
    spec: ImuSpec,
    pos_sigma: float = 1.0,
    vel_sigma: float = 0.1,
    att_sigma: float = np.deg2rad(0.5),
    mount_sigma: float = np.deg2rad(0.1),
) -> np.ndarray:
    """Diagonal initial covariance; bias blocks at the steady-state variance."""
    d = np.concatenate(
        [
            np.full(3, pos_sigma**2),
            np.full(3, vel_sigma**2),
            np.full(3, att_sigma**2),
            np.full(3, spec.sigma_ss_accel**2),
            np.full(3, spec.sigma_ss_gyro**2),
            np.full(3, mount_sigma**2),
        ]
    )
    return np.diag(d)


def check_covariance(P: np.ndarray) -> None:
    """Raise if P has an eigenvalue below -1e-9 times its trace."""
    eig = np.linalg.eigvalsh(0.5 * (P + P.T))
    floor = -1e-9 * max(np.trace(P), 1e-300)
    if eig[0] < floor:
        raise FilterNumericsError(
            f"covariance eigenvalue {eig[0]:.3e} below PSD floor {floor:.3e}"
        )


def propagate(
    nav: NavState, P: np.ndarray, imu: ImuSample, dt: float, spec: ImuSpec
) -> tuple[NavState, np.ndarray]:
    """One joint RK4 step of the estimated state and covariance over dt."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    x, Pn = _rk4_step(
        pack_state(nav),
        np.asarray(P, dtype=float),
        np.asarray(imu.nu_tilde, dtype=float),
        np.asarray(imu.omega_tilde, dtype=float),
        dt,
        spec.tau_accel,
        spec.tau_gyro,
        bqbt_diag(spec),
    )
    check_covariance(Pn)
    return _unpack_state(x, nav.q_cb), Pn


def propagate_batch(
    nav: NavState,
    P: np.ndarray,
    nu_tilde: np.ndarray,
    omega_tilde: np.ndarray,
    dt: float,
    spec: ImuSpec,
) -> tuple[NavState, np.ndarray]:
    """Propagate through a sequence of IMU samples (rows of the two arrays)."""
    x, Pn = _propagate_chunk(
        pack_state(nav),
        np.asarray(P, dtype=float),
        np.ascontiguousarray(nu_tilde, dtype=float),
        np.ascontiguousarray(omega_tilde, dtype=float),
        dt,
        spec.tau_accel,
        spec.tau_gyro,
        bqbt_diag(spec),
    )
    return _unpack_state(x, nav.q_cb), Pn


# --------------------------------------------------------------------------
# measurement models
# --------------------------------------------------------------------------


@dataclass
class MeasModel:
    """Linearized measurement: sensitivity H, noise coupling G, covariance R,
    and the predicted measurement."""

    H: np.ndarray
    G: np.ndarray
    R: np.ndarray
    z_pred: np.ndarray
    kind: str
    fiducial_id: int | None = None


def predict_gnss_measurement(nav: NavState, model: GnssModel) -> MeasModel:
    """Predicted GNSS fix is the estimated position; H picks it out directly."""
    H = np.zeros((3, N_ERR))
    H[:, POS] = np.eye(3)
    return MeasModel(
        H=H,
        G=np.eye(3),
        R=np.diag(np.asarray(model.sigma, dtype=float) ** 2),
        z_pred=nav.p.copy(),
        kind="gnss",
    )


def predict_los_measurement(
    nav: NavState, fiducial_pos: np.ndarray, camera: CameraModel
) -> MeasModel:
    """Predicted image-plane projection of a fiducial and its Jacobian.

    The Jacobian chains the pinhole-projection sensitivity with the
    camera-frame LOS sensitivities to position, attitude, and mount errors.
    Fails if the predicted LOS leaves the fiducial behind the camera.
    """
    r_f = np.asarray(fiducial_pos, dtype=float)
    t_bc = quat_to_dcm(nav.q_cb).T
    t_nb = quat_to_dcm(nav.q_bn).T
    rel_b = t_nb @ (r_f - nav.p) - camera.lever_arm
    los = t_bc @ rel_b
    if los[2] <= 0.0:
        raise ValueError("predicted LOS has the fiducial behind the camera")
    z_pred = np.array([los[0] / los[2], los[1] / los[2]])
    h_proj = np.array(
        [
            [1.0 / los[2], 0.0, -los[0] / los[2] ** 2],
            [0.0, 1.0 / los[2], -los[1] / los[2] ** 2],
        ]
    )
    h_chain = np.zeros((3, N_ERR))
    t_bc_t_nb = t_bc @ t_nb
    h_chain[:, POS] = -t_bc_t_nb
    h_chain[:, ATT] = t_bc_t_nb @ skew(nav.p - r_f)
    h_chain[:, MOUNT] = -t_bc @ skew(rel_b)
    sig = camera.sigma_los
    return MeasModel(
        H=h_proj @ h_chain,
        G=np.eye(2),
        R=np.diag([sig**2, sig**2]),
        z_pred=z_pred,
        kind="los",
    )


# --------------------------------------------------------------------------
# update
# --------------------------------------------------------------------------


@dataclass
class UpdateResult:
    """Outcome of one measurement update."""

    residual: np.ndarray
    residual_cov: np.ndarray
    dx: np.ndarray
    accepted: bool


def joseph_update(
    P: np.ndarray, H: np.ndarray, G: np.ndarray, R: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Kalman gain and Joseph-form posterior covariance.

    Returns (K, P_plus, S) where S is the residual covariance with a tiny
    diagonal inflation (1e-15 of its trace) guarding the inversion.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    G = np.atleast_2d(np.asarray(G, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    grg = G @ R @ G.T
    S = H @ P @ H.T + grg
    S = S + np.eye(len(S)) * (1e-15 * np.trace(S))
    K = np.linalg.solve(S.T, H @ P).T
    n = len(P)
    i_kh = np.eye(n) - K @ H
    P_plus = i_kh @ P @ i_kh.T + K @ grg @ K.T
    return K, 0.5 * (P_plus + P_plus.T), S


def apply_correction(nav: NavState, dx: np.ndarray) -> NavState:
    """Apply an 18-component error vector to the estimate.

    Additive states are shifted; the attitude and mount quaternions are
    left-multiplied by the small-angle correction quaternions and
    renormalized.  The same map injects a known error onto a nominal state,
    which the Jacobian self-checks rely on.
    """
    dx = np.asarray(dx, dtype=float)
    return NavState(
        p=nav.p + dx[POS],
        v=nav.v + dx[VEL],
        q_bn=quat_normalize(quat_mult(correction_quat(dx[ATT]), nav.q_bn)),
        b_a=nav.b_a + dx[BA],
        b_g=nav.b_g + dx[BG],
        q_cb=quat_normalize(quat_mult(correction_quat(dx[MOUNT]), nav.q_cb)),
    )


def update(
    nav: NavState, P: np.ndarray, z: np.ndarray, model: MeasModel
) -> tuple[NavState, np.ndarray, UpdateResult]:
    """Measurement update: gain, error estimate, Joseph covariance, correction.

    A residual covariance with condition number above 1e12 causes the
    measurement to be skipped (state and covariance returned unchanged,
    ``accepted=False``).
    """
    z = np.asarray(z, dtype=float)
    residual = z - model.z_pred
    grg = model.G @ model.R @ model.G.T
    S_probe = model.H @ P @ model.H.T + grg
    if np.linalg.cond(S_probe) >= MAX_RESIDUAL_COND:
        return (
            nav,
            P,
            UpdateResult(
                residual=residual,
                residual_cov=S_probe,
                dx=np.zeros(N_ERR),
                accepted=False,
            ),
        )
    K, P_plus, S = joseph_update(P, model.H, model.G, model.R)
    dx = K @ residual
    return apply_correction(nav, dx), P_plus, UpdateResult(
        residual=residual, residual_cov=S, dx=dx, accepted=True
    )


def _small_angle_from_quat(dq: np.ndarray) -> np.ndarray:
    """Error angle vector from an error quaternion ``q_true (x) q_est^-1``."""
    if dq[0] < 0.0:
        dq = -dq
    return -2.0 * dq[1:4] / dq[0]


def error_between(truth: TruthState, nav: NavState) -> np.ndarray:
    """18-component error (truth minus estimate) in the filter's convention."""
    dx = np.empty(N_ERR)
    dx[POS] = truth.p - nav.p
    dx[VEL] = truth.v - nav.v
    dx[ATT] = _small_angle_from_quat(quat_mult(truth.q_bn, quat_conj(nav.q_bn)))
    dx[BA] = truth.b_a - nav.b_a
    dx[BG] = truth.b_g - nav.b_g
    dx[MOUNT] = _small_angle_from_quat(quat_mult(truth.q_cb, quat_conj(nav.q_cb)))
    return dx
