"""Unit conversions for sensor data sheets published in mixed units.

Everything downstream of this module works in SI (m, s, rad).  Data-sheet
values enter in the customary inertial-sensor units: bias sigmas in g or
deg/hr, random walks in (m/s)/sqrt(hr) or deg/sqrt(hr).  Keeping every
conversion here (with tests) is deliberate: silent unit mistakes are the
dominant defect class in INS simulation.
"""

from __future__ import annotations

import numpy as np

GRAVITY = 9.80665
"""Standard gravity, m/s^2, applied straight down in NED."""

GRAVITY_NED = np.array([0.0, 0.0, GRAVITY])
"""Gravity vector in the NED frame (down is positive)."""

_SQRT_HR = 60.0  # sqrt(3600 s)


def accel_bias_to_si(sigma_g: float) -> float:
    """Accelerometer bias sigma, g -> m/s^2."""
    return sigma_g * GRAVITY


def gyro_bias_to_si(sigma_deg_per_hr: float) -> float:
    """Gyroscope bias sigma, deg/hr -> rad/s."""
    return np.deg2rad(sigma_deg_per_hr) / 3600.0


def vrw_to_psd(vrw_mps_sqrt_hr: float) -> float:
    """Velocity random walk, (m/s)/sqrt(hr) -> white-noise PSD in m^2/s^3.

    (m/s)/sqrt(hr) divided by sqrt(3600 s/hr) gives (m/s)/sqrt(s); the PSD
    is its square.
    """
    return (vrw_mps_sqrt_hr / _SQRT_HR) ** 2


def arw_to_psd(arw_deg_sqrt_hr: float) -> float:
    """Angular random walk, deg/sqrt(hr) -> white-noise PSD in rad^2/s."""
    return (np.deg2rad(arw_deg_sqrt_hr) / _SQRT_HR) ** 2


def discrete_noise_sigma(psd: float, dt: float) -> float:
    """Per-sample standard deviation of white noise with the given PSD.

    Sampling continuous white noise of PSD ``q`` at interval ``dt`` yields
    independent draws of standard deviation ``sqrt(q / dt)``.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    return np.sqrt(psd / dt)
