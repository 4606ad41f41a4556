"""fidnav: simulation and covariance analysis for fiducial-aided UAV navigation.

Subpackages split along the simulation pipeline: attitude math, truth-side
simulation (trajectory, truth dynamics, IMU), discrete sensors (GNSS and
camera LOS), the 18-error-state EKF, the Monte Carlo harness, sensitivity
sweeps, and a CSV-producing command-line interface.
"""

from .truth import IMU_GRADES, ImuSample, ImuSpec, TrajectoryPlan, TruthState
from .sensors import CameraModel, GnssModel
from .ekf import NavState

__version__ = "0.1.0"

__all__ = [
    "IMU_GRADES",
    "ImuSample",
    "ImuSpec",
    "TrajectoryPlan",
    "TruthState",
    "CameraModel",
    "GnssModel",
    "NavState",
    "__version__",
]
