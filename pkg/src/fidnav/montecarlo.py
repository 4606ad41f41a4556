"""Truth/filter co-simulation, Monte Carlo ensembles, consistency diagnostics.

A single run steps the truth on a fine grid (exact closed-form kinematics
plus exact discrete Gauss-Markov bias transitions), feeds interval-midpoint
IMU samples to the filter, applies GNSS fixes while above the cutoff
altitude and LOS updates for every visible fiducial, and logs errors with
their 3-sigma envelopes on a decimated grid.

``covariance_only=True`` runs the same schedule with all noise suppressed
and zero initial errors, so every residual vanishes and only the covariance
evolves; sensitivity sweeps use this mode.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import ekf
from .attitude import correction_quat, quat_conj, quat_mult
from .config import ScenarioConfig
from .sensors import los_measure, visible_fiducials
from .truth import (
    FiducialField,
    TruthState,
    ecrv_transition,
    place_fiducials,
    plan_trajectory,
)
from .units import discrete_noise_sigma

__all__ = [
    "RunConfig",
    "ResidualSet",
    "RunLog",
    "ChannelStats",
    "WhitenessReport",
    "McSummary",
    "run_single",
    "run_monte_carlo",
    "residual_diagnostics",
    "CHANNELS",
]

MAX_AUTOCORR_LAG = 20
MIN_CHANNEL_SAMPLES = 30

# (type, component) pairs in reporting order
CHANNELS: tuple[tuple[str, int], ...] = (
    ("gnss", 0),
    ("gnss", 1),
    ("gnss", 2),
    ("los", 0),
    ("los", 1),
)


@dataclass(frozen=True)
class RunConfig:
    """One simulation run: scenario, random seed, and logging cadence.

    ``log_decimation`` counts IMU steps between log records (0 derives it
    from ``scenario.sim.log_every_s``).  ``with_gnss``/``with_los`` disable
    measurement types for degenerate studies (pure-inertial twin runs).
    """

    scenario: ScenarioConfig
    seed: int | np.random.SeedSequence = 0
    log_decimation: int = 0
    with_gnss: bool = True
    with_los: bool = True


@dataclass
class ResidualSet:
    """Residual history of one measurement type within a run."""

    t: np.ndarray
    fiducial_id: np.ndarray
    value: np.ndarray
    sigma3: np.ndarray
    normalized: np.ndarray
    accepted: np.ndarray

    @classmethod
    def empty(cls, width: int) -> "ResidualSet":
        return cls(
            t=np.empty(0),
            fiducial_id=np.empty(0, dtype=int),
            value=np.empty((0, width)),
            sigma3=np.empty((0, width)),
            normalized=np.empty((0, width)),
            accepted=np.empty(0, dtype=bool),
        )


@dataclass
class RunLog:
    """Decimated time series of one run plus its residual records.

    ``truth`` and ``nav`` are packed rows [p, v, q, b_a, b_g]; ``err`` is
    the 18-component error (truth minus estimate, filter convention) and
    ``sigma3`` the matching 3-sigma envelope from the covariance diagonal.
    """

    t: np.ndarray
    err: np.ndarray
    sigma3: np.ndarray
    truth: np.ndarray
    nav: np.ndarray
    gnss_residuals: ResidualSet
    los_residuals: ResidualSet
    gnss_loss_time: float
    first_los_time: float
    flags: list[tuple[float, str]]
    scenario: ScenarioConfig
    covariance_only: bool
    fiducials: FiducialField


# --------------------------------------------------------------------------
# scenario context shared by all runs
# --------------------------------------------------------------------------


@dataclass
class _RunContext:
    scenario: ScenarioConfig
    field: FiducialField
    spec: object
    camera: object
    gnss: object
    p0: np.ndarray
    dt_imu: float
    n_imu: int
    r_truth: int  # truth steps per IMU step (even)
    gnss_every: int
    los_every: int
    gnss_loss_time: float
    # truth-grid tables
    t_truth: np.ndarray
    p: np.ndarray
    v: np.ndarray
    q: np.ndarray
    nu_b: np.ndarray
    om_b: np.ndarray


def _build_context(sc: ScenarioConfig) -> _RunContext:
    sc.validate()
    ref = plan_trajectory(sc.build_plan())
    spec = sc.build_imu_spec()
    camera = sc.build_camera()
    gnss = sc.build_gnss()
    fid_cfg = sc.fiducials
    field_ = place_fiducials(ref, fid_cfg.spacing_m, fid_cfg.cross_track_offset_m)
    fl = sc.filter
    p0 = ekf.initial_covariance(
        spec,
        pos_sigma=fl.init_pos_sigma_m,
        vel_sigma=fl.init_vel_sigma_mps,
        att_sigma=np.deg2rad(fl.init_att_sigma_deg),
        mount_sigma=np.deg2rad(fl.init_mount_sigma_deg),
    )
    dt_imu = 1.0 / sc.imu.rate_hz
    n_imu = int(round(sc.trajectory.duration_s * sc.imu.rate_hz))
    r_truth = int(round(sc.sim.truth_rate_hz / sc.imu.rate_hz))
    dt_truth = dt_imu / r_truth
    n_truth = n_imu * r_truth
    t_truth = np.arange(n_truth + 1) * dt_truth
    return _RunContext(
        scenario=sc,
        field=field_,
        spec=spec,
        camera=camera,
        gnss=gnss,
        p0=p0,
        dt_imu=dt_imu,
        n_imu=n_imu,
        r_truth=r_truth,
        gnss_every=int(round(sc.imu.rate_hz / sc.gnss.rate_hz)),
        los_every=int(round(sc.imu.rate_hz / sc.camera.rate_hz)),
        gnss_loss_time=ref.gnss_loss_time(),
        t_truth=t_truth,
        p=ref.position(t_truth),
        v=ref.velocity(t_truth),
        q=ref.attitude(t_truth),
        nu_b=ref.specific_force(t_truth),
        om_b=ref.angular_rate(t_truth),
    )


class _ResidualBuffer:
    def __init__(self, width: int) -> None:
        self.width = width
        self.t: list[float] = []
        self.fid: list[int] = []
        self.value: list[np.ndarray] = []
        self.sigma3: list[np.ndarray] = []
        self.normalized: list[np.ndarray] = []
        self.accepted: list[bool] = []

    def add(self, t: float, fid: int, res: ekf.UpdateResult) -> None:
        sig = np.sqrt(np.diag(res.residual_cov))
        self.t.append(t)
        self.fid.append(fid)
        self.value.append(res.residual)
        self.sigma3.append(3.0 * sig)
        self.normalized.append(res.residual / sig)
        self.accepted.append(res.accepted)

    def freeze(self) -> ResidualSet:
        if not self.t:
            return ResidualSet.empty(self.width)
        return ResidualSet(
            t=np.array(self.t),
            fiducial_id=np.array(self.fid, dtype=int),
            value=np.array(self.value),
            sigma3=np.array(self.sigma3),
            normalized=np.array(self.normalized),
            accepted=np.array(self.accepted, dtype=bool),
        )


def _pack_truth(p, v, q, b_a, b_g) -> np.ndarray:
    return np.concatenate([p, v, q, b_a, b_g])


def _run_with_context(
    ctx: _RunContext,
    rng: np.random.Generator,
    covariance_only: bool,
    with_gnss: bool,
    with_los: bool,
    log_decimation: int,
) -> RunLog:
    sc = ctx.scenario
    spec = ctx.spec
    camera = ctx.camera
    gnss = ctx.gnss
    dt = ctx.dt_imu
    n_imu = ctx.n_imu
    r = ctx.r_truth
    n_truth = n_imu * r
    dt_truth = dt / r
    r_scale = sc.filter.r_scale

    # ---- per-run draws (fixed order for reproducibility) --------------------
    if covariance_only:
        dx0 = np.zeros(ekf.N_ERR)
        b_a0 = np.zeros(3)
        b_g0 = np.zeros(3)
        bias_w = None
        imu_noise = None
        gnss_noise = None
    else:
        dx0 = np.sqrt(np.diag(ctx.p0)) * rng.normal(0.0, 1.0, ekf.N_ERR)
        b_a0 = rng.normal(0.0, 1.0, 3) * spec.sigma_ss_accel
        b_g0 = rng.normal(0.0, 1.0, 3) * spec.sigma_ss_gyro
        bias_w = rng.normal(0.0, 1.0, (n_truth, 6))
        imu_noise = rng.normal(0.0, 1.0, (n_imu, 6))
        gnss_noise = rng.normal(0.0, 1.0, (max(n_imu // ctx.gnss_every, 1), 3))

    # ---- truth bias paths on the truth grid ---------------------------------
    b_a_path = np.zeros((n_truth + 1, 3))
    b_g_path = np.zeros((n_truth + 1, 3))
    b_a_path[0] = b_a0
    b_g_path[0] = b_g0
    if bias_w is not None:
        phi_a = np.exp(-dt_truth / spec.tau_accel)
        phi_g = np.exp(-dt_truth / spec.tau_gyro)
        w_a = spec.sigma_ss_accel * np.sqrt(1.0 - phi_a**2) * bias_w[:, 0:3]
        w_g = spec.sigma_ss_gyro * np.sqrt(1.0 - phi_g**2) * bias_w[:, 3:6]
        _ecrv_scan(b_a_path, phi_a, w_a)
        _ecrv_scan(b_g_path, phi_g, w_g)

    # ---- truth mount and initial states --------------------------------------
    q_cb_nominal = camera.q_cb.copy()
    if covariance_only:
        q_cb_true = q_cb_nominal.copy()
    else:
        q_cb_true = quat_mult(correction_quat(dx0[ekf.MOUNT]), q_cb_nominal)
        q_cb_true /= np.linalg.norm(q_cb_true)

    nav = ekf.NavState(
        p=ctx.p[0] - dx0[ekf.POS],
        v=ctx.v[0] - dx0[ekf.VEL],
        q_bn=quat_mult(quat_conj(correction_quat(dx0[ekf.ATT])), ctx.q[0]),
        b_a=b_a0 - dx0[ekf.BA],
        b_g=b_g0 - dx0[ekf.BG],
        q_cb=q_cb_nominal,
    )
    P = ctx.p0.copy()

    def truth_at(j: int) -> TruthState:
        return TruthState(
            p=ctx.p[j],
            v=ctx.v[j],
            q_bn=ctx.q[j],
            b_a=b_a_path[j],
            b_g=b_g_path[j],
            q_cb=q_cb_true,
        )

    # ---- IMU sample streams (interval midpoints of the truth grid) ----------
    mid = np.arange(n_imu) * r + r // 2
    nus = ctx.nu_b[mid] + b_a_path[mid]
    oms = ctx.om_b[mid] + b_g_path[mid]
    if imu_noise is not None:
        nus = nus + discrete_noise_sigma(spec.accel_noise_psd, dt) * imu_noise[:, 0:3]
        oms = oms + discrete_noise_sigma(spec.gyro_noise_psd, dt) * imu_noise[:, 3:6]
    nus = np.ascontiguousarray(nus)
    oms = np.ascontiguousarray(oms)

    # ---- schedule -------------------------------------------------------------
    dec = log_decimation if log_decimation > 0 else int(round(sc.sim.log_every_s * sc.imu.rate_hz))
    grids = [np.arange(dec, n_imu + 1, dec)]
    if with_gnss:
        grids.append(np.arange(ctx.gnss_every, n_imu + 1, ctx.gnss_every))
    if with_los:
        grids.append(np.arange(ctx.los_every, n_imu + 1, ctx.los_every))
    grids.append(np.array([n_imu]))
    event_steps = np.unique(np.concatenate(grids))

    n_logs = n_imu // dec + 1
    log_t = np.empty(n_logs)
    log_err = np.empty((n_logs, ekf.N_ERR))
    log_sig3 = np.empty((n_logs, ekf.N_ERR))
    log_truth = np.empty((n_logs, 16))
    log_nav = np.empty((n_logs, 16))
    flags: list[tuple[float, str]] = []
    gnss_buf = _ResidualBuffer(3)
    los_buf = _ResidualBuffer(2)
    first_los_time = np.nan

    def record_log(idx: int, t: float, j: int) -> None:
        truth = truth_at(j)
        log_t[idx] = t
        log_err[idx] = ekf.error_between(truth, nav)
        log_sig3[idx] = 3.0 * np.sqrt(np.maximum(np.diag(P), 0.0))
        log_truth[idx] = _pack_truth(truth.p, truth.v, truth.q_bn, truth.b_a, truth.b_g)
        log_nav[idx] = _pack_truth(nav.p, nav.v, nav.q_bn, nav.b_a, nav.b_g)
        try:
            ekf.check_covariance(P)
        except ekf.FilterNumericsError as exc:
            flags.append((t, str(exc)))

    record_log(0, 0.0, 0)
    prev = 0
    for s in event_steps:
        if s > prev:
            nav, P = ekf.propagate_batch(nav, P, nus[prev:s], oms[prev:s], dt, spec)
            prev = s
        t = s * dt
        j = s * r
        if with_gnss and s % ctx.gnss_every == 0:
            alt = -ctx.p[j, 2]
            if alt >= gnss.cutoff_altitude:
                z = ctx.p[j].copy()
                if gnss_noise is not None:
                    z = z + gnss.sigma * gnss_noise[s // ctx.gnss_every - 1]
                model = ekf.predict_gnss_measurement(nav, gnss)
                model.R = model.R * r_scale
                nav, P, res = ekf.update(nav, P, z, model)
                gnss_buf.add(t, -1, res)
                if not res.accepted:
                    flags.append((t, "gnss update skipped: ill-conditioned residual"))
        if with_los and s % ctx.los_every == 0:
            truth = truth_at(j)
            for fid in visible_fiducials(truth, ctx.field, camera):
                meas = los_measure(
                    truth, fid, ctx.field, camera,
                    rng=None if covariance_only else rng, t=t,
                )
                try:
                    model = ekf.predict_los_measurement(
                        nav, ctx.field.position_of(fid), camera
                    )
                except ValueError as exc:
                    flags.append((t, f"los update skipped: {exc}"))
                    continue
                model.R = model.R * r_scale
                nav, P, res = ekf.update(nav, P, meas.z, model)
                los_buf.add(t, fid, res)
                if res.accepted and np.isnan(first_los_time):
                    first_los_time = t
                if not res.accepted:
                    flags.append((t, "los update skipped: ill-conditioned residual"))
        if s % dec == 0:
            record_log(s // dec, t, j)

    return RunLog(
        t=log_t,
        err=log_err,
        sigma3=log_sig3,
        truth=log_truth,
        nav=log_nav,
        gnss_residuals=gnss_buf.freeze(),
        los_residuals=los_buf.freeze(),
        gnss_loss_time=ctx.gnss_loss_time,
        first_los_time=first_los_time,
        flags=flags,
        scenario=sc,
        covariance_only=covariance_only,
        fiducials=ctx.field,
    )


@njit(cache=True)
def _ecrv_scan(path: np.ndarray, phi: float, w: np.ndarray) -> None:
    """First-order recursion path[k+1] = phi*path[k] + w[k], row-wise."""
    for k in range(w.shape[0]):
        for j in range(w.shape[1]):
            path[k + 1, j] = phi * path[k, j] + w[k, j]


def run_single(cfg: RunConfig, covariance_only: bool = False) -> RunLog:
    """Simulate one run; same (scenario, seed) gives bit-identical logs."""
    ctx = _build_context(cfg.scenario)
    rng = np.random.default_rng(cfg.seed)
    return _run_with_context(
        ctx, rng, covariance_only, cfg.with_gnss, cfg.with_los, cfg.log_decimation
    )


# --------------------------------------------------------------------------
# ensemble statistics
# --------------------------------------------------------------------------


@dataclass
class ChannelStats:
    """Pooled normalized-residual statistics for one measurement channel."""

    name: str
    n: int
    mean: float
    std: float
    autocorr: np.ndarray  # lags 1..MAX_AUTOCORR_LAG
    band: float  # 95% whiteness band half-width, 2/sqrt(n)
    insufficient: bool

    @property
    def lags_inside_band(self) -> int:
        return int(np.sum(np.abs(self.autocorr) <= self.band))


@dataclass
class WhitenessReport:
    """Residual whiteness diagnostics across an ensemble of runs."""

    channels: list[ChannelStats]

    def channel(self, name: str) -> ChannelStats:
        for ch in self.channels:
            if ch.name == name:
                return ch
        raise KeyError(name)


@dataclass
class McSummary:
    """Ensemble aggregate: containment, residual statistics, growth checks."""

    n_runs: int
    n_time_samples: int
    containment: np.ndarray  # (18,) fraction of samples with |err| <= 3 sigma
    whiteness: WhitenessReport
    pooled_mean: dict[str, float]  # per measurement type
    pooled_n: dict[str, int]
    growth_checked: int  # runs with a nonempty cutoff->first-LOS window
    growth_monotone: int  # of those, runs with strictly increasing position 3-sigma
    first_los_times: np.ndarray
    gnss_loss_time: float
    flag_count: int
    seeds: list[int]


class _ChannelAccumulator:
    def __init__(self) -> None:
        self.n = 0
        self.sum = 0.0
        self.sum_sq = 0.0
        self.lag_num = np.zeros(MAX_AUTOCORR_LAG)
        self.lag_den = 0.0

    def add_series(self, x: np.ndarray) -> None:
        self.n += len(x)
        self.sum += float(np.sum(x))
        self.sum_sq += float(np.sum(x * x))
        self.lag_den += float(np.sum(x * x))
        for k in range(1, MAX_AUTOCORR_LAG + 1):
            if len(x) > k:
                self.lag_num[k - 1] += float(np.dot(x[:-k], x[k:]))

    def stats(self, name: str) -> ChannelStats:
        if self.n == 0:
            return ChannelStats(
                name, 0, np.nan, np.nan, np.full(MAX_AUTOCORR_LAG, np.nan), np.nan, True
            )
        mean = self.sum / self.n
        var = max(self.sum_sq / self.n - mean**2, 0.0)
        autocorr = (
            self.lag_num / self.lag_den
            if self.lag_den > 0
            else np.full(MAX_AUTOCORR_LAG, np.nan)
        )
        return ChannelStats(
            name=name,
            n=self.n,
            mean=mean,
            std=float(np.sqrt(var)),
            autocorr=autocorr,
            band=2.0 / np.sqrt(self.n),
            insufficient=self.n < MIN_CHANNEL_SAMPLES,
        )


def _channel_name(kind: str, comp: int) -> str:
    labels = {"gnss": ("n", "e", "d"), "los": ("x", "y")}
    return f"{kind}_{labels[kind][comp]}"


class _EnsembleAccumulator:
    def __init__(self) -> None:
        self.n_runs = 0
        self.n_samples = 0
        self.contained = np.zeros(ekf.N_ERR, dtype=np.int64)
        self.channels = {_channel_name(k, c): _ChannelAccumulator() for k, c in CHANNELS}
        self.growth_checked = 0
        self.growth_monotone = 0
        self.first_los: list[float] = []
        self.gnss_loss_time = np.nan
        self.flag_count = 0

    def add_run(self, log: RunLog) -> None:
        self.n_runs += 1
        self.n_samples += len(log.t)
        self.contained += np.sum(np.abs(log.err) <= log.sigma3, axis=0)
        for kind, buf in (("gnss", log.gnss_residuals), ("los", log.los_residuals)):
            ok = buf.accepted
            for comp in range(buf.normalized.shape[1] if len(buf.t) else 0):
                name = _channel_name(kind, comp)
                self.channels[name].add_series(buf.normalized[ok, comp])
        mono = _position_growth_monotone(log)
        if mono is not None:
            self.growth_checked += 1
            self.growth_monotone += int(mono)
        self.first_los.append(log.first_los_time)
        self.gnss_loss_time = log.gnss_loss_time
        self.flag_count += len(log.flags)

    def merge(self, other: "_EnsembleAccumulator") -> None:
        self.n_runs += other.n_runs
        self.n_samples += other.n_samples
        self.contained += other.contained
        for name, acc in other.channels.items():
            mine = self.channels[name]
            mine.n += acc.n
            mine.sum += acc.sum
            mine.sum_sq += acc.sum_sq
            mine.lag_num += acc.lag_num
            mine.lag_den += acc.lag_den
        self.growth_checked += other.growth_checked
        self.growth_monotone += other.growth_monotone
        self.first_los.extend(other.first_los)
        if not np.isnan(other.gnss_loss_time):
            self.gnss_loss_time = other.gnss_loss_time
        self.flag_count += other.flag_count

    def summary(self, seeds: list[int]) -> McSummary:
        whiteness = WhitenessReport(
            [acc.stats(name) for name, acc in self.channels.items()]
        )
        pooled_mean: dict[str, float] = {}
        pooled_n: dict[str, int] = {}
        for kind in ("gnss", "los"):
            accs = [a for n, a in self.channels.items() if n.startswith(kind)]
            n = sum(a.n for a in accs)
            pooled_n[kind] = n
            pooled_mean[kind] = (
                sum(a.sum for a in accs) / n if n > 0 else np.nan
            )
        return McSummary(
            n_runs=self.n_runs,
            n_time_samples=self.n_samples,
            containment=self.contained / max(self.n_samples, 1),
            whiteness=whiteness,
            pooled_mean=pooled_mean,
            pooled_n=pooled_n,
            growth_checked=self.growth_checked,
            growth_monotone=self.growth_monotone,
            first_los_times=np.array(self.first_los),
            gnss_loss_time=self.gnss_loss_time,
            flag_count=self.flag_count,
            seeds=seeds,
        )


def _position_growth_monotone(log: RunLog) -> bool | None:
    """Whether the position 3-sigma RSS strictly grows between GNSS loss and
    the first LOS update.  None when the window holds fewer than two samples."""
    if np.isnan(log.first_los_time):
        return None
    sel = (log.t > log.gnss_loss_time) & (log.t < log.first_los_time)
    if np.sum(sel) < 2:
        return None
    rss = np.sqrt(np.sum(log.sigma3[sel, 0:3] ** 2, axis=1))
    return bool(np.all(np.diff(rss) > 0.0))


def _spawned_rngs(seed, n_runs: int) -> list[np.random.SeedSequence]:
    base = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return base.spawn(n_runs)


def _mc_batch(args) -> tuple[list[int], "_EnsembleAccumulator"]:
    cfg, n_runs, indices = args
    ctx = _build_context(cfg.scenario)
    children = _spawned_rngs(cfg.seed, n_runs)
    acc = _EnsembleAccumulator()
    for i in indices:
        rng = np.random.default_rng(children[i])
        log = _run_with_context(
            ctx, rng, False, cfg.with_gnss, cfg.with_los, cfg.log_decimation
        )
        acc.add_run(log)
    return list(indices), acc


def run_monte_carlo(
    cfg: RunConfig, n_runs: int, n_workers: int | None = None
) -> McSummary:
    """Run an ensemble with independent per-run seeds and pooled statistics.

    Runs fan out to a process pool (``n_workers`` <= 1 runs serially); the
    merge is associative and applied in a fixed order, so results are
    independent of scheduling.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    if n_workers is None:
        n_workers = os.cpu_count() or 1
    n_workers = max(1, min(n_workers, n_runs))

    indices = np.arange(n_runs)
    if n_workers == 1:
        batches = [(cfg, n_runs, indices)]
        results = [_mc_batch(b) for b in batches]
    else:
        splits = np.array_split(indices, min(n_runs, 4 * n_workers))
        batches = [(cfg, n_runs, s) for s in splits if len(s)]
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_mc_batch, batches))
    results.sort(key=lambda pair: pair[0][0])

    total = _EnsembleAccumulator()
    for _, acc in results:
        total.merge(acc)
    return total.summary(seeds=list(range(n_runs)))


def residual_diagnostics(logs) -> WhitenessReport:
    """Whiteness diagnostics over one or more run logs.

    Pools normalized residuals per channel across runs (lag products never
    cross run boundaries) and reports mean, std, lag-1..20 autocorrelations
    with the 95% band, and an insufficient-samples flag below 30 samples.
    """
    acc = _EnsembleAccumulator()
    for log in logs:
        acc.add_run(log)
    return WhitenessReport([a.stats(name) for name, a in acc.channels.items()])
