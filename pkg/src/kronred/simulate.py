"""Stochastic simulation: exact OU sampling, drift-implicit integrators,
ensemble statistics.

Noise enters every integrator as a piecewise-constant path of exactly
sampled Ornstein-Uhlenbeck values (one value per step), so the noise
statistics are exact at any step size and noise sampling is cleanly
separated from drift stepping.  The drift is advanced with a
theta-implicit step (theta = 0.5: trapezoid, the default; theta = 1:
backward Euler for very stiff timescale ratios).

Noise channels are always ordered slow buses first, then fast buses.
All models of the same grid draw their channels from the same layout,
so runs with equal seeds see identical underlying noise: the reduced
"xi" model combines eta_slow + K eta_fast, the naive model keeps only
eta_slow, the full models apply each bus its own channel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.signal import lfilter

from .errors import InputError, NumericsError
from .grid import (Grid, LinearizedSystem, OperatingPoint, assemble_linearized,
                   build_jacobian, solve_fixed_point)
from .reduction import ReducedSystem, reduce_grid

MODELS = ("full-nonlinear", "full-linear", "reduced-xi", "reduced-naive")


@dataclass(frozen=True)
class OUSpec:
    """Independent stationary OU channels: per-channel sigma, tau, one seed."""

    sigma: np.ndarray
    tau: np.ndarray
    seed: int

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "tau", tau)
        if sigma.shape != tau.shape:
            raise InputError(f"sigma shape {sigma.shape} != tau shape {tau.shape}")
        if np.any(sigma < 0):
            raise InputError("sigma must be >= 0")
        if np.any(tau <= 0):
            raise InputError("tau must be > 0")

    @property
    def n_channels(self) -> int:
        return len(self.sigma)


@dataclass(frozen=True)
class SimConfig:
    """Configuration of one simulation study."""

    model: str
    dt_max: float
    t_end: float
    burn_in: float
    ensemble_size: int = 1
    base_seed: int = 0
    epsilon: float = 1.0
    theta: float = 0.5

    def __post_init__(self):
        if self.model not in MODELS:
            raise InputError(f"unknown model {self.model!r}; choose from {MODELS}")
        if not self.dt_max > 0:
            raise InputError(f"dt_max must be > 0, got {self.dt_max}")
        if not 0 <= self.burn_in < self.t_end:
            raise InputError(f"need 0 <= burn_in < t_end, got {self.burn_in}, {self.t_end}")
        if self.ensemble_size < 1:
            raise InputError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        if self.base_seed < 0:
            raise InputError(f"base_seed must be >= 0, got {self.base_seed}")
        if self.theta not in (0.5, 1.0):
            raise InputError(f"theta must be 0.5 or 1.0, got {self.theta}")
        if not self.epsilon > 0:
            raise InputError(f"epsilon must be > 0, got {self.epsilon}")


@dataclass(frozen=True)
class Trajectory:
    """Sampled path: slow-bus deviations x, frequencies xdot; fast-bus
    y, ydot only for the full models."""

    t: np.ndarray
    x: np.ndarray
    xdot: np.ndarray
    y: np.ndarray | None = None
    ydot: np.ndarray | None = None


@dataclass(frozen=True)
class EnsembleStats:
    """Per-bus COI frequency statistics pooled over time and ensemble."""

    bus_ids: tuple[int, ...]
    mean: np.ndarray
    variance: np.ndarray
    stderr: np.ndarray
    n_samples: int


def make_time_grid(t_end: float, dt_max: float) -> np.ndarray:
    """Uniform grid covering [0, t_end] with step <= dt_max."""
    n = max(1, math.ceil(round(t_end / dt_max, 9)))
    return np.linspace(0.0, t_end, n + 1)


def default_dt_max(grid: Grid, epsilon: float) -> float:
    """Step bound: a tenth of the shortest noise correlation time, capped
    by the epsilon-scaled fast relaxation scale m/d."""
    tau_min = float(grid.param_vector("tau").min())
    bound = tau_min / 10.0
    fast = [b for b in grid.buses if b.speed_class == "fast"]
    if fast:
        relax = min(b.m / b.d for b in fast)
        bound = min(bound, epsilon * relax)
    return bound


def default_burn_in(grid: Grid) -> float:
    """Ten times the slowest relaxation scale, so measurements start
    from (near-)stationarity."""
    tau_max = float(grid.param_vector("tau").max())
    relax = max(b.m / b.d for b in grid.buses)
    return 10.0 * max(tau_max, relax)


# ---------------------------------------------------------------------------
# OU sampling
# ---------------------------------------------------------------------------

def ou_sample_path(spec: OUSpec, t_grid: np.ndarray) -> np.ndarray:
    """Exact stationary OU samples at every grid point, shape (len(t), C).

    Per channel: eta_{k+1} = a eta_k + sigma sqrt(1-a^2) z_k with
    a = exp(-dt/tau), starting from a stationary draw N(0, sigma^2).
    The draw order (initial state first, then all step innovations) is
    fixed, so a given seed always yields the same path.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    dts = np.diff(t_grid)
    if len(dts) == 0:
        raise InputError("time grid needs at least two points")
    dt = dts[0]
    if not np.allclose(dts, dt, rtol=1e-9, atol=0.0) or dt <= 0:
        raise InputError("time grid must be uniform and increasing")

    n_steps = len(dts)
    c = spec.n_channels
    rng = np.random.default_rng(np.uint64(spec.seed))
    eta0 = spec.sigma * rng.standard_normal(c)
    z = rng.standard_normal((n_steps, c))

    path = np.empty((n_steps + 1, c))
    path[0] = eta0
    for j in range(c):
        a = math.exp(-dt / spec.tau[j])
        b = spec.sigma[j] * math.sqrt(1.0 - a * a)
        path[1:, j], _ = lfilter([b], [1.0, -a], z[:, j], zi=[a * eta0[j]])
    return path


def ou_spec_for_grid(grid: Grid, seed: int) -> OUSpec:
    """OU channels for all buses, slow-then-fast ordering."""
    order = grid.ordering()
    return OUSpec(sigma=grid.param_vector("sigma")[order],
                  tau=grid.param_vector("tau")[order], seed=seed)


def ou_spec_for_reduced(red: ReducedSystem, seed: int) -> OUSpec:
    return OUSpec(sigma=np.concatenate([red.sigma_slow, red.sigma_fast]),
                  tau=np.concatenate([red.tau_slow, red.tau_fast]), seed=seed)


def _noise_values(noise, t_grid: np.ndarray, n_channels: int) -> np.ndarray:
    """Per-step noise values from an OUSpec or a prebuilt array."""
    if isinstance(noise, OUSpec):
        if noise.n_channels != n_channels:
            raise InputError(f"noise spec has {noise.n_channels} channels, need {n_channels}")
        return ou_sample_path(noise, t_grid)[:-1]
    arr = np.asarray(noise, dtype=float)
    n_steps = len(t_grid) - 1
    if arr.ndim != 2 or arr.shape[1] != n_channels or arr.shape[0] < n_steps:
        raise InputError(
            f"noise array must be (>= {n_steps}, {n_channels}), got {arr.shape}")
    return arr[:n_steps]


# ---------------------------------------------------------------------------
# Drift-implicit linear stepping
# ---------------------------------------------------------------------------

def _linear_step_maps(a: np.ndarray, b: np.ndarray, dt: float, theta: float):
    """One-step maps for X' = A X + B eta with eta constant per step:
    X_{k+1} = S X_k + G eta_k, from the factored implicit matrix."""
    n = a.shape[0]
    try:
        factor = lu_factor(np.eye(n) - theta * dt * a)
        step = lu_solve(factor, np.eye(n) + (1.0 - theta) * dt * a)
        gain = lu_solve(factor, dt * b)
    except (np.linalg.LinAlgError, ValueError) as e:
        raise NumericsError(f"singular implicit-step matrix at dt={dt}") from e
    if not (np.all(np.isfinite(step)) and np.all(np.isfinite(gain))):
        raise NumericsError(f"singular implicit-step matrix at dt={dt}")
    return step, gain


def _run_linear(a, b, noise_vals, t_grid, theta, n_record):
    """Integrate the LTI system and record the first n_record state pairs.

    State layout: positions first, velocities second, each of size
    a.shape[0] // 2; records columns [:n_record] of both halves.
    """
    dt = t_grid[1] - t_grid[0]
    step, gain = _linear_step_maps(a, b, dt, theta)
    dim = a.shape[0]
    half = dim // 2
    n_steps = len(t_grid) - 1
    forced = noise_vals @ gain.T  # per-step forcing contribution, precomputed
    pos = np.zeros((n_steps + 1, n_record))
    vel = np.zeros((n_steps + 1, n_record))
    state = np.zeros(dim)
    for k in range(n_steps):
        state = step @ state + forced[k]
        pos[k + 1] = state[:n_record]
        vel[k + 1] = state[half:half + n_record]
    return pos, vel


def _full_linear_matrices(sys: LinearizedSystem):
    n_s, n_f = sys.n_slow, sys.n_fast
    n = n_s + n_f
    jac = np.block([[sys.j_ss, sys.j_sf], [sys.j_fs, sys.j_ff]])
    m_eff = np.concatenate([sys.m_slow, sys.epsilon * sys.m_fast])
    d_eff = np.concatenate([sys.d_slow, sys.epsilon * sys.d_fast])
    a = np.zeros((2 * n, 2 * n))
    a[:n, n:] = np.eye(n)
    a[n:, :n] = jac / m_eff[:, None]
    a[n:, n:] = -np.diag(d_eff / m_eff)
    b = np.zeros((2 * n, n))
    b[n:, :] = np.diag(1.0 / m_eff)
    return a, b


def integrate_full_linear(sys: LinearizedSystem, cfg: SimConfig, noise) -> Trajectory:
    """Drift-implicit integration of the full linearized two-timescale system.

    ``noise`` is an OUSpec or a per-step value array over all buses
    (slow then fast).  Returns slow x, xdot and fast y, ydot.
    """
    n = sys.n_slow + sys.n_fast
    t_grid = make_time_grid(cfg.t_end, cfg.dt_max)
    noise_vals = _noise_values(noise, t_grid, n)
    sys_eps = sys if sys.epsilon == cfg.epsilon else replace(sys, epsilon=cfg.epsilon)
    a, b = _full_linear_matrices(sys_eps)
    pos, vel = _run_linear(a, b, noise_vals, t_grid, cfg.theta, n)
    n_s = sys.n_slow
    return Trajectory(t=t_grid, x=pos[:, :n_s], xdot=vel[:, :n_s],
                      y=pos[:, n_s:], ydot=vel[:, n_s:])


def integrate_reduced(red: ReducedSystem, cfg: SimConfig, noise, mode: str | None = None) -> Trajectory:
    """Drift-implicit integration of the Kron-reduced slow dynamics.

    mode "xi" drives the system with eta_slow + K eta_fast (all
    channels sampled and mapped each step); mode "naive" keeps only
    eta_slow.  Defaults to the mode implied by cfg.model.
    """
    if mode is None:
        mode = {"reduced-xi": "xi", "reduced-naive": "naive"}.get(cfg.model, "xi")
    if mode not in ("xi", "naive"):
        raise InputError(f"mode must be 'xi' or 'naive', got {mode!r}")
    n_s, n_f = red.n_slow, red.n_fast
    t_grid = make_time_grid(cfg.t_end, cfg.dt_max)
    noise_vals = _noise_values(noise, t_grid, n_s + n_f)

    a = np.zeros((2 * n_s, 2 * n_s))
    a[:n_s, n_s:] = np.eye(n_s)
    a[n_s:, :n_s] = red.j_red / red.m_slow[:, None]
    a[n_s:, n_s:] = -np.diag(red.d_slow / red.m_slow)
    select = np.zeros((n_s, n_s + n_f))
    select[:, :n_s] = np.eye(n_s)
    if mode == "xi" and n_f:
        select[:, n_s:] = red.noise_gain
    b = np.zeros((2 * n_s, n_s + n_f))
    b[n_s:, :] = select / red.m_slow[:, None]

    pos, vel = _run_linear(a, b, noise_vals, t_grid, cfg.theta, n_s)
    return Trajectory(t=t_grid, x=pos, xdot=vel)


# ---------------------------------------------------------------------------
# Full nonlinear model
# ---------------------------------------------------------------------------

def integrate_full_nonlinear(
    grid: Grid,
    op: OperatingPoint,
    cfg: SimConfig,
    noise,
    x0: np.ndarray | None = None,
    v0: np.ndarray | None = None,
) -> Trajectory:
    """Drift-implicit integration of the nonlinear structure-preserving model.

    Each step solves the theta-implicit equation with Newton iteration
    (tolerance 1e-10 on the step residual, warm-started from an explicit
    predictor).  Fast buses use epsilon-scaled inertia and damping.
    ``x0``/``v0`` are optional initial angle deviations from the
    operating point and initial frequencies, in slow-then-fast order
    (default: start at the operating point at rest).  A deviation beyond
    pi from the operating point, measured in the COI frame (the uniform
    angle component is gauge and performs a random walk under noise), is
    flagged as divergence.
    """
    order = grid.ordering()
    n = grid.n_buses
    n_s = len(grid.slow_ids)
    t_grid = make_time_grid(cfg.t_end, cfg.dt_max)
    noise_vals = _noise_values(noise, t_grid, n)
    dt = t_grid[1] - t_grid[0]
    theta_w = cfg.theta

    coupling = grid.coupling_matrix()[np.ix_(order, order)]
    p_inj = grid.param_vector("p")[order]
    m = grid.param_vector("m")[order]
    d = grid.param_vector("d")[order]
    eps_scale = np.ones(n)
    eps_scale[n_s:] = cfg.epsilon
    m_eff = m * eps_scale
    d_eff = d * eps_scale
    theta_star = np.asarray(op.theta, dtype=float)[order]

    def drift(state):
        ang, omega = state[:n], state[n:]
        sin_diff = np.sin(ang[:, None] - ang[None, :])
        flow = (coupling * sin_diff).sum(axis=1)
        return np.concatenate([omega, (p_inj - flow - d_eff * omega) / m_eff])

    def drift_jacobian(state):
        ang = state[:n]
        cos_w = coupling * np.cos(ang[:, None] - ang[None, :])
        np.fill_diagonal(cos_w, 0.0)
        jac_ang = cos_w - np.diag(cos_w.sum(axis=1))
        full = np.zeros((2 * n, 2 * n))
        full[:n, n:] = np.eye(n)
        full[n:, :n] = jac_ang / m_eff[:, None]
        full[n:, n:] = -np.diag(d_eff / m_eff)
        return full

    n_steps = len(t_grid) - 1
    x = np.zeros((n_steps + 1, n_s))
    xdot = np.zeros((n_steps + 1, n_s))
    y = np.zeros((n_steps + 1, n - n_s))
    ydot = np.zeros((n_steps + 1, n - n_s))
    dev0 = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
    omega0 = np.zeros(n) if v0 is None else np.asarray(v0, dtype=float)
    if dev0.shape != (n,) or omega0.shape != (n,):
        raise InputError(f"initial condition must have shape ({n},)")
    state = np.concatenate([theta_star + dev0, omega0])
    x[0] = dev0[:n_s]
    xdot[0] = omega0[:n_s]
    y[0] = dev0[n_s:]
    ydot[0] = omega0[n_s:]

    eye = np.eye(2 * n)
    for k in range(n_steps):
        forcing = np.concatenate([np.zeros(n), noise_vals[k] / m_eff])
        f0 = drift(state)
        base = state + dt * (1.0 - theta_w) * f0 + dt * forcing
        trial = state + dt * (f0 + forcing)  # explicit predictor
        converged = False
        for _ in range(30):
            residual = trial - base - dt * theta_w * drift(trial)
            if np.abs(residual).max() <= 1e-10:
                converged = True
                break
            jac = eye - dt * theta_w * drift_jacobian(trial)
            try:
                trial = trial - np.linalg.solve(jac, residual)
            except np.linalg.LinAlgError as e:
                raise NumericsError(f"implicit step solve failed at t={t_grid[k]:.4g}") from e
        if not converged:
            raise NumericsError(
                f"Newton did not converge at t={t_grid[k]:.4g}; reduce dt_max")
        state = trial
        dev = state[:n] - theta_star
        if np.abs(dev - dev.mean()).max() > math.pi:
            raise NumericsError(
                f"divergence detected at t={t_grid[k + 1]:.4g}: |COI-frame deviation| > pi")
        x[k + 1] = dev[:n_s]
        xdot[k + 1] = state[n:n + n_s]
        y[k + 1] = dev[n_s:]
        ydot[k + 1] = state[n + n_s:]
    return Trajectory(t=t_grid, x=x, xdot=xdot, y=y, ydot=ydot)


# ---------------------------------------------------------------------------
# Ensemble statistics
# ---------------------------------------------------------------------------

def coi_frequency_variance_estimate(
    trajs: list[Trajectory],
    burn_in: float,
    bus_ids: tuple[int, ...] | None = None,
    n_batches: int = 16,
) -> EnsembleStats:
    """Per-bus variance of the COI frequency deviation.

    At every post-burn-in sample the slow-bus mean frequency is
    subtracted; squares are averaged over time and ensemble.  The
    standard error comes from batch means (n_batches contiguous time
    batches per trajectory, pooled over the ensemble).
    """
    if not trajs:
        raise InputError("no trajectories given")
    t = trajs[0].t
    n_s = trajs[0].xdot.shape[1]
    for tr in trajs[1:]:
        if tr.xdot.shape != trajs[0].xdot.shape or not np.array_equal(tr.t, t):
            raise InputError("trajectories do not share grid and bus ordering")
    keep = t >= burn_in
    if not keep.any():
        raise InputError(f"no samples after burn_in={burn_in}")
    if bus_ids is None:
        bus_ids = tuple(range(n_s))

    sq_sum = np.zeros(n_s)
    dev_sum = np.zeros(n_s)
    batch_means = []
    n_time = int(keep.sum())
    for tr in trajs:
        xdot = tr.xdot[keep]
        dev = xdot - xdot.mean(axis=1, keepdims=True)
        sq = dev**2
        sq_sum += sq.sum(axis=0)
        dev_sum += dev.sum(axis=0)
        for chunk in np.array_split(sq, min(n_batches, n_time), axis=0):
            if len(chunk):
                batch_means.append(chunk.mean(axis=0))
    n_total = n_time * len(trajs)
    variance = sq_sum / n_total
    mean = dev_sum / n_total
    batch_means = np.array(batch_means)
    if len(batch_means) > 1:
        stderr = batch_means.std(axis=0, ddof=1) / math.sqrt(len(batch_means))
    else:
        stderr = np.full(n_s, np.nan)
    return EnsembleStats(bus_ids=tuple(bus_ids), mean=mean, variance=variance,
                         stderr=stderr, n_samples=n_total)


def ensemble_run(builder, cfg: SimConfig, bus_ids: tuple[int, ...] | None = None) -> EnsembleStats:
    """Run cfg.ensemble_size trajectories and pool their COI statistics.

    ``builder(seed)`` must return a Trajectory; trajectory i gets seed
    base_seed XOR i, so results are independent of execution order and
    bit-reproducible for a fixed base seed.
    """
    trajs = []
    for idx in range(cfg.ensemble_size):
        seed = int(np.uint64(cfg.base_seed) ^ np.uint64(idx))
        try:
            trajs.append(builder(seed))
        except Exception as e:
            raise NumericsError(f"trajectory {idx} (seed {seed}) failed: {e}") from e
    return coi_frequency_variance_estimate(trajs, cfg.burn_in, bus_ids=bus_ids)


# ---------------------------------------------------------------------------
# Model dispatch
# ---------------------------------------------------------------------------

def make_builder(grid: Grid, cfg: SimConfig):
    """Trajectory builder for cfg.model, plus the slow bus ids.

    Solves the fixed point and assembles whatever the model needs once;
    the returned closure only samples noise and integrates.
    """
    op = solve_fixed_point(grid)
    jac = build_jacobian(grid, op)
    sys = assemble_linearized(grid, jac, cfg.epsilon)
    bus_ids = sys.slow_ids
    if cfg.model == "full-nonlinear":
        def builder(seed):
            return integrate_full_nonlinear(grid, op, cfg, ou_spec_for_grid(grid, seed))
    elif cfg.model == "full-linear":
        def builder(seed):
            return integrate_full_linear(sys, cfg, ou_spec_for_grid(grid, seed))
    else:
        red = reduce_grid(grid, sys)
        mode = "xi" if cfg.model == "reduced-xi" else "naive"
        def builder(seed):
            return integrate_reduced(red, cfg, ou_spec_for_reduced(red, seed), mode=mode)
    return builder, bus_ids


def run_model_ensemble(grid: Grid, cfg: SimConfig) -> EnsembleStats:
    """End-to-end ensemble study of one model on one grid."""
    builder, bus_ids = make_builder(grid, cfg)
    return ensemble_run(builder, cfg, bus_ids=bus_ids)


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------

def trajectory_csv(traj: Trajectory, bus_ids: tuple[int, ...], decimate: int = 1) -> str:
    """CSV with t, then x_<id> and xdot_<id> per slow bus."""
    if decimate < 1:
        raise InputError(f"decimate must be >= 1, got {decimate}")
    header = ["t"] + [f"x_{i}" for i in bus_ids] + [f"xdot_{i}" for i in bus_ids]
    lines = [",".join(header)]
    for k in range(0, len(traj.t), decimate):
        row = [repr(float(traj.t[k]))]
        row += [repr(float(v)) for v in traj.x[k]]
        row += [repr(float(v)) for v in traj.xdot[k]]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def stats_csv(stats: EnsembleStats) -> str:
    """CSV with bus_id, var_coi, stderr, n_samples."""
    lines = ["bus_id,var_coi,stderr,n_samples"]
    for k, bid in enumerate(stats.bus_ids):
        lines.append(f"{bid},{float(stats.variance[k])!r},{float(stats.stderr[k])!r},{stats.n_samples}")
    return "\n".join(lines) + "\n"
