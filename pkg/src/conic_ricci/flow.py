"""Time integration of the conformal Ricci flow in raw and log-rescaled time.

Raw mode integrates   d u / dt   = Delta_0 log u - R0,
rescaled mode         d u~/ dtau = Delta_0 log u~ - R0 - u~,

both by backward Euler with a damped chord-Newton solve in log u (see
_solvers).  Rescaled runs start at tau = 0 from u~ = u(., t=1) produced by an
internal raw warmup on [0, 1]: the rescaling divides by t and is only
meaningful from t = 1 on.

The truncation closure holds u at its initial boundary values in raw mode
(Dirichlet, equal to one for ungauged data); in rescaled mode the data decays
as exp(-tau), which is exactly the rescaling of the raw closure.  The
alternative "asymptotic-decay" mode extrapolates log u linearly in rho with
the end's decay rate, for perturbed-end studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import elliptic
from ._solvers import (CachedLinearSolve, LUCache, SolverError,
                       implicit_conformal_step)
from .surface import SurfaceModel, scalar_curvature, total_curvature


class FlowError(RuntimeError):
    """Fatal integration failure; carries the trajectory computed so far."""

    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory


@dataclass(frozen=True)
class ConformalState:
    """The evolving conformal factor at one time stamp.

    `time` is t in raw mode and tau = log t in rescaled mode; `u` holds u or
    u~ accordingly and is positive on all active nodes.
    """

    mode: str
    time: float
    u: np.ndarray
    step_count: int = 0
    last_dt: float = 0.0
    last_newton_iters: int = 0

    def __post_init__(self):
        if self.mode not in ("raw", "rescaled"):
            raise ValueError(f"unknown flow mode {self.mode!r}")


@dataclass
class FlowConfig:
    """Solver, truncation, tolerance and schedule parameters."""

    mode: str = "raw"
    dt_initial: float = 1e-3
    dt_max: float = 0.5
    safety_factor: float = 0.5
    newton_tol: float = 1e-9
    newton_max_iter: int = 10
    t_end: float = 50.0
    tau_end: float = 8.0
    snapshot_schedule: tuple | None = None
    boundary_mode: str = "dirichlet-one"
    track_potential: bool = False
    max_steps: int | None = None
    checkpoint_every: int = 25  # also the Jacobian-reuse reset window

    def __post_init__(self):
        if not (0.0 < self.safety_factor < 1.0):
            raise ValueError("safety_factor must lie in (0, 1)")
        for name in ("dt_initial", "dt_max", "newton_tol"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.mode == "rescaled" and not math.isfinite(self.tau_end):
            raise ValueError("tau_end must be finite")
        if self.boundary_mode not in ("dirichlet-one", "asymptotic-decay"):
            raise ValueError(f"unknown boundary_mode {self.boundary_mode!r}")

    @property
    def horizon(self):
        return self.t_end if self.mode == "raw" else self.tau_end


@dataclass(frozen=True)
class Snapshot:
    time: float
    u: np.ndarray
    f: np.ndarray | None = None


@dataclass
class Trajectory:
    """Ordered snapshots plus per-step time-series records of one run."""

    mode: str
    model: SurfaceModel
    config: FlowConfig
    snapshots: list = field(default_factory=list)
    series: dict = field(default_factory=dict)
    f0: np.ndarray | None = None
    flux_beta: np.ndarray | None = None
    status: str = "ok"
    error: str | None = None
    final_state: ConformalState | None = None
    final_potential: object | None = None

    @property
    def times(self):
        return np.array([s.time for s in self.snapshots])

    def series_array(self, name):
        return np.asarray(self.series[name])


def initial_state(model, mode="raw", u0=None, time=0.0):
    if u0 is None:
        u0 = np.ones(model.n_nodes)
    else:
        u0 = np.asarray(u0, dtype=float).copy()
    u0.setflags(write=False)
    return ConformalState(mode=mode, time=float(time), u=u0)


def _bc_log_trunc(model, state, dt, config):
    """Log of the Dirichlet data held on truncation rows for the new time."""
    iT = model.ops.idx_trunc
    cur = np.log(state.u[iT])
    if config.boundary_mode == "asymptotic-decay" and model.ops.trunc_inner is not None:
        # linear extrapolation of log u in rho at the end's decay rate
        alphas = model.alphas[model.ops.trunc_end]
        taus = np.array([e.order_tau for e in model.ends])[model.ops.trunc_end]
        hr = np.array([model.charts[j + 1].spacing[0]
                       for j in range(len(model.ends))])[model.ops.trunc_end]
        inner = np.log(state.u[model.ops.trunc_inner])
        cur = inner * np.exp(-alphas * taus * hr)
    if state.mode == "rescaled":
        cur = cur - dt
    return cur


def step_raw(model: SurfaceModel, state: ConformalState, dt,
             config: FlowConfig | None = None, _cache=None):
    """One backward-Euler step of the raw flow; returns the state at t + dt.

    Newton failures raise SolverError so the caller can halve dt and retry;
    positivity is structural (the solve runs in log u).
    """
    if state.mode != "raw":
        raise ValueError("step_raw needs a raw-mode state")
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    config = config or FlowConfig()
    u, iters = implicit_conformal_step(
        model, state.u, dt, rescaled=False,
        bc_log_trunc=_bc_log_trunc(model, state, dt, config),
        tol=config.newton_tol, max_iter=config.newton_max_iter, cache=_cache)
    u.setflags(write=False)
    return ConformalState(mode="raw", time=state.time + dt, u=u,
                          step_count=state.step_count + 1, last_dt=dt,
                          last_newton_iters=iters)


def step_rescaled(model: SurfaceModel, state: ConformalState, dtau,
                  config: FlowConfig | None = None, _cache=None):
    """One backward-Euler step of the rescaled flow (the -u~ term implicit)."""
    if state.mode != "rescaled":
        raise ValueError("step_rescaled needs a rescaled-mode state")
    if dtau <= 0.0:
        raise ValueError("dtau must be positive")
    config = config or FlowConfig(mode="rescaled")
    u, iters = implicit_conformal_step(
        model, state.u, dtau, rescaled=True,
        bc_log_trunc=_bc_log_trunc(model, state, dtau, config),
        tol=config.newton_tol, max_iter=config.newton_max_iter, cache=_cache)
    u.setflags(write=False)
    return ConformalState(mode="rescaled", time=state.time + dtau, u=u,
                          step_count=state.step_count + 1, last_dt=dtau,
                          last_newton_iters=iters)


def adaptive_dt(state: ConformalState, last_newton_iters, config: FlowConfig):
    """Next step size: grow 1.25x on easy Newton solves (<= 4 iterations),
    shrink by the safety factor after a retry, clamp to
    [dt_initial * 1e-4, dt_max].  Deterministic in its inputs."""
    dt = state.last_dt if state.last_dt > 0.0 else config.dt_initial
    if last_newton_iters <= 4:
        dt = dt * 1.25
    elif last_newton_iters > config.newton_max_iter:
        dt = dt * config.safety_factor
    return float(np.clip(dt, config.dt_initial * 1e-4, config.dt_max))


def default_schedule(mode, horizon):
    """Snapshot times: dense early coverage in raw mode for bound calibration,
    uniform quarter steps in rescaled time."""
    if mode == "rescaled":
        pts = list(np.arange(0.25, horizon + 1e-12, 0.25))
    else:
        early = [0.01, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.75]
        pts = [x for x in early if x < horizon]
        pts += list(np.arange(1.0, min(horizon, 10.0) + 1e-12, 1.0))
        if horizon > 10.0:
            pts += list(np.arange(12.5, horizon + 1e-12, 2.5))
    if not pts or pts[-1] < horizon - 1e-12:
        pts.append(horizon)
    return tuple(sorted(set(pts)))


def _step_once(model, state, dt, config, cache):
    if state.mode == "raw":
        return step_raw(model, state, dt, config, _cache=cache)
    return step_rescaled(model, state, dt, config, _cache=cache)


def run(model: SurfaceModel, config: FlowConfig, initial=None,
        on_step=None, _resume_potential=None) -> Trajectory:
    """Integrate to the configured horizon, emitting scheduled snapshots and
    per-step series records.

    Scheduled times falling inside a step are filled by linear interpolation
    in time.  Newton failures trigger dt halving; if dt hits its floor the
    run aborts with a FlowError carrying the partial trajectory.  `on_step`
    is called after every accepted step with (trajectory, state, potential).

    Stepping is reproducible across checkpoint resumes: the Jacobian-reuse
    window resets whenever step_count is a multiple of checkpoint_every, so
    a run continued from a step-aligned checkpoint retraces the unbroken
    iteration counts and step sizes exactly.
    """
    mode = config.mode
    horizon = config.horizon
    schedule = config.snapshot_schedule
    if schedule is None:
        schedule = default_schedule(mode, horizon)
    schedule = tuple(sorted(set(float(s) for s in schedule)))
    if schedule and (schedule[0] <= 0.0 or schedule[-1] > horizon + 1e-9):
        raise ValueError("snapshot schedule times must lie in (0, horizon]")

    if initial is None:
        if mode == "rescaled":
            initial = _rescaled_initial(model, config)
        else:
            initial = initial_state(model, "raw")
    if initial.mode != mode:
        raise ValueError("initial state mode does not match the config")

    traj = Trajectory(mode=mode, model=model, config=config)
    pot = None
    if _resume_potential is not None:
        pot = _resume_potential
        traj.f0 = pot.f0
        traj.flux_beta = pot.flux_beta
    elif config.track_potential and mode == "raw":
        pot = elliptic.initial_potential(
            model, None if initial.step_count == 0 and
            np.all(initial.u[model.active_mask] == 1.0) else initial.u)
        traj.f0 = pot.f0
        traj.flux_beta = pot.flux_beta

    cols = ["time", "min_u", "max_u", "min_R", "max_R", "total_curvature",
            "newton_iters", "dt"]
    if pot is not None:
        cols += ["max_h", "grad_norm_max"]
    traj.series = {c: [] for c in cols}

    def record(state, potential):
        pde = model.interior_mask | model.overlap_mask
        R = scalar_curvature(model, state.u)
        row = {
            "time": state.time,
            "min_u": float(np.min(state.u[model.active_mask])),
            "max_u": float(np.max(state.u[model.active_mask])),
            "min_R": float(np.min(R[pde])),
            "max_R": float(np.max(R[pde])),
            "total_curvature": total_curvature(model, state.u),
            "newton_iters": state.last_newton_iters,
            "dt": state.last_dt,
        }
        if potential is not None:
            row["max_h"] = float(np.max(potential.h[model.interior_mask]))
            row["grad_norm_max"] = potential.grad_norm_max
        for c in cols:
            traj.series[c].append(row[c])

    state = initial
    traj.snapshots.append(Snapshot(time=state.time, u=state.u,
                                   f=None if pot is None else pot.f))
    record(state, pot)
    pending = [s for s in schedule if s > state.time + 1e-12]

    cache = LUCache()
    heat_cache = CachedLinearSolve()
    if state.step_count > 0 and state.last_dt > 0.0:
        dt_next = adaptive_dt(state, state.last_newton_iters, config)
    else:
        dt_next = config.dt_initial
    dt_floor = config.dt_initial * 1e-4
    while state.time < horizon - 1e-12:
        if config.max_steps is not None and state.step_count >= config.max_steps:
            traj.status = "partial"
            break
        if state.step_count % config.checkpoint_every == 0:
            # step-aligned reset keeps resumed runs bit-identical
            cache.lu = None
            heat_cache.reset()
        dt = min(dt_next, horizon - state.time)
        prev = state
        prev_pot = pot
        while True:
            try:
                state = _step_once(model, prev, dt, config, cache)
                break
            except SolverError as err:
                dt = dt * config.safety_factor
                cache.lu = None
                if dt < dt_floor:
                    traj.status = "failed"
                    traj.error = f"step size collapsed at t={prev.time:.6g}: {err}"
                    traj.final_state = prev
                    raise FlowError(traj.error, traj) from err
        if pot is not None:
            pot = elliptic.evolve_potential(model, pot, state, dt,
                                            _cache=heat_cache)
        record(state, pot)

        while pending and pending[0] <= state.time + 1e-12:
            ts = pending.pop(0)
            lam = (ts - prev.time) / (state.time - prev.time)
            u_s = (1.0 - lam) * prev.u + lam * state.u
            f_s = None
            if pot is not None:
                f_s = (1.0 - lam) * prev_pot.f + lam * pot.f
            traj.snapshots.append(Snapshot(time=ts, u=u_s, f=f_s))

        if on_step is not None:
            on_step(traj, state, pot)
        if state.last_newton_iters > 4:
            cache.lu = None  # stale chord direction, refactor next step
        dt_next = adaptive_dt(state, state.last_newton_iters, config)

    traj.final_state = state
    traj.final_potential = pot
    return traj


def _rescaled_initial(model, config):
    """Raw warmup on [0, 1]; u~(tau=0) = u(t=1)."""
    warm_cfg = replace(config, mode="raw", t_end=1.0, track_potential=False,
                       snapshot_schedule=(1.0,), max_steps=None)
    warm = run(model, warm_cfg)
    u1 = warm.snapshots[-1].u
    if abs(warm.snapshots[-1].time - 1.0) > 1e-9:
        raise FlowError("raw warmup did not reach t = 1", warm)
    return ConformalState(mode="rescaled", time=0.0, u=u1)
