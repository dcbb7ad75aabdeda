"""Experiment orchestration: build, run, checkpoint, resume, diagnose.

Subcommands:

  conic-ricci run <config>      run an experiment end to end
  conic-ricci resume <dir>      continue from the latest checkpoint
  conic-ricci check <dir>       re-run diagnostics on stored snapshots
  conic-ricci oracle <config>   uniformizer solve only

Exit status is 0 iff every requested check passes, 1 on check failures, 2 on
runtime errors (partial artifacts are kept, MANIFEST carries their status).
Worker threads are capped by --threads or CONIC_RICCI_THREADS (exported to
the BLAS thread pools before numerical modules load).
"""

from __future__ import annotations

import argparse
import os
import sys

SERIES_COLUMNS = ("time", "min_u", "max_u", "min_R", "max_R",
                  "total_curvature", "newton_iters")
EXTRA_COLUMNS = ("dt", "max_h", "grad_norm_max")


def _fmt_cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _csv_row(values):
    out = []
    for v in values:
        s = _fmt_cell(v)
        if any(ch in s for ch in ',"\n'):
            s = '"' + s.replace('"', '""') + '"'
        out.append(s)
    return ",".join(out) + "\r\n"


class RunWriter:
    """Streams series rows, snapshots and checkpoints into a run directory."""

    def __init__(self, directory, cfg, base_step=0, append=False):
        import numpy as np  # noqa: F401  (heavy deps loaded lazily)
        self.directory = directory
        self.cfg = cfg
        self.base_step = base_step
        self.rows_emitted = 0
        self.snaps_emitted = 0
        self.skip_initial = append
        mode = "a" if append else "w"
        self.series_path = os.path.join(directory, "series.csv")
        self.extra_path = os.path.join(directory, "extra.csv")
        self.series_fh = open(self.series_path, mode, newline="")
        self.extra_fh = open(self.extra_path, mode, newline="")
        if not append:
            self.series_fh.write(_csv_row(SERIES_COLUMNS))
            self.extra_fh.write(_csv_row(("time",) + EXTRA_COLUMNS))

    def on_step(self, traj, state, pot):
        nrows = len(traj.series["time"])
        while self.rows_emitted < nrows:
            i = self.rows_emitted
            step = self.base_step + i
            if (not (self.skip_initial and i == 0)) \
                    and step % self.cfg.csv_cadence == 0:
                self.series_fh.write(_csv_row(
                    [traj.series[c][i] for c in SERIES_COLUMNS]))
                extra = [traj.series["time"][i], traj.series["dt"][i]]
                for c in ("max_h", "grad_norm_max"):
                    extra.append(traj.series[c][i] if c in traj.series
                                 else float("nan"))
                self.extra_fh.write(_csv_row(extra))
            self.rows_emitted += 1
        self.series_fh.flush()
        self.extra_fh.flush()
        while self.snaps_emitted < len(traj.snapshots):
            snap = traj.snapshots[self.snaps_emitted]
            if not (self.skip_initial and self.snaps_emitted == 0):
                self._write_snapshot(traj, snap)
            self.snaps_emitted += 1
        if state.step_count % self.cfg.checkpoint_every == 0:
            self.checkpoint(traj, state, pot)

    def _snap_name(self, snap):
        return f"snap_{snap.time:012.6f}"

    def _write_snapshot(self, traj, snap):
        from . import snapshots as snaps
        name = self._snap_name(snap)
        arrays = {"u": snap.u}
        if snap.f is not None:
            arrays["f"] = snap.f
        snaps.write_arrays(os.path.join(self.directory, name + ".cric"), arrays)
        snaps.write_meta(os.path.join(self.directory, name + ".meta"),
                         {"kind": "snapshot", "mode": traj.mode,
                          "time": float(snap.time)})

    def checkpoint(self, traj, state, pot):
        from . import snapshots as snaps
        arrays = {"u": state.u}
        if pot is not None:
            arrays["f"] = pot.f
        snaps.write_arrays(os.path.join(self.directory, "chk.cric"), arrays)
        snaps.write_meta(os.path.join(self.directory, "chk.meta"), {
            "kind": "checkpoint", "mode": state.mode,
            "time": float(state.time), "step_count": int(state.step_count),
            "last_dt": float(state.last_dt),
            "last_newton_iters": int(state.last_newton_iters),
        })

    def close(self):
        self.series_fh.close()
        self.extra_fh.close()


def _model_spec(cfg):
    from .surface import ModelSpec
    xy = None
    if cfg.punctures_xy:
        xy = [tuple(cfg.punctures_xy[2 * i: 2 * i + 2])
              for i in range(len(cfg.punctures_xy) // 2)]
    return ModelSpec(punctures=cfg.punctures, angles=tuple(cfg.angles),
                     resolution=cfg.resolution,
                     rho_max=cfg.rho_max if cfg.rho_max > 0 else None,
                     perturbation_amp=cfg.perturbation_amp,
                     perturbation_order=cfg.perturbation_order,
                     puncture_xy=xy)


def _flow_config(cfg):
    from .flow import FlowConfig
    schedule = None
    if cfg.snapshot_times:
        schedule = tuple(float(t) for t in cfg.snapshot_times)
    elif cfg.snapshot_dt > 0:
        import numpy as np
        horizon = cfg.t_end if cfg.mode == "raw" else cfg.tau_end
        schedule = tuple(np.arange(cfg.snapshot_dt, horizon + 1e-12,
                                   cfg.snapshot_dt))
    return FlowConfig(mode=cfg.mode, dt_initial=cfg.dt_initial,
                      dt_max=cfg.dt_max, safety_factor=cfg.safety_factor,
                      newton_tol=cfg.newton_tol,
                      newton_max_iter=cfg.newton_max_iter, t_end=cfg.t_end,
                      tau_end=cfg.tau_end, snapshot_schedule=schedule,
                      boundary_mode=cfg.boundary_mode,
                      track_potential=cfg.track_potential,
                      max_steps=cfg.max_steps or None,
                      checkpoint_every=cfg.checkpoint_every)


def _write_report(directory, report):
    path = os.path.join(directory, "report.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.to_text())
    sdir = os.path.join(directory, "series")
    os.makedirs(sdir, exist_ok=True)
    written = ["report.txt"]
    for name, (header, rows) in report.series.items():
        spath = os.path.join(sdir, name + ".csv")
        with open(spath, "w", newline="") as fh:
            fh.write(_csv_row(header))
            for row in rows:
                fh.write(_csv_row(row))
        written.append(os.path.join("series", name + ".csv"))
    return written


def _oracle_path(directory):
    return os.path.join(directory, "oracle.cric")


def _ensure_oracle(model, directory, tol=1e-8):
    from . import snapshots as snaps
    from .elliptic import uniformize_oracle
    path = _oracle_path(directory)
    if os.path.exists(path):
        return snaps.read_arrays(path)["U"]
    U = uniformize_oracle(model, tol=tol)
    snaps.write_arrays(path, {"U": U})
    return U


def run_diagnostics(model, traj, cfg, directory):
    """Execute the configured checks against a (possibly reloaded) trajectory."""
    import numpy as np
    from . import diagnostics as diag
    from .config import active_checks

    report = diag.DiagnosticsReport()
    names = active_checks(cfg)
    rho_core = min(cfg.core_rho,
                   0.5 * float(min(e.rho_max for e in model.ends)))

    def skip(name, why):
        report.add(diag.CheckResult(name, "info", float("nan"), None, 0.0,
                                    f"skipped: {why}"))

    for name in names:
        if name == "bounds":
            if traj.mode == "raw" and traj.times[-1] >= 10.0:
                report.merge(diag.check_bounds(traj, rho_core))
            else:
                skip("linear_bounds", "needs a raw run with t_end >= 10")
        elif name == "aronson_benilan":
            if traj.mode == "raw":
                report.merge(diag.check_aronson_benilan(traj))
            else:
                skip("aronson_benilan", "raw mode only")
        elif name == "conservation":
            if traj.mode == "raw":
                report.merge(diag.check_sign_and_conservation(
                    traj, gauged=cfg.gauge,
                    conservation_tol=cfg.conservation_tol))
            else:
                skip("curvature_conservation", "raw mode only")
        elif name == "potential_identity":
            if traj.f0 is not None:
                report.merge(diag.check_potential_identity(traj))
            else:
                skip("potential_identity", "potential tracking disabled")
        elif name == "decay":
            report.merge(diag.check_curvature_decay(traj))
        elif name == "monotonicity":
            if traj.mode == "rescaled":
                report.merge(diag.check_rescaled_monotonicity(traj))
            else:
                skip("rescaled_monotonicity", "rescaled mode only")
        elif name == "harnack":
            if traj.mode == "rescaled":
                report.merge(diag.check_harnack(
                    traj, n_pairs=cfg.harnack_pairs, seed=cfg.seed))
            else:
                skip("harnack_calibration", "rescaled mode only")
        elif name == "convergence":
            if traj.mode == "rescaled" and traj.times[-1] >= 8.0 - 1e-9:
                U = _ensure_oracle(model, directory)
                report.merge(diag.check_convergence(
                    traj, U, rho_core=rho_core, e_tol=cfg.e_tol,
                    c_tol=cfg.c_tol, seed=cfg.seed))
            else:
                skip("uniformizer_convergence_u",
                     "needs a rescaled run with tau_end >= 8")
        elif name == "end_flux":
            report.merge(diag.end_flux_series(traj))
    if cfg.inject_fault:
        report.add(diag.CheckResult("injected_fault", "fail", np.inf, None,
                                    0.0, "deliberate failure for fault-path "
                                    "tests"))
    return report


def _finalize(directory, manifest_status, extra_files=()):
    from .snapshots import Manifest
    man = Manifest(directory)
    for name in sorted(os.listdir(directory)):
        path = os.path.join(directory, name)
        if name == Manifest.NAME:
            continue
        if os.path.isfile(path):
            man.record(name)
        elif os.path.isdir(path):
            for sub in sorted(os.listdir(path)):
                man.record(os.path.join(name, sub))
    man.status = manifest_status
    man.write()


def run_experiment(cfg, directory=None) -> int:
    """Build the model, run the flow, persist artifacts, run diagnostics.

    Returns the process exit status: 0 iff all requested checks pass.
    Partial outputs are retained with a MANIFEST marking completeness.
    """
    import numpy as np
    from . import snapshots as snaps
    from .config import ExperimentConfig, serialize_config
    from .elliptic import gauge_nonpositive, initial_potential
    from .flow import FlowError, initial_state, run
    from .surface import build_model

    assert isinstance(cfg, ExperimentConfig)
    directory = directory or cfg.directory
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "config.toml"), "w",
              encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))

    model = build_model(_model_spec(cfg))
    snaps.save_model(os.path.join(directory, "model.cric"), model)
    fcfg = _flow_config(cfg)

    initial = None
    if cfg.gauge:
        psi = gauge_nonpositive(model)
        initial = initial_state(model, "raw", u0=np.exp(2.0 * psi))

    writer = RunWriter(directory, cfg)
    try:
        traj = run(model, fcfg, initial=initial, on_step=writer.on_step)
    except FlowError as err:
        writer.close()
        _finalize(directory, "failed")
        print(f"flow failed: {err}", file=sys.stderr)
        return 2
    if traj.f0 is not None:
        snaps.write_arrays(os.path.join(directory, "potential0.cric"),
                           {"f0": traj.f0, "flux_beta": traj.flux_beta})
    if traj.status != "partial":
        writer.checkpoint(traj, traj.final_state, traj.final_potential)
    writer.close()

    if traj.status == "partial":
        _finalize(directory, "partial")
        print("run stopped at the step limit; resume to continue")
        return 0

    report = run_diagnostics(model, traj, cfg, directory)
    _write_report(directory, report)
    _finalize(directory, "complete")
    print(report.to_text(), end="")
    return 0 if report.passed() else 1


def load_run(directory):
    """Rebuild (model, trajectory, config) from a run directory."""
    import numpy as np
    from . import snapshots as snaps
    from .config import parse_config_file
    from .flow import Snapshot, Trajectory

    cfg = parse_config_file(os.path.join(directory, "config.toml"))
    model = snaps.load_model(os.path.join(directory, "model.cric"))
    fcfg = _flow_config(cfg)
    traj = Trajectory(mode=cfg.mode, model=model, config=fcfg)
    entries = []
    for name in sorted(os.listdir(directory)):
        if name.startswith("snap_") and name.endswith(".meta"):
            meta = snaps.read_meta(os.path.join(directory, name))
            entries.append((meta["time"], name[:-5]))
    entries.sort()
    for time, base in entries:
        data = snaps.read_arrays(os.path.join(directory, base + ".cric"))
        traj.snapshots.append(Snapshot(time=time, u=data["u"],
                                       f=data.get("f")))
    p0 = os.path.join(directory, "potential0.cric")
    if os.path.exists(p0):
        data = snaps.read_arrays(p0)
        traj.f0 = data["f0"]
        traj.flux_beta = data["flux_beta"]
    series = {}
    spath = os.path.join(directory, "series.csv")
    if os.path.exists(spath):
        with open(spath, newline="") as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        for i, col in enumerate(header):
            vals = [r[i] for r in rows]
            series[col] = np.array([float(v) for v in vals]) \
                if col != "newton_iters" else np.array([int(v) for v in vals])
    epath = os.path.join(directory, "extra.csv")
    if os.path.exists(epath):
        with open(epath, newline="") as fh:
            header = fh.readline().strip().split(",")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        for i, col in enumerate(header):
            if col == "time":
                continue
            series[col] = np.array([float(r[i]) for r in rows])
    if "max_h" in series and np.all(np.isnan(series["max_h"])):
        del series["max_h"], series["grad_norm_max"]
    traj.series = series
    return model, traj, cfg


def check(directory) -> int:
    """Re-run diagnostics on stored snapshots; reports are reproducible."""
    from .snapshots import Manifest
    Manifest.read(directory).verify_all()
    model, traj, cfg = load_run(directory)
    report = run_diagnostics(model, traj, cfg, directory)
    _write_report(directory, report)
    _finalize(directory, "complete")
    print(report.to_text(), end="")
    return 0 if report.passed() else 1


def resume(directory, overrides=()) -> int:
    """Continue integration from the last checkpoint.

    The resumed series is bit-for-bit identical to an unbroken run with the
    same step schedule: checkpoints are step-aligned and the Jacobian reuse
    window resets at checkpoint boundaries, so stepping is reproducible.
    """
    import numpy as np
    from . import snapshots as snaps
    from .config import apply_overrides, parse_config_file, serialize_config
    from .flow import ConformalState, FlowError, run
    from .snapshots import Manifest

    man = Manifest.read(directory)
    for name in ("config.toml", "model.cric", "chk.cric", "chk.meta"):
        man.verify(name)
    cfg = parse_config_file(os.path.join(directory, "config.toml"))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
        with open(os.path.join(directory, "config.toml"), "w",
                  encoding="utf-8") as fh:
            fh.write(serialize_config(cfg))
    model = snaps.load_model(os.path.join(directory, "model.cric"))
    meta = snaps.read_meta(os.path.join(directory, "chk.meta"))
    data = snaps.read_arrays(os.path.join(directory, "chk.cric"))
    state = ConformalState(mode=meta["mode"], time=meta["time"],
                           u=data["u"], step_count=meta["step_count"],
                           last_dt=meta["last_dt"],
                           last_newton_iters=meta["last_newton_iters"])
    fcfg = _flow_config(cfg)
    if state.time >= fcfg.horizon - 1e-12:
        model2, traj, cfg = load_run(directory)
        report = run_diagnostics(model, traj, cfg, directory)
        _write_report(directory, report)
        _finalize(directory, "complete")
        return 0 if report.passed() else 1

    # trim series rows past the checkpoint (stale only after a hard kill)
    for fname in ("series.csv", "extra.csv"):
        path = os.path.join(directory, fname)
        if os.path.exists(path):
            with open(path, newline="") as fh:
                lines = fh.readlines()
            kept = [lines[0]]
            for line in lines[1:]:
                t = float(line.split(",", 1)[0])
                if t <= state.time + 1e-12:
                    kept.append(line)
            with open(path, "w", newline="") as fh:
                fh.writelines(kept)

    pot = None
    if cfg.track_potential and cfg.mode == "raw" and "f" in data:
        from .elliptic import PotentialState
        p0 = snaps.read_arrays(os.path.join(directory, "potential0.cric"))
        from . import elliptic
        h, gmax = elliptic._h_field(model, data["f"], state.u)
        pot = PotentialState(f=data["f"], f0=p0["f0"], h=h,
                             grad_norm_max=gmax, flux_beta=p0["flux_beta"])

    import dataclasses
    from .flow import default_schedule
    sched = fcfg.snapshot_schedule
    if sched is None:
        sched = default_schedule(cfg.mode, fcfg.horizon)
    remaining = tuple(s for s in sched if s > state.time + 1e-12)
    fcfg = dataclasses.replace(fcfg, snapshot_schedule=remaining or
                               (fcfg.horizon,))

    writer = RunWriter(directory, cfg, base_step=state.step_count, append=True)
    try:
        traj = run(model, fcfg, initial=state, on_step=writer.on_step,
                   _resume_potential=pot)
    except FlowError as err:
        writer.close()
        _finalize(directory, "failed")
        print(f"flow failed: {err}", file=sys.stderr)
        return 2
    if traj.status != "partial":
        writer.checkpoint(traj, traj.final_state, traj.final_potential)
    writer.close()
    if traj.status == "partial":
        _finalize(directory, "partial")
        return 0
    model2, full_traj, cfg = load_run(directory)
    report = run_diagnostics(model, full_traj, cfg, directory)
    _write_report(directory, report)
    _finalize(directory, "complete")
    print(report.to_text(), end="")
    return 0 if report.passed() else 1


def oracle_cmd(cfg, directory=None) -> int:
    from . import snapshots as snaps
    from .elliptic import solve_potential, uniformize_oracle
    from .surface import build_model

    directory = directory or cfg.directory
    os.makedirs(directory, exist_ok=True)
    model = build_model(_model_spec(cfg))
    U, info = uniformize_oracle(model, return_info=True)
    snaps.write_arrays(_oracle_path(directory), {"U": U})
    f0, asym = solve_potential(model, model.background_curvature)
    with open(os.path.join(directory, "oracle_report.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(f"newton_residuals = {info['residuals']}\n")
        fh.write(f"cusp_shift = {list(info['cusp_shift'])}\n")
        fh.write(f"potential_beta = {list(asym.beta)}\n")
        fh.write(f"potential_gamma = {list(asym.gamma)}\n")
        fh.write(f"gauss_bonnet_defect = {model.ops.gb_defect}\n")
    print(f"oracle residual {info['residuals'][-1]:.3e} "
          f"after {len(info['residuals']) - 1} Newton steps")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="conic-ricci",
        description="Conformal Ricci flow laboratory on surfaces with "
                    "asymptotically conical ends")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker threads (or CONIC_RICCI_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="override output directory")
    p_res = sub.add_parser("resume", help="continue from the last checkpoint")
    p_res.add_argument("directory")
    p_res.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="config override, e.g. --set flow.t_end=100")
    p_chk = sub.add_parser("check", help="re-run diagnostics on a run dir")
    p_chk.add_argument("directory")
    p_orc = sub.add_parser("oracle", help="uniformizer solve only")
    p_orc.add_argument("config")
    p_orc.add_argument("--out", default=None)
    args = parser.parse_args(argv)

    threads = args.threads
    if threads is None and os.environ.get("CONIC_RICCI_THREADS"):
        threads = int(os.environ["CONIC_RICCI_THREADS"])
    if threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)

    from .config import ConfigError, parse_config_file

    try:
        if args.command == "run":
            cfg = parse_config_file(args.config)
            return run_experiment(cfg, directory=args.out)
        if args.command == "resume":
            return resume(args.directory, overrides=args.set)
        if args.command == "check":
            return check(args.directory)
        if args.command == "oracle":
            cfg = parse_config_file(args.config)
            return oracle_cmd(cfg, directory=args.out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # surfaced with context, artifacts retained
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
