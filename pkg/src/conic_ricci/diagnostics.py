"""Quantified checks of the flow's a-priori estimates and convergence claims.

Every check is a pure function of stored snapshots: re-running diagnostics on
a saved trajectory reproduces the same report bit for bit.  Sup/inf checks
run on the core region (flat chart plus cylinder collar up to a fixed rho),
so truncation artifacts stay out of theorem checks; the outer collar is
monitored separately as info entries.

Inequality checks carry a slack of 10x the Newton tolerance plus a term
proportional to the snapshot spacing times an empirical second-difference
proxy, recorded per check, so they cannot fail on integrator noise alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .surface import scalar_curvature, total_curvature, distance_field


@dataclass(frozen=True)
class CheckResult:
    name: str
    status: str  # "pass" | "fail" | "info"
    worst_value: float
    location: tuple | None = None  # (node index, time)
    tolerance_used: float = 0.0
    details: str = ""

    def line(self):
        loc = "-" if self.location is None else \
            f"node={self.location[0]} time={self.location[1]:.6g}"
        out = (f"{self.name:32s} {self.status:4s} "
               f"worst={self.worst_value:.6g} {loc} tol={self.tolerance_used:.3g}")
        if self.details:
            out += f"  [{self.details}]"
        return out


@dataclass
class DiagnosticsReport:
    checks: list = field(default_factory=list)
    series: dict = field(default_factory=dict)

    def add(self, *results):
        self.checks.extend(results)

    def add_series(self, name, header, rows):
        self.series[name] = (tuple(header), [tuple(r) for r in rows])

    def passed(self):
        return all(c.status != "fail" for c in self.checks)

    def to_text(self):
        lines = [c.line() for c in sorted(self.checks, key=lambda c: c.name)]
        status = "ALL PASS" if self.passed() else "FAILURES PRESENT"
        return "\n".join(lines + [status]) + "\n"

    def merge(self, other):
        self.checks.extend(other.checks)
        self.series.update(other.series)
        self.checks.sort(key=lambda c: c.name)
        return self


def _pde_mask(model):
    return model.interior_mask | model.overlap_mask


def _core(model, rho_core=None):
    return model.core_region_mask(rho_core) & _pde_mask(model)


def _slack(newton_tol, spacing, proxy):
    return 10.0 * newton_tol + 2.0 * spacing * proxy


def _second_difference_proxy(snapshots, mask):
    """Max second time-difference of u per middle snapshot (curvature of the
    trajectory in time, the dt-error proxy of the inequality slacks)."""
    out = {}
    for a, b, c in zip(snapshots, snapshots[1:], snapshots[2:]):
        d1 = (b.u[mask] - a.u[mask]) / (b.time - a.time)
        d2 = (c.u[mask] - b.u[mask]) / (c.time - b.time)
        out[b.time] = float(np.max(np.abs(d2 - d1)) / (0.5 * (c.time - a.time)))
    return out


def _worst_node(values, mask):
    vals = np.where(mask, values, -np.inf)
    i = int(np.argmax(vals))
    return i, float(vals[i])


# ---------------------------------------------------------------------------
# raw-mode checks
# ---------------------------------------------------------------------------

def check_bounds(traj, rho_core=None):
    """Two-sided linear bounds C1 <= u <= C2 (1 + t), constants calibrated on
    t <= 1, plus the locally uniform linear lower bound on the core (positive
    least-squares slope of min_core u against t on the late half)."""
    if traj.mode != "raw":
        raise ValueError("check_bounds needs a raw-mode trajectory")
    times = traj.times
    if times[-1] < 10.0:
        raise ValueError("trajectory too short: need t_end >= 10")
    model = traj.model
    act = model.active_mask
    core = _core(model, rho_core)

    early = [s for s in traj.snapshots if s.time <= 1.0 + 1e-12]
    c1 = 0.5 * min(float(np.min(s.u[act])) for s in early)
    c2 = 2.0 * max(float(np.max(s.u[act])) / (1.0 + s.time) for s in early)

    worst_lo, worst_hi = np.inf, -np.inf
    loc_lo = loc_hi = None
    rows = []
    for s in traj.snapshots:
        lo = s.u[act].min()
        hi = (s.u[act] / (1.0 + s.time)).max()
        rows.append((s.time, float(lo), float(np.max(s.u[act])),
                     float(np.min(s.u[core])) if core.any() else np.nan))
        if lo < worst_lo:
            worst_lo = float(lo)
            i, _ = _worst_node(-s.u, act)
            loc_lo = (i, s.time)
        if hi > worst_hi:
            worst_hi = float(hi)
            i, _ = _worst_node(s.u / (1.0 + s.time), act)
            loc_hi = (i, s.time)

    res = [
        CheckResult("linear_bounds_lower",
                    "pass" if worst_lo >= c1 else "fail",
                    worst_lo, loc_lo, c1, f"C1={c1:.6g}"),
        CheckResult("linear_bounds_upper",
                    "pass" if worst_hi <= c2 else "fail",
                    worst_hi, loc_hi, c2, f"C2={c2:.6g}"),
    ]

    late = [(s.time, float(np.min(s.u[core])))
            for s in traj.snapshots if s.time >= 0.5 * times[-1]]
    tt = np.array([p[0] for p in late])
    mm = np.array([p[1] for p in late])
    slope = float(np.polyfit(tt, mm, 1)[0])
    res.append(CheckResult("core_linear_growth",
                           "pass" if slope > 0.0 else "fail",
                           slope, None, 0.0,
                           f"LSQ slope of min_core u over t>={0.5 * times[-1]:.3g}"))
    report = DiagnosticsReport()
    report.add(*res)
    report.add_series("bounds", ("time", "min_u", "max_u", "min_core_u"), rows)
    return report


def check_aronson_benilan(traj):
    """Pointwise differential bound du/dt <= u/t between consecutive snapshots."""
    if traj.mode != "raw":
        raise ValueError("check_aronson_benilan needs a raw-mode trajectory")
    model = traj.model
    mask = _pde_mask(model)
    tol = traj.config.newton_tol
    proxies = _second_difference_proxy(traj.snapshots, mask)
    worst = -np.inf
    loc = None
    tol_used = 0.0
    pairs = 0
    for a, b in zip(traj.snapshots, traj.snapshots[1:]):
        if a.time <= 0.0:
            continue
        pairs += 1
        spacing = b.time - a.time
        proxy = max(proxies.get(a.time, 0.0), proxies.get(b.time, 0.0))
        slack = _slack(tol, spacing, proxy)
        margin = (b.u[mask] - a.u[mask]) / spacing - b.u[mask] / b.time
        m = float(np.max(margin)) - slack
        if m > worst:
            worst = m
            i, _ = _worst_node(margin, np.ones(mask.sum(), dtype=bool))
            loc = (int(np.flatnonzero(mask)[i]), b.time)
            tol_used = slack
    report = DiagnosticsReport()
    report.add(CheckResult("aronson_benilan",
                           "pass" if worst <= 0.0 else "fail",
                           worst, loc, tol_used,
                           f"{pairs} snapshot pairs, margin minus slack"))
    return report


def check_sign_and_conservation(traj, gauged=False, conservation_tol=0.01):
    """Sign preservation of R (gauged runs), conservation of the total
    curvature integral, and monotonicity of max h when tracked."""
    if traj.mode != "raw":
        raise ValueError("check_sign_and_conservation needs a raw trajectory")
    model = traj.model
    mask = _pde_mask(model)
    tol = traj.config.newton_tol
    report = DiagnosticsReport()

    tc = [total_curvature(model, s.u) for s in traj.snapshots]
    drift = max(abs(v - tc[0]) for v in tc) / abs(tc[0])
    report.add(CheckResult("curvature_conservation",
                           "pass" if drift <= conservation_tol else "fail",
                           drift, None, conservation_tol,
                           f"total at t=0: {tc[0]:.6g}"))
    report.add_series("total_curvature",
                      ("time", "total_curvature"),
                      [(s.time, v) for s, v in zip(traj.snapshots, tc)])

    if gauged:
        worst, loc = -np.inf, None
        dtm = max(float(np.max(np.diff(traj.times))), 0.0)
        proxies = _second_difference_proxy(traj.snapshots, mask)
        proxy = max(proxies.values()) if proxies else 0.0
        slack = _slack(tol, dtm, proxy * 0.0) + 10.0 * tol  # R is algebraic in u
        for s in traj.snapshots:
            R = scalar_curvature(model, s.u)
            i, v = _worst_node(R, mask)
            if v > worst:
                worst, loc = v, (i, s.time)
        report.add(CheckResult("curvature_sign",
                               "pass" if worst <= slack else "fail",
                               worst, loc, slack, "max R over gauged run"))
    else:
        report.add(CheckResult("curvature_sign", "info", np.nan, None, 0.0,
                               "skipped: run not gauged"))

    if "max_h" in traj.series:
        mh = traj.series_array("max_h")
        tt = traj.series_array("time")
        dh = np.diff(mh)
        slack = _slack(tol, float(np.max(np.diff(tt))),
                       float(np.max(np.abs(dh))) if dh.size else 0.0) * 0.1
        worst = float(np.max(dh)) if dh.size else 0.0
        report.add(CheckResult("h_monotonicity",
                               "pass" if worst <= slack else "fail",
                               worst, None, slack,
                               f"max increase of max_M h, h(0)={mh[0]:.6g}"))
        maxR = traj.series_array("max_R")
        worst_r = float(np.max(maxR))
        bound = mh[0] + 10.0 * tol
        report.add(CheckResult("curvature_vs_h0",
                               "pass" if worst_r <= bound else "fail",
                               worst_r, None, bound,
                               "sup R(t) against max h(0)"))
    return report


def check_potential_identity(traj, band_tol=None):
    """Deviation of log u from f0 - f along the trajectory (sup norm)."""
    if traj.f0 is None:
        raise ValueError("trajectory has no tracked potential")
    model = traj.model
    mask = _pde_mask(model)
    worst, loc = -np.inf, None
    rows = []
    for s in traj.snapshots:
        if s.f is None:
            continue
        dev = np.abs(np.log(s.u[mask]) - (traj.f0[mask] - s.f[mask]))
        i = int(np.argmax(dev))
        rows.append((s.time, float(dev.max())))
        if dev[i] > worst:
            worst = float(dev[i])
            loc = (int(np.flatnonzero(mask)[i]), s.time)
    if band_tol is None:
        h = max(c.spacing[0] for c in model.charts)
        dtm = float(np.max(traj.series_array("dt"))) if "dt" in traj.series else 0.0
        band_tol = 5.0 * (h * h + dtm)
    report = DiagnosticsReport()
    report.add(CheckResult("potential_identity",
                           "pass" if worst <= band_tol else "fail",
                           worst, loc, band_tol,
                           "sup |log u - (f0 - f)|"))
    report.add_series("potential_identity", ("time", "deviation"), rows)
    return report


def check_curvature_decay(traj, noise_floor=1e-6):
    """Decay order of R on the ends.

    Exact-cone ends: |R| below solver noise outside the cutoff annulus (and
    clear of the quadrature-split collar).  Perturbed ends: the envelope
    sup_theta |R| * exp((2+tau) alpha rho) is flat in rho within a factor 3
    over the ramped-on window.
    """
    model = traj.model
    report = DiagnosticsReport()
    snaps = [s for s in traj.snapshots if s.time >= 1.0] or traj.snapshots[-1:]
    s = snaps[0]
    R = scalar_curvature(model, s.u)
    for j, end in enumerate(model.ends):
        on_end = (model.ops.end_id == j) & _pde_mask(model)
        rho = model.ops.rho_hat
        if end.perturbation_amp == 0.0:
            # the inner cone legitimately carries the transient curvature the
            # decay estimate allows (|R| <= C exp(Ct) r^(-2-tau)); solver
            # noise is only a meaningful floor beyond the diffusion range
            lo = max(-np.log(model.spec.r_in) + 0.8, 0.5 * end.rho_max)
            zone = on_end & (rho >= lo) & (rho <= end.rho_max - 1.0)
            worst = float(np.max(np.abs(R[zone])))
            i = int(np.argmax(np.where(zone, np.abs(R), -np.inf)))
            report.add(CheckResult(f"curvature_decay_end{j}",
                                   "pass" if worst <= noise_floor else "fail",
                                   worst, (i, s.time), noise_floor,
                                   f"exact cone: |R| on rho in "
                                   f"[{lo:.1f},{end.rho_max - 1:.1f}]"))
            inner = on_end & (rho >= -np.log(model.spec.r_in) + 0.8) \
                & (rho < lo)
            if inner.any():
                rate = (2.0 + end.order_tau) * end.angle_alpha
                env = float(np.max(np.abs(R[inner])
                                   * np.exp(rate * rho[inner])))
                report.add(CheckResult(f"curvature_envelope_end{j}", "info",
                                       env, None, 0.0,
                                       "sup |R| exp((2+tau) alpha rho) on "
                                       "the inner cone"))
        else:
            from .surface import _EndGeom
            lo = _EndGeom.RAMP_ON + _EndGeom.RAMP_WIDTH + 0.5
            hi = end.rho_max - 1.0
            nbin = 12
            edges = np.linspace(lo, hi, nbin + 1)
            env = []
            rate = (2.0 + end.order_tau) * end.angle_alpha
            for a, b in zip(edges, edges[1:]):
                sel = on_end & (rho >= a) & (rho < b)
                if sel.any():
                    env.append(float(np.max(np.abs(R[sel])
                                            * np.exp(rate * rho[sel]))))
            env = np.array(env)
            ratio = float(env.max() / env.min()) if env.min() > 0 else np.inf
            report.add(CheckResult(f"curvature_decay_end{j}",
                                   "pass" if ratio <= 3.0 else "fail",
                                   ratio, None, 3.0,
                                   f"envelope spread over rho in [{lo:.1f},{hi:.1f}]"))
    return report


# ---------------------------------------------------------------------------
# rescaled-mode checks
# ---------------------------------------------------------------------------

def check_rescaled_monotonicity(traj):
    """Pointwise monotonicity of u~ in tau and the curvature floor R~ >= -1."""
    if traj.mode != "rescaled":
        raise ValueError("needs a rescaled trajectory")
    model = traj.model
    mask = _pde_mask(model)
    tol = traj.config.newton_tol
    proxies = _second_difference_proxy(traj.snapshots, mask)
    worst_mono, loc_m, tol_m = -np.inf, None, 0.0
    worst_floor, loc_f = np.inf, None
    for a, b in zip(traj.snapshots, traj.snapshots[1:]):
        spacing = b.time - a.time
        proxy = max(proxies.get(a.time, 0.0), proxies.get(b.time, 0.0))
        slack = _slack(tol, spacing, proxy * spacing)
        inc = b.u[mask] - a.u[mask]
        m = float(np.max(inc)) - slack
        if m > worst_mono:
            worst_mono = m
            i = int(np.argmax(inc))
            loc_m = (int(np.flatnonzero(mask)[i]), b.time)
            tol_m = slack
    for s in traj.snapshots:
        R = scalar_curvature(model, s.u)
        v = float(np.min(R[mask] + 1.0))
        if v < worst_floor:
            worst_floor = v
            i = int(np.argmin(np.where(mask, R, np.inf)))
            loc_f = (i, s.time)
    floor_slack = 10.0 * tol
    report = DiagnosticsReport()
    report.add(
        CheckResult("rescaled_monotonicity",
                    "pass" if worst_mono <= 0.0 else "fail",
                    worst_mono, loc_m, tol_m,
                    "max pointwise increase of u~ minus slack"),
        CheckResult("curvature_floor",
                    "pass" if worst_floor >= -floor_slack else "fail",
                    worst_floor, loc_f, floor_slack, "min of R~ + 1"))
    return report


def _sample_core_nodes(model, n, rng, min_dist=0.25):
    """Deterministic resolution-stable core sample: random coordinates away
    from all punctures, snapped to the nearest flat-chart node."""
    N = model.charts[0].resolution[0]
    pts = []
    while len(pts) < n:
        x, y = rng.uniform(0.0, 1.0, 2)
        ok = True
        for e in model.ends:
            dx = x - e.puncture[0]
            dy = y - e.puncture[1]
            dx -= round(dx)
            dy -= round(dy)
            if np.hypot(dx, dy) < min_dist:
                ok = False
                break
        if ok:
            pts.append((x, y))
    idx = [int((round(x * N) % N) * N + (round(y * N) % N)) for x, y in pts]
    return idx


def check_harnack(traj, n_pairs=64, seed=0, tau_min=1.0):
    """Empirical Harnack constant over sampled space-time core pairs.

    For each pair the check solves
    R~(x2,t2) + 1 = exp(-D/4 - C (t2 - t1)) (R~(x1,t1) + 1) for C, with
    D = d(x1, x2, t1)^2 / (t2 - t1), and reports the largest C.  Pairs with a
    nonpositive curvature excess are skipped and counted.
    """
    if traj.mode != "rescaled":
        raise ValueError("needs a rescaled trajectory")
    model = traj.model
    rng = np.random.default_rng(seed)
    snaps = [s for s in traj.snapshots if s.time >= tau_min]
    if len(snaps) < 2:
        raise ValueError("trajectory too short for Harnack sampling")
    nodes = _sample_core_nodes(model, max(8, n_pairs // 4), rng)
    Rcache = {}

    def curv(s):
        if s.time not in Rcache:
            Rcache[s.time] = scalar_curvature(model, s.u)
        return Rcache[s.time]

    pairs = []
    for _ in range(n_pairs):
        i1, i2 = rng.integers(0, len(snaps), 2)
        if i1 == i2:
            i2 = (i2 + 1) % len(snaps)
        i1, i2 = min(i1, i2), max(i1, i2)
        x1, x2 = rng.choice(nodes, 2, replace=True)
        pairs.append((int(x1), int(x2), int(i1), int(i2)))

    by_source = {}
    for x1, x2, i1, i2 in pairs:
        by_source.setdefault(i1, set()).add(x1)
    dists = {}
    for i1, sources in by_source.items():
        src = sorted(sources)
        D = distance_field(model, snaps[i1].u, src)
        for k, s_node in enumerate(src):
            dists[(i1, s_node)] = D[k]

    chats = []
    skipped = 0
    rows = []
    for x1, x2, i1, i2 in pairs:
        s1, s2 = snaps[i1], snaps[i2]
        R1 = curv(s1)[x1] + 1.0
        R2 = curv(s2)[x2] + 1.0
        if R1 <= 0.0 or R2 <= 0.0:
            skipped += 1
            continue
        dtau = s2.time - s1.time
        dist = dists[(i1, x1)][x2]
        Dhat = dist * dist / dtau
        chat = (-Dhat / 4.0 - np.log(R2 / R1)) / dtau
        chats.append(chat)
        rows.append((s1.time, s2.time, x1, x2, dist, chat))
    report = DiagnosticsReport()
    if chats:
        worst = float(np.max(chats))
        report.add(CheckResult("harnack_calibration",
                               "pass" if np.isfinite(worst) else "fail",
                               worst, None, np.inf,
                               f"max C over {len(chats)} pairs, "
                               f"{skipped} skipped"))
    else:
        report.add(CheckResult("harnack_calibration", "info", np.nan, None,
                               0.0, "all pairs skipped"))
    report.add_series("harnack",
                      ("tau1", "tau2", "x1", "x2", "dist", "c_hat"), rows)
    return report


def check_convergence(traj, oracle, rho_core=None, e_tol=0.02, c_tol=0.05,
                      seed=0, kappa_radius=0.5, n_balls=8):
    """Convergence of the rescaled flow to the uniformizer on the core.

    Reports e(tau) = sup_core |u~ - U| / sup_core U and
    c(tau) = sup_core |R~ + 1|, asserts both nonincreasing on the last half
    and below their thresholds at the end; also the kappa-noncollapsing ratio
    of sampled core balls and the core area against 4 pi k.
    """
    if traj.mode != "rescaled":
        raise ValueError("needs a rescaled trajectory")
    model = traj.model
    if traj.times[-1] < 8.0 - 1e-9:
        raise ValueError("trajectory too short: need tau_end >= 8")
    core = _core(model, rho_core)
    uinf = float(np.max(np.abs(oracle[core])))
    tol = traj.config.newton_tol

    rows = []
    for s in traj.snapshots:
        R = scalar_curvature(model, s.u)
        e = float(np.max(np.abs(s.u[core] - oracle[core]))) / uinf
        c = float(np.max(np.abs(R[core] + 1.0)))
        rows.append((s.time, e, c))
    tau_end = rows[-1][0]
    half = [r for r in rows if r[0] >= 0.5 * tau_end]
    slack = 10.0 * tol
    e_inc = max(b[1] - a[1] for a, b in zip(half, half[1:]))
    c_inc = max(b[2] - a[2] for a, b in zip(half, half[1:]))

    report = DiagnosticsReport()
    report.add(
        CheckResult("uniformizer_convergence_u",
                    "pass" if rows[-1][1] <= e_tol else "fail",
                    rows[-1][1], None, e_tol,
                    f"e(tau_end={tau_end:.3g}) relative sup deviation"),
        CheckResult("uniformizer_convergence_R",
                    "pass" if rows[-1][2] <= c_tol else "fail",
                    rows[-1][2], None, c_tol, "c(tau_end) = sup core |R~+1|"),
        CheckResult("uniformizer_monotone_e",
                    "pass" if e_inc <= slack else "fail",
                    e_inc, None, slack, "max increase of e on the last half"),
        CheckResult("uniformizer_monotone_R",
                    "pass" if c_inc <= slack else "fail",
                    c_inc, None, slack, "max increase of c on the last half"))
    report.add_series("convergence", ("tau", "e", "c"), rows)

    # kappa-noncollapsing on sampled core balls
    rng = np.random.default_rng(seed)
    centers = _sample_core_nodes(model, n_balls, rng)
    w = model.ops.quad_weights
    sub = traj.snapshots[:: max(1, len(traj.snapshots) // 5)]
    if traj.snapshots[-1] not in sub:
        sub = sub + [traj.snapshots[-1]]
    krows = []
    kmin = np.inf
    for s in sub:
        D = distance_field(model, s.u, centers)
        for k in range(len(centers)):
            ball = (D[k] <= kappa_radius) & model.active_mask \
                & ~model.truncation_mask
            area = float(np.dot(w[ball], s.u[ball]))
            ratio = area / kappa_radius ** 2
            kmin = min(kmin, ratio)
            krows.append((s.time, centers[k], ratio))
    kappa_floor = 0.5 * max(r for t, c, r in krows if t == krows[0][0])
    report.add(CheckResult("kappa_noncollapsing",
                           "pass" if kmin >= kappa_floor else "fail",
                           kmin, None, kappa_floor,
                           f"min area(B(x,{kappa_radius}))/r^2 over samples"))
    report.add_series("kappa", ("tau", "center", "ratio"), krows)

    # finite area: region grows with the truncation, tail follows the cusp
    rho_area = min(float(min(e.rho_max for e in model.ends)) / 8.0, 4.0)
    region = model.active_mask & ~model.truncation_mask \
        & (model.ops.rho_hat <= rho_area)
    arows = [(s.time, float(np.dot(w[region], s.u[region]))) for s in traj.snapshots]
    target = 4.0 * np.pi * len(model.ends)
    report.add(CheckResult("finite_area", "info", arows[-1][1], None, target,
                           f"area of core (rho<={rho_area:.3g}) vs 4 pi k"))
    report.add_series("core_area", ("tau", "area"), arows)

    # existence of a surviving point and local curvature boundedness
    usable = core.copy()
    inf_u = np.full(model.n_nodes, np.inf)
    sup_R = -np.inf
    for s in traj.snapshots:
        inf_u = np.minimum(inf_u, s.u)
        sup_R = max(sup_R, float(np.max(scalar_curvature(model, s.u)[core])))
    survival = float(np.max(inf_u[usable]))
    report.add(
        CheckResult("pointwise_survival",
                    "pass" if survival >= 0.1 else "fail",
                    survival, None, 0.1,
                    "max over core of inf over tau of u~"),
        CheckResult("local_curvature_bound",
                    "pass" if np.isfinite(sup_R) else "fail",
                    sup_R, None, np.inf, "sup over core and tau of R~"))
    return report


def end_flux_series(traj, rho_probe=None):
    """Per-end boundary flux of log u at a probe radius (info only).

    Tracks (2 pi)^-1 times the circular mean of d(log u)/d rho, the discrete
    stand-in for a drifting cone angle; recorded so angle redistribution
    between ends can be studied, nothing asserted.
    """
    model = traj.model
    rows = []
    for s in traj.snapshots:
        row = [s.time]
        for j, end in enumerate(model.ends):
            chart = model.charts[j + 1]
            nrho, ntheta = chart.resolution
            hrho = chart.spacing[0]
            grid = np.log(s.u[chart.slice].reshape(nrho, ntheta))
            ir = int(np.argmin(np.abs(
                chart.node_coordinates[::ntheta, 0] -
                (rho_probe or 0.5 * end.rho_max))))
            ir = min(max(ir, 1), nrho - 2)
            flux = float(np.mean((grid[ir + 1] - grid[ir - 1]) / (2 * hrho)))
            row.append(flux)
        rows.append(tuple(row))
    rep = DiagnosticsReport()
    rep.add_series("end_flux", tuple(["time"] + [f"end{j}" for j in
                                                 range(len(model.ends))]), rows)
    rep.add(CheckResult("end_flux_recorded", "info",
                        rows[-1][1] if rows and len(rows[-1]) > 1 else np.nan,
                        None, 0.0, "per-end log-gradient flux series"))
    return rep
