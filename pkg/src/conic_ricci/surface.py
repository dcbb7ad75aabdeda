"""Discretized surfaces with asymptotically conical ends and their geometric operators.

The surface family is a k-punctured flat torus.  The base coordinate domain is
the unit square with periodic identifications; each puncture p_j carries a
conformal factor that turns its neighbourhood into an exact cone of angle
2*pi*alpha_j, pushed to infinity at the puncture.  Euler characteristic is
chi = -k, so every model satisfies chi < 0.

Discretization uses two chart families:

  * one Cartesian periodic core chart covering the torus minus small disks
    around the punctures, and
  * one cylinder chart per end in log-radius coordinates (rho, theta), with
    rho = -log|z - p_j|, truncated at rho_max.

All fields live in a single flat vector indexed over the concatenation of the
chart grids (C order per chart).  Per-node boundary tags mark interior,
overlap (values interpolated from the partner chart), truncation (artificial
outer boundary) and hole (excluded nodes deep inside the removed disks).

The background metric is g0 = exp(2*v0) * (flat chart metric).  On the core
chart v0(z) = sum_j (alpha_j + 1) * eta(|z - p_j|) * (-log|z - p_j|) with eta a
quintic smoothstep cutoff, so each end is an exact cone outside the cutoff
annulus.  On a cylinder chart the same metric reads vtilde = alpha*rho, which
is flat-harmonic, hence R0 vanishes identically on the exactly conic region.
Inside the cutoff annulus R0 is evaluated with the same five-point Laplacian
that drives the flow, which makes the discrete Gauss-Bonnet sum telescope to a
flux of the smooth cone profile and converge cleanly under refinement.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra as _csgraph_dijkstra


TAG_INTERIOR = 0
TAG_OVERLAP = 1
TAG_TRUNCATION = 2
TAG_HOLE = 3

TWO_PI = 2.0 * np.pi


class ModelError(ValueError):
    """Invalid model description or chart construction failure."""


def smoothstep(t):
    """Quintic smoothstep: 0 for t <= 0, 1 for t >= 1, C^2 across the joints."""
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (t * (6.0 * t - 15.0) + 10.0)


def smoothstep_d1(t):
    t = np.asarray(t, dtype=float)
    out = np.zeros_like(t)
    m = (t > 0.0) & (t < 1.0)
    tm = t[m]
    out[m] = 30.0 * tm * tm * (1.0 - tm) ** 2
    return out


@dataclass(frozen=True)
class ConeEnd:
    """One asymptotically conical end: cone angle 2*pi*alpha, decay order tau."""

    angle_alpha: float
    order_tau: float
    perturbation_amp: float
    rho_min: float
    rho_max: float
    puncture: tuple

    def __post_init__(self):
        if self.angle_alpha <= 0.0:
            raise ModelError("cone angle parameter alpha must be positive")
        if self.order_tau <= 0.0:
            raise ModelError("decay order tau must be positive")
        if self.rho_min >= self.rho_max:
            raise ModelError("end chart needs rho_min < rho_max")


@dataclass(frozen=True)
class ChartGrid:
    """A structured grid for one chart, flattened in C order at `offset`."""

    kind: str  # "cartesian-torus-core" | "cylinder-end"
    resolution: tuple
    spacing: tuple
    node_coordinates: np.ndarray  # (n, 2) chart coordinates
    boundary_tags: np.ndarray  # (n,) uint8
    offset: int

    @property
    def size(self):
        return self.resolution[0] * self.resolution[1]

    @property
    def slice(self):
        return slice(self.offset, self.offset + self.size)


@dataclass(frozen=True)
class ModelSpec:
    """Description of a punctured-torus model (defaults give the standard k=1 setup)."""

    punctures: int = 1
    angles: tuple = (0.5,)
    resolution: int = 96
    rho_max: float | None = None  # default 12/alpha per end
    perturbation_amp: float = 0.0
    perturbation_order: float = 1.0
    puncture_xy: tuple | None = None  # optional explicit positions
    r_cut: float = 0.05
    r_in: float = 0.1
    r_out: float = 0.2


class _ModelOps:
    """Precomputed discrete-operator data attached to a SurfaceModel.

    Not part of the public type contract; every field is immutable after
    construction.
    """

    def __init__(self):
        self.einv2 = None          # exp(-2 v0), chart-flat Laplacian scaling
        self.lap = None            # CSR, rows at interior nodes: Delta_0
        self.sync = None           # CSR, rows at overlap nodes: interpolation
        self.quad_weights = None   # partition-of-unity quadrature weights
        self.idx_interior = None
        self.idx_overlap = None
        self.idx_trunc = None
        self.lap_red = None        # interior rows with overlap columns eliminated
        self.lap_it = None         # interior rows, truncation columns
        self.lap_neumann = None    # [interior; truncation] operator, mirror ghost
        self.neumann_coeff = None  # per truncation node: factor of the flux datum
        self.trunc_end = None      # per truncation node: end index
        self.trunc_rho = None      # per truncation node: rho value
        self.trunc_inner = None    # per truncation node: global idx of row below
        self.rho_hat = None        # global radial coordinate (core: -log min_j d_j)
        self.theta = None          # cylinder theta (nan on core)
        self.end_id = None         # per node end index, -1 on core
        self.nearest_end = None    # per node nearest end index (core included)
        self.anchor_index = None
        self.bump = None           # smooth core bump used by the conformal gauge
        self.edges = None          # (i, j, flat_len, a_i, a_j) distance graph data
        self.gb_defect = None
        self.core_size = None
        self.left_null = None      # lazy: discrete area functional of lap_neumann

    def freeze(self):
        for name, val in self.__dict__.items():
            if isinstance(val, np.ndarray):
                val.setflags(write=False)


@dataclass(frozen=True, eq=False)
class SurfaceModel:
    """Immutable discretization of (M, g0) with chi(M) < 0.

    Fields follow the global flat-vector layout described in the module
    docstring.  `background_log_factor` holds v0 per node relative to the
    node's own chart metric, `background_curvature` holds R0, `area_weights`
    the per-node metric cell area dA0 (positive on all non-hole nodes).
    """

    euler_char: int
    ends: tuple
    charts: tuple
    background_log_factor: np.ndarray
    background_curvature: np.ndarray
    area_weights: np.ndarray
    laplacian_stencil: sp.csr_matrix
    boundary_tags: np.ndarray
    spec: ModelSpec
    ops: _ModelOps = field(repr=False)

    @property
    def n_nodes(self):
        return self.background_log_factor.shape[0]

    @property
    def interior_mask(self):
        return self.boundary_tags == TAG_INTERIOR

    @property
    def overlap_mask(self):
        return self.boundary_tags == TAG_OVERLAP

    @property
    def truncation_mask(self):
        return self.boundary_tags == TAG_TRUNCATION

    @property
    def hole_mask(self):
        return self.boundary_tags == TAG_HOLE

    @property
    def active_mask(self):
        return self.boundary_tags != TAG_HOLE

    @property
    def alphas(self):
        return np.array([e.angle_alpha for e in self.ends])

    def gauss_bonnet_target(self):
        return 4.0 * np.pi * (self.euler_char - float(np.sum(self.alphas)))

    def core_region_mask(self, rho_core=None):
        """Core region for theorem checks: flat chart plus cylinders up to rho_core."""
        if rho_core is None:
            rho_core = min(0.5 * float(min(e.rho_max for e in self.ends)), 4.0) \
                if self.ends else np.inf
        m = self.active_mask.copy()
        m &= ~self.truncation_mask
        if self.ends:
            m &= self.ops.rho_hat <= rho_core
        return m


def _torus_delta(x, y, p):
    """Minimal-representative displacement from p on the unit torus."""
    dx = x - p[0]
    dy = y - p[1]
    dx -= np.round(dx)
    dy -= np.round(dy)
    return dx, dy


def _default_punctures(k):
    if k == 1:
        return [(0.5, 0.5)]
    if k == 2:
        return [(0.25, 0.5), (0.75, 0.5)]
    # place on a circle of radius 0.3 about the center
    ang = TWO_PI * np.arange(k) / k
    return [(0.5 + 0.3 * np.cos(a), 0.5 + 0.3 * np.sin(a)) for a in ang]


def _validate_spec(spec):
    k = spec.punctures
    if k < 1:
        raise ModelError(
            "need at least one puncture: chi(M) = -k must be negative")
    angles = tuple(float(a) for a in spec.angles)
    if len(angles) != k:
        raise ModelError(f"got {len(angles)} angles for {k} punctures")
    if any(a <= 0 for a in angles):
        raise ModelError("all cone angles alpha_j must be positive")
    N = int(spec.resolution)
    if N < 16:
        raise ModelError("resolution below the minimum of 16 per direction")
    if N < 32:
        raise ModelError(
            "punctured-torus models need resolution >= 32 so the overlap ring "
            "around each removed disk is resolved")
    if spec.perturbation_amp != 0.0 and N < 64:
        raise ModelError("perturbed ends need resolution >= 64")
    if not (0 < spec.r_cut < spec.r_in < spec.r_out < 0.25):
        raise ModelError("need 0 < r_cut < r_in < r_out < 0.25")
    punctures = spec.puncture_xy
    if punctures is None:
        punctures = _default_punctures(k)
    punctures = [tuple(map(float, p)) for p in punctures]
    if len(punctures) != k:
        raise ModelError(f"got {len(punctures)} puncture positions for k={k}")
    for a in range(k):
        for b in range(a + 1, k):
            dx, dy = _torus_delta(np.array(punctures[a][0]),
                                  np.array(punctures[a][1]), punctures[b])
            if np.hypot(dx, dy) < 2.0 * spec.r_out:
                raise ModelError(
                    f"punctures {a} and {b} closer than 2*r_out: cutoff annuli "
                    "would overlap (rejected rather than auto-shrunk)")
    rho_min = -np.log(spec.r_out)
    if spec.rho_max is None:
        rho_maxes = [12.0 / a for a in angles]
    else:
        rho_maxes = [float(spec.rho_max)] * k
    for rm in rho_maxes:
        if rm <= -np.log(spec.r_cut) + 1.0:
            raise ModelError(
                f"truncation rho_max={rm} too small: must exceed the cutoff "
                f"radius -log(r_cut)+1 = {-np.log(spec.r_cut) + 1.0:.3f}")
    return k, angles, punctures, rho_min, rho_maxes


class _EndGeom:
    """Closed-form background pieces for one end (cylinder coordinates)."""

    # perturbation ramps on over rho in [RAMP_ON, RAMP_ON + RAMP_WIDTH] so the
    # core chart, which never sees rho beyond ~3.6, stays perturbation free
    RAMP_ON = 4.2
    RAMP_WIDTH = 2.0

    def __init__(self, alpha, tau, amp):
        self.alpha = alpha
        self.tau = tau
        self.amp = amp
        self.decay = alpha * tau

    def ramp(self, rho):
        return smoothstep((rho - self.RAMP_ON) / self.RAMP_WIDTH)

    def ramp_d1(self, rho):
        return smoothstep_d1((rho - self.RAMP_ON) / self.RAMP_WIDTH) / self.RAMP_WIDTH

    def ramp_d2(self, rho):
        t = (rho - self.RAMP_ON) / self.RAMP_WIDTH
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        m = (t > 0.0) & (t < 1.0)
        tm = t[m]
        out[m] = (120.0 * tm ** 3 - 180.0 * tm ** 2 + 60.0 * tm) / self.RAMP_WIDTH ** 2
        return out

    def vtilde(self, rho, theta, eta_of_rho):
        """Pullback of the core background to the cylinder: v0(z) - rho.

        On the exactly conic region (eta = 1) this is alpha*rho; across the
        cutoff annulus it follows the same profile as the core chart, so both
        charts carry one and the same metric on the overlap.
        """
        v = (self.alpha + 1.0) * eta_of_rho * rho - rho
        if self.amp != 0.0:
            v = v + self.amp * self.ramp(rho) * np.exp(-self.decay * rho) * np.cos(theta)
        return v

    def perturbation_curvature(self, rho, theta):
        """Analytic curvature of the ramped order-tau perturbation alone."""
        if self.amp == 0.0:
            return np.zeros_like(np.asarray(rho, dtype=float))
        b = self.decay
        S = self.ramp(rho)
        S1 = self.ramp_d1(rho)
        S2 = self.ramp_d2(rho)
        lap = self.amp * (S2 - 2.0 * b * S1 + (b * b - 1.0) * S) \
            * np.exp(-b * rho) * np.cos(theta)
        return -2.0 * np.exp(-2.0 * self.vtilde(rho, theta, 1.0)) * lap


def build_model(spec: ModelSpec) -> SurfaceModel:
    """Construct a punctured-torus SurfaceModel from its description.

    Raises ModelError for chi >= 0 requests (k < 1), overlapping cutoff
    annuli, truncation radii at or below the cutoff, or under-resolved grids.
    The discrete Gauss-Bonnet defect is recorded in ops.gb_defect.
    """
    k, angles, punctures, rho_min, rho_maxes = _validate_spec(spec)
    N = int(spec.resolution)
    h = 1.0 / N
    r_cut, r_in, r_out = spec.r_cut, spec.r_in, spec.r_out
    w_cut = r_out - r_in
    hole_radius = max(r_cut - 1.5 * h, 1e-4)

    ends = tuple(
        ConeEnd(angle_alpha=angles[j], order_tau=spec.perturbation_order,
                perturbation_amp=spec.perturbation_amp,
                rho_min=rho_min, rho_max=rho_maxes[j], puncture=punctures[j])
        for j in range(k))
    geoms = [_EndGeom(angles[j], spec.perturbation_order, spec.perturbation_amp)
             for j in range(k)]

    # ---- core chart ---------------------------------------------------
    xs = np.arange(N) * h
    X, Y = np.meshgrid(xs, xs, indexing="ij")
    dists = np.empty((k, N, N))
    for j, p in enumerate(punctures):
        dx, dy = _torus_delta(X, Y, p)
        dists[j] = np.hypot(dx, dy)
    jstar = np.argmin(dists, axis=0)
    dmin = np.take_along_axis(dists, jstar[None], axis=0)[0]

    def eta_of(d):
        return 1.0 - smoothstep((d - r_in) / w_cut)

    # v0 on the full core grid; clamp the radius at hole nodes so all arrays
    # stay finite (hole nodes never participate in any operator)
    v0_core = np.zeros((N, N))
    for j, p in enumerate(punctures):
        d = np.maximum(dists[j], r_cut / 4.0)
        v0_core += (angles[j] + 1.0) * eta_of(d) * (-np.log(d))

    tags_core = np.full((N, N), TAG_INTERIOR, dtype=np.uint8)
    tags_core[dmin < r_cut] = TAG_OVERLAP
    tags_core[dmin < hole_radius] = TAG_HOLE

    # partition-of-unity weight: cylinder takes over across a rho window that
    # sits strictly inside the exactly conic collar, so curvature-carrying
    # regions are integrated by exactly one chart
    rho_a = -np.log(r_in) + 0.3
    rho_b = -np.log(r_cut)
    if rho_b - rho_a < 0.2:
        raise ModelError("r_cut too close to r_in for the quadrature split")
    mu_core = np.zeros((N, N))
    for j in range(k):
        with np.errstate(divide="ignore"):
            rho_of = -np.log(np.maximum(dists[j], 1e-300))
        mu_core += smoothstep((rho_of - rho_a) / (rho_b - rho_a))
    mu_core = np.clip(mu_core, 0.0, 1.0)

    # background curvature: exact zero off the cutoff annuli, discrete
    # five-point evaluation inside a band around them (see module docstring);
    # the band stays clear of the quadrature-split window
    lap5 = (np.roll(v0_core, 1, 0) + np.roll(v0_core, -1, 0)
            + np.roll(v0_core, 1, 1) + np.roll(v0_core, -1, 1)
            - 4.0 * v0_core) / h ** 2
    band_inner = max(r_in - 2.0 * h, 1.05 * np.exp(-rho_a))
    band = (dmin >= band_inner) & (dmin <= r_out + 2.0 * h)
    R0_core = np.where(band, -2.0 * np.exp(-2.0 * v0_core) * lap5, 0.0)
    R0_core[tags_core == TAG_HOLE] = 0.0

    charts = []
    coords_core = np.column_stack([X.ravel(), Y.ravel()])
    charts.append(ChartGrid(kind="cartesian-torus-core", resolution=(N, N),
                            spacing=(h, h), node_coordinates=coords_core,
                            boundary_tags=tags_core.ravel(), offset=0))

    v0_parts = [v0_core.ravel()]
    r0_parts = [R0_core.ravel()]
    quad_parts = [((1.0 - mu_core) * np.exp(2.0 * v0_core) * h * h).ravel()]
    area_parts = [(np.exp(2.0 * v0_core) * h * h).ravel()]
    rho_hat_parts = []
    with np.errstate(divide="ignore"):
        rho_hat_core = -np.log(np.maximum(dmin, r_cut / 4.0))
    rho_hat_parts.append(rho_hat_core.ravel())
    theta_parts = [np.full(N * N, np.nan)]
    end_id_parts = [np.full(N * N, -1, dtype=np.int32)]

    # ---- cylinder charts ----------------------------------------------
    htheta = TWO_PI / N
    offset = N * N
    cyl_info = []
    for j in range(k):
        span = rho_maxes[j] - rho_min
        nrho = max(int(round(span / htheta)), 8) + 1
        hrho = span / (nrho - 1)
        rho = rho_min + hrho * np.arange(nrho)
        theta = htheta * np.arange(N)
        RHO, TH = np.meshgrid(rho, theta, indexing="ij")
        eta_rho = eta_of(np.exp(-RHO))
        vt = geoms[j].vtilde(RHO, TH, eta_rho)
        # curvature by the chart's own five-point operator: exactly zero on
        # the conic region (vtilde linear there), genuine values across the
        # annulus rows, smooth perturbation picked up automatically
        lap5c = np.empty((nrho, N))
        lap5c[1:-1] = (vt[2:] + vt[:-2] - 2.0 * vt[1:-1]) / hrho ** 2 \
            + (np.roll(vt, 1, 1)[1:-1] + np.roll(vt, -1, 1)[1:-1]
               - 2.0 * vt[1:-1]) / htheta ** 2
        r0 = np.empty((nrho, N))
        r0[1:-1] = -2.0 * np.exp(-2.0 * vt[1:-1]) * lap5c[1:-1]
        r0[0] = r0[1]
        r0[-1] = geoms[j].perturbation_curvature(RHO[-1], TH[-1])
        tags = np.full((nrho, N), TAG_INTERIOR, dtype=np.uint8)
        tags[0, :] = TAG_OVERLAP
        tags[-1, :] = TAG_TRUNCATION
        mu = smoothstep((RHO - rho_a) / (rho_b - rho_a))
        quad = mu * np.exp(2.0 * vt) * hrho * htheta
        quad[-1, :] *= 0.5  # trapezoid closure at the truncation row
        area = np.exp(2.0 * vt) * hrho * htheta

        charts.append(ChartGrid(kind="cylinder-end", resolution=(nrho, N),
                                spacing=(hrho, htheta),
                                node_coordinates=np.column_stack(
                                    [RHO.ravel(), TH.ravel()]),
                                boundary_tags=tags.ravel(), offset=offset))
        v0_parts.append(vt.ravel())
        r0_parts.append(r0.ravel())
        quad_parts.append(quad.ravel())
        area_parts.append(area.ravel())
        rho_hat_parts.append(RHO.ravel())
        theta_parts.append(TH.ravel())
        end_id_parts.append(np.full(nrho * N, j, dtype=np.int32))
        cyl_info.append((offset, nrho, N, hrho, htheta, rho, theta))
        offset += nrho * N

    n = offset
    v0 = np.concatenate(v0_parts)
    R0 = np.concatenate(r0_parts)
    quad_w = np.concatenate(quad_parts)
    area_w = np.concatenate(area_parts)
    tags = np.concatenate([c.boundary_tags for c in charts])
    einv2 = np.exp(-2.0 * v0)

    ops = _ModelOps()
    ops.core_size = N * N
    ops.einv2 = einv2
    ops.quad_weights = quad_w
    ops.rho_hat = np.concatenate(rho_hat_parts)
    ops.theta = np.concatenate(theta_parts)
    ops.end_id = np.concatenate(end_id_parts)
    ops.nearest_end = np.where(ops.end_id >= 0, ops.end_id,
                               np.concatenate(
                                   [jstar.ravel().astype(np.int32)]
                                   + end_id_parts[1:])).astype(np.int32)

    # ---- interpolation (chart_sync) matrix -----------------------------
    rows, cols, vals = [], [], []

    def core_gidx(ix, iy):
        return (ix % N) * N + (iy % N)

    # core overlap nodes read from their cylinder chart
    ov_core = np.flatnonzero(tags_core.ravel() == TAG_OVERLAP)
    for gi in ov_core:
        ix, iy = divmod(gi, N)
        z = (xs[ix], xs[iy])
        j = int(jstar[ix, iy])
        dx, dy = _torus_delta(np.array(z[0]), np.array(z[1]), punctures[j])
        rho_t = -np.log(np.hypot(dx, dy))
        th_t = np.arctan2(dy, dx) % TWO_PI
        off, nrho, ntheta, hrho, hth, rho, theta = cyl_info[j]
        fr = (rho_t - rho_min) / hrho
        i0 = int(np.floor(fr))
        ar = fr - i0
        if not (1 <= i0 <= nrho - 3):
            raise ModelError(
                "core overlap node interpolates outside the cylinder interior; "
                "increase rho_max or the resolution")
        ft = th_t / hth
        t0 = int(np.floor(ft)) % ntheta
        at = ft - np.floor(ft)
        for (di, wi) in ((0, 1.0 - ar), (1, ar)):
            for (dt, wt) in ((0, 1.0 - at), (1, at)):
                rows.append(gi)
                cols.append(off + (i0 + di) * ntheta + (t0 + dt) % ntheta)
                vals.append(wi * wt)

    # cylinder overlap row (rho_min) reads from the core chart
    for j in range(k):
        off, nrho, ntheta, hrho, hth, rho, theta = cyl_info[j]
        p = punctures[j]
        for it in range(ntheta):
            gi = off + 0 * ntheta + it
            zx = p[0] + r_out * np.cos(theta[it])
            zy = p[1] + r_out * np.sin(theta[it])
            fx, fy = zx / h, zy / h
            ix0, iy0 = int(np.floor(fx)), int(np.floor(fy))
            ax, ay = fx - ix0, fy - iy0
            for (di, wi) in ((0, 1.0 - ax), (1, ax)):
                for (dj, wj) in ((0, 1.0 - ay), (1, ay)):
                    src = core_gidx(ix0 + di, iy0 + dj)
                    if tags.ravel()[src] != TAG_INTERIOR:
                        raise ModelError(
                            "cylinder overlap node interpolates from a "
                            "non-interior core node")
                    rows.append(gi)
                    cols.append(src)
                    vals.append(wi * wj)

    P = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    # ---- flat five-point Laplacian, rows at interior nodes -------------
    lr, lc, lv = [], [], []

    core_tags2 = tags_core
    int_core = np.argwhere(core_tags2 == TAG_INTERIOR)
    ih2 = 1.0 / h ** 2
    for ix, iy in int_core:
        gi = ix * N + iy
        s = einv2[gi]
        lr += [gi] * 5
        lc += [gi, core_gidx(ix + 1, iy), core_gidx(ix - 1, iy),
               core_gidx(ix, iy + 1), core_gidx(ix, iy - 1)]
        lv += [-4.0 * ih2 * s, ih2 * s, ih2 * s, ih2 * s, ih2 * s]

    for j in range(k):
        off, nrho, ntheta, hrho, hth, rho, theta = cyl_info[j]
        ihr2, iht2 = 1.0 / hrho ** 2, 1.0 / hth ** 2
        for ir in range(1, nrho - 1):
            base = off + ir * ntheta
            for it in range(ntheta):
                gi = base + it
                s = einv2[gi]
                lr += [gi] * 5
                lc += [gi, gi - ntheta, gi + ntheta,
                       base + (it + 1) % ntheta, base + (it - 1) % ntheta]
                lv += [-2.0 * (ihr2 + iht2) * s, ihr2 * s, ihr2 * s,
                       iht2 * s, iht2 * s]

    L0 = sp.csr_matrix((lv, (lr, lc)), shape=(n, n))

    idx_interior = np.flatnonzero(tags == TAG_INTERIOR)
    idx_overlap = np.flatnonzero(tags == TAG_OVERLAP)
    idx_trunc = np.flatnonzero(tags == TAG_TRUNCATION)

    ops.lap = L0
    ops.sync = P
    ops.idx_interior = idx_interior
    ops.idx_overlap = idx_overlap
    ops.idx_trunc = idx_trunc

    LI = L0[idx_interior]
    ops.lap_red = (LI[:, idx_interior]
                   + LI[:, idx_overlap] @ P[idx_overlap][:, idx_interior]).tocsr()
    ops.lap_it = LI[:, idx_trunc].tocsr()

    # Neumann closure rows at the truncation: mirror ghost, second order
    nt = idx_trunc.size
    tr_r, tr_c, tr_v = [], [], []
    ncoeff = np.zeros(nt)
    tend = np.zeros(nt, dtype=np.int32)
    trho = np.zeros(nt)
    tinner = np.zeros(nt, dtype=np.int64)
    pos_in_unknowns = {g: i for i, g in enumerate(idx_interior)}
    pos_t = {g: i for i, g in enumerate(idx_trunc)}
    ni = idx_interior.size
    for j in range(k):
        off, nrho, ntheta, hrho, hth, rho, theta = cyl_info[j]
        ihr2, iht2 = 1.0 / hrho ** 2, 1.0 / hth ** 2
        base = off + (nrho - 1) * ntheta
        below = off + (nrho - 2) * ntheta
        for it in range(ntheta):
            gi = base + it
            ti = pos_t[gi]
            s = einv2[gi]
            tend[ti] = j
            trho[ti] = rho[-1]
            tinner[ti] = below + it
            ncoeff[ti] = s * 2.0 / hrho
            row = ni + ti
            tr_r += [row, row, row, row]
            tr_c += [ni + ti, pos_in_unknowns[below + it],
                     ni + pos_t[base + (it + 1) % ntheta],
                     ni + pos_t[base + (it - 1) % ntheta]]
            tr_v += [-2.0 * (ihr2 + iht2) * s, 2.0 * ihr2 * s, iht2 * s, iht2 * s]

    A_top = sp.hstack([ops.lap_red, ops.lap_it], format="csr")
    A_bot = sp.csr_matrix((tr_v, (np.array(tr_r) - ni, tr_c)), shape=(nt, ni + nt))
    ops.lap_neumann = sp.vstack([A_top, A_bot], format="csr")
    ops.neumann_coeff = ncoeff
    ops.trunc_end = tend
    ops.trunc_rho = trho
    ops.trunc_inner = tinner

    # ---- anchor node and gauge bump ------------------------------------
    far = dmin.ravel().copy()
    far[tags_core.ravel() != TAG_INTERIOR] = -1.0
    ops.anchor_index = int(np.argmax(far))
    bump = np.zeros(n)
    zb = coords_core[ops.anchor_index]
    dxb, dyb = _torus_delta(X, Y, zb)
    db = np.hypot(dxb, dyb)
    bump[: N * N] = smoothstep(1.0 - db / 0.15).ravel()
    ops.bump = bump

    # ---- distance graph -------------------------------------------------
    ops.edges = _build_distance_edges(tags, charts, cyl_info, v0, N, h, r_in,
                                      punctures)

    ops.gb_defect = abs(float(quad_w @ R0)
                        - 4.0 * np.pi * (-k - float(np.sum(angles))))
    ops.freeze()

    model = SurfaceModel(
        euler_char=-k,
        ends=ends,
        charts=tuple(charts),
        background_log_factor=v0,
        background_curvature=R0,
        area_weights=area_w,
        laplacian_stencil=L0,
        boundary_tags=tags,
        spec=spec,
        ops=ops,
    )
    for arr in (v0, R0, area_w, tags, quad_w):
        arr.setflags(write=False)
    return model


def build_cone_fixture(alpha=1.0, resolution=64, length=6.0) -> SurfaceModel:
    """Single-chart exact-cone cylinder fixture (solver smoke tests only).

    Both rho edges are truncation rows, vtilde = alpha*rho, R0 = 0.  The
    fixture bypasses the chi < 0 requirement; it is not a valid flow target,
    just a stationary-solution test bed.
    """
    if alpha <= 0:
        raise ModelError("alpha must be positive")
    N = int(resolution)
    if N < 16:
        raise ModelError("resolution below the minimum of 16 per direction")
    htheta = TWO_PI / N
    nrho = max(int(round(length / htheta)), 8) + 1
    hrho = length / (nrho - 1)
    rho = hrho * np.arange(nrho)
    theta = htheta * np.arange(N)
    RHO, TH = np.meshgrid(rho, theta, indexing="ij")
    vt = alpha * RHO
    tags = np.full((nrho, N), TAG_INTERIOR, dtype=np.uint8)
    tags[0, :] = TAG_TRUNCATION
    tags[-1, :] = TAG_TRUNCATION
    chart = ChartGrid(kind="cylinder-end", resolution=(nrho, N),
                      spacing=(hrho, htheta),
                      node_coordinates=np.column_stack([RHO.ravel(), TH.ravel()]),
                      boundary_tags=tags.ravel(), offset=0)
    n = nrho * N
    v0 = vt.ravel()
    einv2 = np.exp(-2.0 * v0)
    quad = (np.exp(2.0 * vt) * hrho * htheta)
    quad[0, :] *= 0.5
    quad[-1, :] *= 0.5
    area = np.exp(2.0 * vt) * hrho * htheta

    lr, lc, lv = [], [], []
    ihr2, iht2 = 1.0 / hrho ** 2, 1.0 / htheta ** 2
    for ir in range(1, nrho - 1):
        base = ir * N
        for it in range(N):
            gi = base + it
            s = einv2[gi]
            lr += [gi] * 5
            lc += [gi, gi - N, gi + N, base + (it + 1) % N, base + (it - 1) % N]
            lv += [-2.0 * (ihr2 + iht2) * s, ihr2 * s, ihr2 * s, iht2 * s, iht2 * s]
    L0 = sp.csr_matrix((lv, (lr, lc)), shape=(n, n))

    flat_tags = tags.ravel()
    idx_interior = np.flatnonzero(flat_tags == TAG_INTERIOR)
    idx_trunc = np.flatnonzero(flat_tags == TAG_TRUNCATION)

    ops = _ModelOps()
    ops.core_size = 0
    ops.einv2 = einv2
    ops.quad_weights = quad.ravel()
    ops.rho_hat = RHO.ravel()
    ops.theta = TH.ravel()
    ops.end_id = np.zeros(n, dtype=np.int32)
    ops.nearest_end = np.zeros(n, dtype=np.int32)
    ops.lap = L0
    ops.sync = sp.csr_matrix((n, n))
    ops.idx_interior = idx_interior
    ops.idx_overlap = np.array([], dtype=np.int64)
    ops.idx_trunc = idx_trunc
    LI = L0[idx_interior]
    ops.lap_red = LI[:, idx_interior].tocsr()
    ops.lap_it = LI[:, idx_trunc].tocsr()
    ops.anchor_index = int(idx_interior[0])
    ops.bump = np.zeros(n)
    ops.edges = _cylinder_edges(0, nrho, N, hrho, htheta, v0, flat_tags)
    ops.gb_defect = abs(float(ops.quad_weights @ np.zeros(n)))
    ops.freeze()

    end = ConeEnd(angle_alpha=alpha, order_tau=1.0, perturbation_amp=0.0,
                  rho_min=0.0, rho_max=length, puncture=(np.nan, np.nan))
    model = SurfaceModel(
        euler_char=0, ends=(end,), charts=(chart,),
        background_log_factor=v0, background_curvature=np.zeros(n),
        area_weights=area.ravel(), laplacian_stencil=L0,
        boundary_tags=flat_tags, spec=ModelSpec(resolution=N), ops=ops)
    for arr in (model.background_curvature,):
        arr.setflags(write=False)
    return model


def _cylinder_edges(off, nrho, ntheta, hrho, htheta, v0, tags):
    """8-neighbor edges within one cylinder chart (theta periodic)."""
    ii, jj, ll = [], [], []
    idx = off + np.arange(nrho * ntheta).reshape(nrho, ntheta)
    diag = np.hypot(hrho, htheta)
    for (di, dt, length) in ((1, 0, hrho), (0, 1, htheta),
                             (1, 1, diag), (1, -1, diag)):
        if di:
            a = idx[:-di, :]
            b = np.roll(idx, -dt, axis=1)[di:, :]
        else:
            a = idx
            b = np.roll(idx, -dt, axis=1)
        ii.append(a.ravel())
        jj.append(b.ravel())
        ll.append(np.full(a.size, length))
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    l = np.concatenate(ll)
    keep = (tags[i] != TAG_HOLE) & (tags[j] != TAG_HOLE) & (i != j)
    i, j, l = i[keep], j[keep], l[keep]
    return i, j, l, np.exp(v0[i]), np.exp(v0[j])


def _build_distance_edges(tags, charts, cyl_info, v0, N, h, r_in, punctures):
    """Edge arrays (i, j, flat length, endpoint background factors)."""
    parts_i, parts_j, parts_l, parts_ai, parts_aj = [], [], [], [], []

    # core chart, periodic 8-neighbor
    idx = np.arange(N * N).reshape(N, N)
    diag = h * np.sqrt(2.0)
    for (sx, sy, length) in ((1, 0, h), (0, 1, h), (1, 1, diag), (1, -1, diag)):
        a = idx
        b = np.roll(np.roll(idx, -sx, axis=0), -sy, axis=1)
        i, j = a.ravel(), b.ravel()
        keep = (tags[i] != TAG_HOLE) & (tags[j] != TAG_HOLE)
        i, j = i[keep], j[keep]
        parts_i.append(i)
        parts_j.append(j)
        parts_l.append(np.full(i.size, length))
        parts_ai.append(np.exp(v0[i]))
        parts_aj.append(np.exp(v0[j]))

    for jend, info in enumerate(cyl_info):
        off, nrho, ntheta, hrho, hth, rho, theta = info
        i, j, l, ai, aj = _cylinder_edges(off, nrho, ntheta, hrho, hth, v0, tags)
        parts_i.append(i)
        parts_j.append(j)
        parts_l.append(l)
        parts_ai.append(ai)
        parts_aj.append(aj)

        # bridge edges stitch the cylinder row nearest rho=-log(r_in) to the
        # four surrounding core nodes, measured in core coordinates
        ib = int(np.argmin(np.abs(rho - (-np.log(r_in)))))
        p = punctures[jend]
        s = np.exp(-rho[ib])
        for it in range(ntheta):
            gi = off + ib * ntheta + it
            zx = (p[0] + s * np.cos(theta[it])) % 1.0
            zy = (p[1] + s * np.sin(theta[it])) % 1.0
            fx, fy = zx / h, zy / h
            ix0, iy0 = int(np.floor(fx)), int(np.floor(fy))
            # cylinder endpoint factor expressed for a segment in core coords
            a_cyl = np.exp(v0[gi] + rho[ib])
            for di in (0, 1):
                for dj in (0, 1):
                    gj = ((ix0 + di) % N) * N + (iy0 + dj) % N
                    if tags[gj] == TAG_HOLE:
                        continue
                    ddx = zx - ((ix0 + di) % N) * h
                    ddy = zy - ((iy0 + dj) % N) * h
                    ddx -= np.round(ddx)
                    ddy -= np.round(ddy)
                    parts_i.append(np.array([gi]))
                    parts_j.append(np.array([gj]))
                    parts_l.append(np.array([np.hypot(ddx, ddy)]))
                    parts_ai.append(np.array([a_cyl]))
                    parts_aj.append(np.array([np.exp(v0[gj])]))

    return (np.concatenate(parts_i), np.concatenate(parts_j),
            np.concatenate(parts_l), np.concatenate(parts_ai),
            np.concatenate(parts_aj))


# --------------------------------------------------------------------------
# operators
# --------------------------------------------------------------------------

def _check_positive(u):
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("field contains non-finite values")
    if np.any(u <= 0.0):
        raise ValueError("conformal factor must be positive at every node")
    return u


def chart_sync(model: SurfaceModel, fields):
    """Fill overlap nodes with bilinear interpolation from the partner chart.

    Accepts either the global flat vector or a list with one flat array per
    chart; returns the same form.  Idempotent up to O(h^2) on data sampled
    from a single smooth global function.
    """
    as_list = isinstance(fields, (list, tuple))
    if as_list:
        if len(fields) != len(model.charts):
            raise ValueError(
                f"need one field per chart ({len(model.charts)}), got {len(fields)}")
        glob = np.empty(model.n_nodes)
        for c, f in zip(model.charts, fields):
            f = np.asarray(f, dtype=float).ravel()
            if f.size != c.size:
                raise ValueError("field size does not match chart size")
            glob[c.slice] = f
    else:
        glob = np.array(fields, dtype=float)
        if glob.shape != (model.n_nodes,):
            raise ValueError("global field has wrong length")
    if not np.all(np.isfinite(glob[model.active_mask])):
        raise ValueError("field contains non-finite values on active nodes")
    ov = model.ops.idx_overlap
    if ov.size:
        glob[ov] = (model.ops.sync @ glob)[ov]
    if as_list:
        return [glob[c.slice].copy() for c in model.charts]
    return glob


def sync_defect(model: SurfaceModel, field):
    """Max absolute mismatch between overlap values and fresh interpolation."""
    ov = model.ops.idx_overlap
    if ov.size == 0:
        return 0.0
    return float(np.max(np.abs(field[ov] - (model.ops.sync @ field)[ov])))


def laplacian_apply(model: SurfaceModel, field, check_sync=True):
    """Apply the background Laplacian Delta_0 = exp(-2 v0) * (flat 5-point).

    Returns a full vector with values at interior rows and zeros elsewhere.
    The input must already be synchronized across overlaps; a loose seatbelt
    check flags grossly unsynchronized data.
    """
    f = np.asarray(field, dtype=float)
    if f.shape != (model.n_nodes,):
        raise ValueError("field has wrong length")
    if not np.all(np.isfinite(f[model.active_mask])):
        raise ValueError("field contains non-finite values on active nodes")
    if check_sync and model.ops.idx_overlap.size:
        act = f[model.active_mask]
        scale = float(np.max(act) - np.min(act)) if act.size else 0.0
        hmax = max(max(c.spacing) for c in model.charts)
        tol = max(1e-9, 10.0 * hmax ** 2 * scale)
        if sync_defect(model, f) > tol:
            raise ValueError("overlap values are not synchronized")
    return model.ops.lap @ f


def _fill_nonstencil(model, vec):
    """Extend an interior-row field to overlap (interpolation) and truncation
    (copy of the row just inside) nodes."""
    out = vec.copy()
    ov = model.ops.idx_overlap
    if ov.size:
        out[ov] = (model.ops.sync @ out)[ov]
    it = model.ops.idx_trunc
    if it.size and model.ops.trunc_inner is not None:
        out[it] = out[model.ops.trunc_inner]
    return out


def scalar_curvature(model: SurfaceModel, u):
    """Scalar curvature of u*g0: R = (R0 - Delta_0 log u) / u.

    With u identically 1 this returns R0 exactly.  Values at overlap nodes are
    interpolated from the partner chart; truncation rows copy the adjacent
    interior row (the closure pins u there, so no stencil applies).
    """
    u = _check_positive(u)
    phi = np.log(u)
    lap = laplacian_apply(model, phi, check_sync=False)
    R = np.zeros(model.n_nodes)
    mi = model.interior_mask
    R[mi] = (model.background_curvature[mi] - lap[mi]) / u[mi]
    R = _fill_nonstencil(model, R)
    R[model.hole_mask] = 0.0
    return R


def total_curvature(model: SurfaceModel, u):
    """Integral of R dA over the truncated surface plus the analytic tail.

    In two dimensions R dA = (R0 - Delta_0 log u) dA0, so the value is
    conformal-scale invariant.  The exact-cone tail beyond the truncation
    contributes zero: the background is flat there and the optional end
    perturbation has zero circular mean, hence no flux.
    """
    u = _check_positive(u)
    phi = np.log(u)
    lap = laplacian_apply(model, phi, check_sync=False)
    integrand = model.background_curvature - lap
    # truncation rows: the Dirichlet closure pins u to a theta-independent
    # profile, Delta_0 log u is exponentially small there
    integrand[model.ops.idx_trunc] = \
        model.background_curvature[model.ops.idx_trunc]
    w = model.ops.quad_weights
    return float(np.dot(w, np.where(model.active_mask, integrand, 0.0)))


def _distance_graph(model: SurfaceModel, u):
    i, j, l, ai, aj = model.ops.edges
    su = np.sqrt(u)
    wts = l * 0.5 * (ai * su[i] + aj * su[j])
    n = model.n_nodes
    G = sp.csr_matrix((wts, (i, j)), shape=(n, n))
    return G


def distance_field(model: SurfaceModel, u, sources):
    """Graph geodesic distances from source nodes to all nodes (one row each)."""
    u = _check_positive(u)
    G = _distance_graph(model, u)
    return _csgraph_dijkstra(G, directed=False, indices=np.atleast_1d(sources))


def geodesic_distance(model: SurfaceModel, u, x1, x2):
    """Shortest-path distance between nodes x1, x2 in the metric u*g0.

    Dijkstra on the 8-neighbor graph with edge lengths weighted by the
    endpoint-averaged conformal factor; symmetric and triangle-inequality
    consistent on the graph.  The graph metric systematically overestimates
    the continuum distance by at most about 8 percent.
    """
    if model.boundary_tags[x1] == TAG_HOLE or model.boundary_tags[x2] == TAG_HOLE:
        raise ValueError("distance requested at an excluded (hole) node")
    if x1 == x2:
        return 0.0
    d = distance_field(model, u, [x1])[0, x2]
    if not np.isfinite(d):
        raise RuntimeError("node pair is disconnected: corrupt model graph")
    return float(d)
