"""Elliptic solves with prescribed end asymptotics.

Four solvers share the composite-grid operator machinery:

  * solve_potential:   Delta_0 f = source with log-growth flux closure,
  * evolve_potential:  backward-Euler heat step of the flow potential,
  * gauge_nonpositive: bounded conformal gauge psi with Delta_0 psi >= R0/2,
  * uniformize_oracle: the Liouville uniformizer with curvature -1, used as
    independent ground truth for the rescaled-flow limit.

A solution of Delta_0 f = src behaves like beta_j log r + gamma_j on end j,
and log r = alpha*rho - log alpha in cylinder coordinates, so the discrete
closure imposes d f / d rho = beta_j * alpha_j at the truncation via a
second-order mirror ghost.  The total flux is fixed by the divergence
theorem, sum_j 2 pi alpha_j beta_j = integral of the source; the split among
several ends is not determined by the equation and is taken equal across
ends (beta_j identical), which reproduces the single-end value exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import _solvers
from .surface import SurfaceModel, laplacian_apply, smoothstep

SQRT2 = np.sqrt(2.0)


@dataclass(frozen=True)
class EndAsymptotics:
    """Per-end log coefficient beta_j and constant gamma_j of an elliptic solve."""

    beta: np.ndarray
    gamma: np.ndarray


@dataclass(frozen=True)
class PotentialState:
    """Flow potential f(t), its initial value f0, and h = Delta f + |grad f|^2."""

    f: np.ndarray
    f0: np.ndarray
    h: np.ndarray
    grad_norm_max: float
    flux_beta: np.ndarray


def _source_integral(model, source):
    w = model.ops.quad_weights
    return float(np.dot(w, np.where(model.active_mask, source, 0.0)))


def _neumann_data(model, beta):
    """Per truncation node: flux datum g = beta_j * alpha_j of its end."""
    alphas = model.alphas
    te = model.ops.trunc_end
    return beta[te] * alphas[te]


def _full_from_unknowns(model, x):
    ops = model.ops
    ni = ops.idx_interior.size
    out = np.zeros(model.n_nodes)
    out[ops.idx_interior] = x[:ni]
    out[ops.idx_trunc] = x[ni:]
    if ops.idx_overlap.size:
        out[ops.idx_overlap] = (ops.sync @ out)[ops.idx_overlap]
    return out


def gradient_sq_flat(model, f):
    """|grad f|^2 in chart-flat coordinates, central differences at interior."""
    out = np.zeros(model.n_nodes)
    for chart in model.charts:
        n0, n1 = chart.resolution
        h0, h1 = chart.spacing
        F = f[chart.slice].reshape(n0, n1)
        if chart.kind == "cartesian-torus-core":
            d0 = (np.roll(F, -1, 0) - np.roll(F, 1, 0)) / (2 * h0)
            d1 = (np.roll(F, -1, 1) - np.roll(F, 1, 1)) / (2 * h1)
        else:
            d0 = np.zeros_like(F)
            d0[1:-1] = (F[2:] - F[:-2]) / (2 * h0)
            d1 = (np.roll(F, -1, 1) - np.roll(F, 1, 1)) / (2 * h1)
        out[chart.slice] = (d0 * d0 + d1 * d1).ravel()
    out[~model.interior_mask] = 0.0
    return out


def _flux_split_beta(model, src_unknowns):
    """Equal-split log coefficient making the discrete system compatible.

    The discrete divergence theorem fixes the imposed truncation flux: pairing
    the equations with the operator's left null vector must annihilate the
    right-hand side.  With the equal split (one beta for all ends) this pins
    beta = <w, src> / <w, data coefficients>, the graph-exact version of
    sum_j 2 pi alpha_j beta_j = integral of the source.
    """
    ops = model.ops
    w = _solvers.left_null_vector(model)
    ni = ops.idx_interior.size
    dcoef = np.zeros(w.size)
    dcoef[ni:] = ops.neumann_coeff * model.alphas[ops.trunc_end]
    denom = float(np.dot(w, dcoef))
    return float(np.dot(w, src_unknowns)) / denom


def solve_potential(model: SurfaceModel, source):
    """Solve Delta_0 f = source with flux-matched Neumann closure.

    Returns (f, EndAsymptotics) with f anchored to zero at a fixed interior
    node.  The returned betas satisfy the discrete flux law by construction
    (see _flux_split_beta), whose continuum limit is
    sum_j 2 pi alpha_j beta_j = integral of the source.
    """
    source = np.asarray(source, dtype=float)
    if not np.all(np.isfinite(source[model.active_mask])):
        raise ValueError("source is not integrable: non-finite values")
    ops = model.ops
    if ops.trunc_inner is None:
        raise ValueError("elliptic solves need a punctured-torus model")
    ni = ops.idx_interior.size
    src_unknowns = np.concatenate(
        [source[ops.idx_interior], source[ops.idx_trunc]])
    beta = np.full(len(model.ends), _flux_split_beta(model, src_unknowns))
    g = _neumann_data(model, beta)

    rhs = src_unknowns.copy()
    rhs[ni:] -= ops.neumann_coeff * g
    apos = _solvers.anchor_pos(model)
    A = _solvers.anchored(ops.lap_neumann, apos)
    rhs[apos] = 0.0
    x = _solvers.lu_solve(A, rhs)
    f = _full_from_unknowns(model, x)

    gamma = np.empty(len(model.ends))
    for j, end in enumerate(model.ends):
        sel = ops.trunc_end == j
        rho_fit = ops.trunc_rho[sel][0] - _trunc_hrho(model, j)
        inner = ops.trunc_inner[sel]
        logr = end.angle_alpha * rho_fit - np.log(end.angle_alpha)
        gamma[j] = float(np.mean(f[inner])) - beta[j] * logr
    return f, EndAsymptotics(beta=beta, gamma=gamma)


def _trunc_hrho(model, j):
    # cylinder chart for end j is chart j+1 on punctured models
    chart = model.charts[j + 1] if len(model.charts) > 1 else model.charts[0]
    return chart.spacing[0]


def initial_potential(model: SurfaceModel, u0=None):
    """Potential of the initial metric: Delta_{g(0)} f0 = R(g(0))."""
    if u0 is None:
        source = model.background_curvature.copy()
    else:
        phi = np.log(u0)
        source = model.background_curvature - laplacian_apply(
            model, phi, check_sync=False)
        source[~model.interior_mask] = \
            model.background_curvature[~model.interior_mask]
    f0, asym = solve_potential(model, source)
    u = np.ones(model.n_nodes) if u0 is None else u0
    h, gmax = _h_field(model, f0, u)
    return PotentialState(f=f0, f0=f0, h=h, grad_norm_max=gmax,
                          flux_beta=asym.beta)


def _h_field(model, f, u):
    lap = laplacian_apply(model, f, check_sync=False)
    gsq = gradient_sq_flat(model, f)
    mi = model.interior_mask
    h = np.zeros(model.n_nodes)
    h[mi] = (lap[mi] + model.ops.einv2[mi] * gsq[mi]) / u[mi]
    gmax = float(np.sqrt(np.max(
        model.ops.einv2[mi] * gsq[mi] / u[mi]))) if mi.any() else 0.0
    return h, gmax


def evolve_potential(model: SurfaceModel, pot: PotentialState, state, dt,
                     _cache=None):
    """Backward-Euler step of the heat flow d f / dt = Delta_{g(t)} f.

    `state` must be the conformal flow state at the new time; the flux data
    of the end closure is carried unchanged from the initial potential, since
    the total curvature integral is conserved along the flow.
    """
    ops = model.ops
    u = state.u
    g = _neumann_data(model, pot.flux_beta)
    ni = ops.idx_interior.size
    uin = np.concatenate([u[ops.idx_interior], u[ops.idx_trunc]])
    n_unk = uin.size
    A = sp.identity(n_unk, format="csr") \
        - dt * sp.diags(1.0 / uin) @ ops.lap_neumann
    rhs = np.concatenate([pot.f[ops.idx_interior], pot.f[ops.idx_trunc]])
    rhs[ni:] += dt * ops.neumann_coeff * g / uin[ni:]
    x = _cache.solve(A, rhs) if _cache is not None else _solvers.lu_solve(A, rhs)
    f = _full_from_unknowns(model, x)
    h, gmax = _h_field(model, f, u)
    return PotentialState(f=f, f0=pot.f0, h=h, grad_norm_max=gmax,
                          flux_beta=pot.flux_beta)


def gauge_nonpositive(model: SurfaceModel, tol=1e-10):
    """Bounded psi with Delta_0 psi >= R0/2, so exp(2 psi) g0 has R <= 0.

    Construction: pick Q = R0/2 + m * bump with the unique m > 0 making the
    quadrature integral of Q vanish (possible because the total curvature is
    negative), solve Delta_0 psi = Q.  Zero total flux forces the log-growth
    coefficients to vanish under the equal-split closure, so psi is bounded;
    it is normalized to zero mean over the truncation rows so gauged initial
    data still matches the Dirichlet-one closure on the ends.
    """
    R0 = model.background_curvature
    if float(np.max(R0[model.active_mask])) <= 0.0:
        return np.zeros(model.n_nodes)
    ops = model.ops
    half = 0.5 * R0

    # balance Q against the operator's own area functional, so the flux
    # closure gets beta = 0 to machine precision and psi is strictly bounded
    def functional(field):
        return float(np.dot(_solvers.left_null_vector(model), np.concatenate(
            [field[ops.idx_interior], field[ops.idx_trunc]])))

    total = functional(half)
    if total >= 0.0:
        raise _solvers.SolverError(
            "cannot build the gauge source: total curvature is nonnegative")
    m = -total / functional(ops.bump)
    Q = half + m * ops.bump
    psi, asym = solve_potential(model, Q)
    if np.max(np.abs(asym.beta)) * float(np.max(model.alphas)) \
            * (model.ends[0].rho_max - model.ends[0].rho_min) > 0.5:
        raise _solvers.SolverError(
            "gauge log-cancellation left residual growth on an end; "
            "model resolution is too coarse")
    wt = model.area_weights[model.ops.idx_trunc]
    psi = psi - float(np.dot(wt, psi[model.ops.idx_trunc]) / np.sum(wt))
    defect = laplacian_apply(model, psi, check_sync=False) - half
    worst = float(np.min(defect[model.interior_mask]))
    if worst < -max(tol, 1e-8) * max(1.0, float(np.max(np.abs(Q)))):
        raise _solvers.SolverError(
            f"gauge construction failed to dominate R0/2 (defect {worst:.2e})")
    return psi


def uniformize_oracle(model: SurfaceModel, tol=1e-8, max_iter=60,
                      return_info=False):
    """Independent Liouville uniformizer: solves R(U g0) = -1.

    Damped Newton on Delta_0 phi - R0/2 - exp(2 phi)/2 = 0 with a cusp
    closure at the truncation.  The exact cusp profiles
    phi = log(2)/2 - log(rho + rho0) - alpha rho solve the equation on the
    conic region for every shift rho0, and they all satisfy the nonlinear
    Robin relation d phi / d rho = -alpha - exp(phi + alpha rho)/sqrt(2),
    which is therefore imposed on the truncation rows instead of fitting the
    shift.  Returns U = exp(2 phi) with residual <= tol in the weighted
    2-norm.
    """
    if model.euler_char >= 0:
        raise ValueError("uniformization requires chi(M) < 0")
    ops = model.ops
    alphas = model.alphas
    iI, iT = ops.idx_interior, ops.idx_trunc
    ni, nt = iI.size, iT.size
    r0I = model.background_curvature[iI]
    wI = model.area_weights[iI]
    wT = model.area_weights[iT]
    hrho_T = np.array([_trunc_hrho(model, j) for j in range(len(model.ends))])
    hr = hrho_T[ops.trunc_end]
    alpha_T = alphas[ops.trunc_end]
    rho_mid = ops.trunc_rho - 0.5 * hr
    pos_I = np.searchsorted(iI, ops.trunc_inner)

    def residuals(phiI, phiT):
        FI = ops.lap_red @ phiI + ops.lap_it @ phiT - 0.5 * r0I \
            - 0.5 * np.exp(2.0 * phiI)
        phi_in = phiI[pos_I]
        E = np.exp(0.5 * (phiT + phi_in) + alpha_T * rho_mid) / SQRT2
        FT = (phiT - phi_in) / hr + alpha_T + E
        return FI, FT, E

    def norm(FI, FT):
        return float(np.sqrt(np.dot(wI, FI * FI) + np.dot(wT, FT * FT)))

    def newton(phiI, phiT):
        FI, FT, E = residuals(phiI, phiT)
        nr = norm(FI, FT)
        history = [nr]
        for it in range(max_iter):
            if nr <= tol:
                return phiI, phiT, history
            JII = ops.lap_red - sp.diags(np.exp(2.0 * phiI))
            JTI = sp.csr_matrix((-1.0 / hr + 0.5 * E,
                                 (np.arange(nt), pos_I)), shape=(nt, ni))
            JTT = sp.diags(1.0 / hr + 0.5 * E)
            J = sp.bmat([[JII, ops.lap_it], [JTI, JTT]], format="csc")
            delta = _solvers.lu_solve(J, -np.concatenate([FI, FT]))
            step = 1.0
            for _ in range(40):
                pI = phiI + step * delta[:ni]
                pT = phiT + step * delta[ni:]
                FI2, FT2, E2 = residuals(pI, pT)
                nr2 = norm(FI2, FT2)
                if np.isfinite(nr2) and nr2 < nr:
                    break
                step *= 0.5
            else:
                raise _solvers.SolverError(
                    f"oracle Newton line search failed (residuals {history})")
            phiI, phiT, FI, FT, E, nr = pI, pT, FI2, FT2, E2, nr2
            history.append(nr)
        raise _solvers.SolverError(
            f"oracle Newton did not reach {tol:.1e}; residuals {history}")

    psi = gauge_nonpositive(model)
    rho_hat = ops.rho_hat
    alpha_node = alphas[ops.nearest_end]
    cusp = 0.5 * np.log(2.0) - np.log(rho_hat + 1.0) - alpha_node * rho_hat
    blend = smoothstep((rho_hat - 2.3) / 1.7)
    guesses = [(1.0 - blend) * (psi - 1.0) + blend * cusp, cusp]

    last_err = None
    for guess in guesses:
        try:
            phiI, phiT, history = newton(guess[iI], guess[iT])
            break
        except _solvers.SolverError as err:
            last_err = err
    else:
        raise _solvers.SolverError(
            f"oracle Newton diverged from all initial profiles: {last_err}")

    phi = np.zeros(model.n_nodes)
    phi[iI] = phiI
    phi[iT] = phiT
    if ops.idx_overlap.size:
        phi[ops.idx_overlap] = (ops.sync @ phi)[ops.idx_overlap]
    U = np.exp(2.0 * phi)
    U[model.hole_mask] = 1.0
    if return_info:
        shift = np.empty(len(model.ends))
        for j, end in enumerate(model.ends):
            sel = ops.trunc_end == j
            rho_fit = ops.trunc_rho[sel][0] - hrho_T[j]
            pbar = float(np.mean(phi[ops.trunc_inner[sel]]))
            shift[j] = np.exp(0.5 * np.log(2.0) - pbar
                              - end.angle_alpha * rho_fit) - rho_fit
        info = {"residuals": history, "phi": phi, "cusp_shift": shift}
        return U, info
    return U
