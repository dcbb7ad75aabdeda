"""Shared implicit-solve machinery: sparse factorizations and damped Newton.

The composite two-chart discretization couples the charts through thin
interpolation bands, which breaks exact operator symmetry, so all linear
systems go through a sparse direct factorization (SuperLU).  Jacobians of the
backward-Euler steps differ only in their diagonal between Newton iterations
and often between consecutive time steps, so factorizations are reused
chord-style and refreshed when the convergence rate degrades.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Newton or linear-solve failure."""


def weighted_norm(weights, r):
    """L2(dA0) norm of a residual sampled on the weighted nodes."""
    return float(np.sqrt(np.dot(weights, r * r)))


def anchored(A, anchor_row):
    """Replace one equation by an identity row to pin the constant mode."""
    n = A.shape[0]
    mask = np.ones(n)
    mask[anchor_row] = 0.0
    pin = sp.csr_matrix(([1.0], ([anchor_row], [anchor_row])), shape=A.shape)
    return (sp.diags(mask) @ A + pin).tocsr()


def lu_solve(A, rhs):
    lu = spla.splu(A.tocsc())
    x = lu.solve(rhs)
    if not np.all(np.isfinite(x)):
        raise SolverError("direct linear solve produced non-finite values")
    return x


def anchor_pos(model):
    """Row of the anchor node within the [interior; truncation] unknown set."""
    pos = int(np.searchsorted(model.ops.idx_interior, model.ops.anchor_index))
    if model.ops.idx_interior[pos] != model.ops.anchor_index:
        raise SolverError("anchor node is not an interior unknown")
    return pos


def left_null_vector(model):
    """Left null vector of the Neumann-closed composite operator.

    The operator annihilates constants, so its transpose has a one-dimensional
    null space; the vector represents the discrete area functional that a
    source must annihilate (after flux data is subtracted) for the linear
    system to be exactly compatible.  Cached on the model.
    """
    ops = model.ops
    if getattr(ops, "left_null", None) is not None:
        return ops.left_null
    B = ops.lap_neumann
    a = anchor_pos(model)
    At = anchored(B.T.tocsr(), a)
    rhs = np.zeros(B.shape[0])
    rhs[a] = 1.0
    w = lu_solve(At, rhs)
    leak = float(abs((B.T @ w)[a]))
    scale = float(np.max(np.abs(w)))
    if leak > 1e-8 * scale:
        raise SolverError(
            f"left null vector residual {leak:.2e} too large; "
            "composite operator is not rank deficient by exactly one")
    ops.left_null = w
    return w


class LUCache:
    """Holds the latest factorization of a step Jacobian for chord reuse."""

    def __init__(self):
        self.lu = None
        self.dt = None

    def factor(self, A, dt):
        self.lu = spla.splu(A.tocsc())
        self.dt = dt
        return self.lu

    def usable(self, dt):
        return self.lu is not None and self.dt == dt


class CachedLinearSolve:
    """Direct solve with factorization reuse via iterative refinement.

    Linear systems whose matrix drifts slowly between calls (the heat step of
    the potential) are solved with the cached factorization plus a few
    refinement sweeps; the matrix is refactored when refinement stops
    contracting.
    """

    def __init__(self, rtol=1e-12, max_refine=8):
        self.lu = None
        self.rtol = rtol
        self.max_refine = max_refine

    def reset(self):
        self.lu = None

    def solve(self, A, rhs):
        scale = float(np.linalg.norm(rhs)) + 1.0
        if self.lu is None:
            self.lu = spla.splu(A.tocsc())
            x = self.lu.solve(rhs)
        else:
            x = self.lu.solve(rhs)
            r = rhs - A @ x
            nr = float(np.linalg.norm(r))
            for _ in range(self.max_refine):
                if nr <= self.rtol * scale:
                    break
                x = x + self.lu.solve(r)
                r = rhs - A @ x
                nr_new = float(np.linalg.norm(r))
                if nr_new > 0.1 * nr:
                    self.lu = spla.splu(A.tocsc())
                    x = self.lu.solve(rhs)
                    break
                nr = nr_new
            else:
                self.lu = spla.splu(A.tocsc())
                x = self.lu.solve(rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("refined linear solve produced non-finite values")
        return x


def implicit_conformal_step(model, u_old, dt, *, rescaled, bc_log_trunc,
                            tol, max_iter, cache=None):
    """One backward-Euler step of the conformal flow, solved in phi = log u.

    Raw mode solves      u+ - dt*(Delta_0 log u+ - R0)      = u,
    rescaled mode solves u+ - dt*(Delta_0 log u+ - R0 - u+) = u,
    with Dirichlet data exp(bc_log_trunc) held on truncation rows.  Returns
    (u_full, newton_iters); the output field is synchronized in log space,
    which keeps positivity structural.  Raises SolverError if the damped
    (chord) Newton iteration cannot reach `tol` in the area-weighted residual
    norm within `max_iter` iterations.
    """
    ops = model.ops
    iI = ops.idx_interior
    wI = model.area_weights[iI]
    r0I = model.background_curvature[iI]
    uoldI = u_old[iI]
    coef = 1.0 + dt if rescaled else 1.0
    bT = ops.lap_it @ bc_log_trunc if bc_log_trunc.size else 0.0

    def residual(phi):
        return coef * np.exp(phi) - dt * (ops.lap_red @ phi + bT) \
            + dt * r0I - uoldI

    phi = np.log(uoldI)
    r = residual(phi)
    nr = weighted_norm(wI, r)
    lu = cache.lu if (cache is not None and cache.usable(dt)) else None
    iters = 0
    while nr > tol:
        if iters >= max_iter:
            raise SolverError(
                f"Newton stalled at residual {nr:.3e} after {iters} iterations")
        if lu is None:
            J = sp.diags(coef * np.exp(phi)) - dt * ops.lap_red
            lu = cache.factor(J, dt) if cache is not None \
                else spla.splu(J.tocsc())
        delta = -lu.solve(r)
        step = 1.0
        for _ in range(40):
            phi_try = phi + step * delta
            r_try = residual(phi_try)
            nr_try = weighted_norm(wI, r_try)
            if np.isfinite(nr_try) and nr_try < nr:
                break
            step *= 0.5
        else:
            raise SolverError("Newton line search failed to reduce the residual")
        slow = nr_try > 1e-3 * nr
        phi, r, nr = phi_try, r_try, nr_try
        iters += 1
        if slow and nr > tol:
            lu = None  # refactor unless the current direction superconverges
    u = np.empty(model.n_nodes)
    phi_full = np.zeros(model.n_nodes)
    phi_full[iI] = phi
    if ops.idx_trunc.size:
        phi_full[ops.idx_trunc] = bc_log_trunc
    if ops.idx_overlap.size:
        phi_full[ops.idx_overlap] = (ops.sync @ phi_full)[ops.idx_overlap]
    u = np.exp(phi_full)
    u[model.hole_mask] = 1.0
    if not np.all(np.isfinite(u[model.active_mask])):
        bad = int(np.argmax(~np.isfinite(u)))
        raise SolverError(f"positivity/finiteness lost at node {bad}")
    return u, max(iters, 1)
