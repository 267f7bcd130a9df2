"""Sub-Riemannian distances, ball volumes and the comparison checks.

The control distance d_tau solves the anisotropic eikonal equation
sum_i (X_i u)^2 + tau^2 sum_j (Z_j u)^2 = 1 with u(source) = 0; tau = 0 is
the sub-Riemannian distance, tau > 0 enlarges the speed set by the scaled
vertical frame.  The solver is iterative fast sweeping (Gauss-Seidel over
all 2^dim direction orderings) with a Godunov upwind local solver whose
one-sided samples are taken along the frame fields themselves via
interpolation; coordinate-axis stencils cannot follow the degenerate
directions of a sub-Riemannian Hamiltonian at feasible resolutions.  Three
refinements keep desk-scale grids accurate: anisotropic source-refinement
levels (the small-ball geometry scales quadratically along bracket
directions), limited second-order one-sided differences away from kinks,
and a 45-degree-rotated second horizontal stencil whose update is minimised
against the first (characteristics misaligned with the frame get an aligned
stencil).  Hamiltonian geodesic shooting provides the independent oracle and
the intrinsic route on compact group models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numba import njit
from scipy.integrate import solve_ivp
from scipy.optimize import least_squares

from .fields import EvalContext, VectorField
from .heat import GridSpec, max_cells_cap
from .models import Model


class SweepConvergenceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Lax-Friedrichs sweeping kernels (2D / 3D)
# ---------------------------------------------------------------------------


@njit(cache=True, inline="always")
def _interp3(u, fx, fy, fz):
    nx, ny, nz = u.shape
    if fx < 0.0:
        fx = 0.0
    if fx > nx - 1.0:
        fx = nx - 1.0
    if fy < 0.0:
        fy = 0.0
    if fy > ny - 1.0:
        fy = ny - 1.0
    if fz < 0.0:
        fz = 0.0
    if fz > nz - 1.0:
        fz = nz - 1.0
    i0 = int(fx)
    j0 = int(fy)
    k0 = int(fz)
    if i0 > nx - 2:
        i0 = nx - 2
    if j0 > ny - 2:
        j0 = ny - 2
    if k0 > nz - 2:
        k0 = nz - 2
    ax = fx - i0
    ay = fy - j0
    az = fz - k0
    c00 = u[i0, j0, k0] * (1 - ax) + u[i0 + 1, j0, k0] * ax
    c10 = u[i0, j0 + 1, k0] * (1 - ax) + u[i0 + 1, j0 + 1, k0] * ax
    c01 = u[i0, j0, k0 + 1] * (1 - ax) + u[i0 + 1, j0, k0 + 1] * ax
    c11 = u[i0, j0 + 1, k0 + 1] * (1 - ax) + u[i0 + 1, j0 + 1, k0 + 1] * ax
    c0 = c00 * (1 - ay) + c10 * ay
    c1 = c01 * (1 - ay) + c11 * ay
    return c0 * (1 - az) + c1 * az


@njit(cache=True, inline="always")
def _godunov_solve(am, wm, n):
    """Smallest u with sum_i w_i max(u - a_i, 0)^2 = 1 over the supplied
    upwind values (insertion-sorted in place)."""
    for p in range(1, n):
        key_a = am[p]
        key_w = wm[p]
        q = p - 1
        while q >= 0 and am[q] > key_a:
            am[q + 1] = am[q]
            wm[q + 1] = wm[q]
            q -= 1
        am[q + 1] = key_a
        wm[q + 1] = key_w
    A = 0.0
    B = 0.0
    C = 0.0
    u = am[0] + 1.0 / math.sqrt(wm[0])
    for k in range(n):
        A += wm[k]
        B += wm[k] * am[k]
        C += wm[k] * am[k] * am[k]
        disc = B * B - A * (C - 1.0)
        if disc < 0.0:
            disc = 0.0
        cand = (B + math.sqrt(disc)) / A
        if k == n - 1 or cand <= am[k + 1]:
            u = cand
            break
    return u


@njit(cache=True)
def _sweep3d(u, D, S, WH, SID, nst, frozen, sx, sy, sz, hx, hy, hz, order2):
    """One Gauss-Seidel pass of the frame-upwind Godunov update.

    D[m]: row vector fields (frame directions scaled for the speed set),
    S[m]: per-node step along the row, WH[m]: 1 if the row participates
    (0 rows are skipped; the exactly-comparable pair solves share steps and
    sweep counts while the smaller speed set drops its vertical rows),
    SID[m]: stencil the row belongs to (each stencil is an orthonormal
    realisation of the same Hamiltonian; the node takes the smallest update).
    One-sided samples u(x +- s X_m) come from trilinear interpolation, so
    stencils follow the frame instead of the coordinate axes.  With
    ``order2`` a second sample at 2s sharpens the one-sided difference where
    the profile is monotone (limiter falls back to first order); the
    comparison pair runs strictly first-order, which is monotone."""
    nx, ny, nz = u.shape
    nm = D.shape[0]
    am = np.empty(nm)
    wm = np.empty(nm)
    x0, x1, dx = (0, nx, 1) if sx > 0 else (nx - 1, -1, -1)
    y0, y1, dy = (0, ny, 1) if sy > 0 else (ny - 1, -1, -1)
    z0, z1, dz = (0, nz, 1) if sz > 0 else (nz - 1, -1, -1)
    for i in range(x0, x1, dx):
        for j in range(y0, y1, dy):
            for k in range(z0, z1, dz):
                if frozen[i, j, k]:
                    continue
                best = u[i, j, k]
                for g in range(nst):
                    n = 0
                    for mth in range(nm):
                        if SID[mth] != g or WH[mth] == 0.0:
                            continue
                        s = S[mth, i, j, k]
                        if s <= 0.0:
                            continue
                        fx = D[mth, 0, i, j, k] * s / hx
                        fy = D[mth, 1, i, j, k] * s / hy
                        fz = D[mth, 2, i, j, k] * s / hz
                        up = _interp3(u, i + fx, j + fy, k + fz)
                        um = _interp3(u, i - fx, j - fy, k - fz)
                        if up <= um:
                            a1 = up
                            sgn = 1.0
                        else:
                            a1 = um
                            sgn = -1.0
                        b = a1
                        w = 1.0 / (s * s)
                        if order2:
                            a2 = _interp3(u, i + 2 * sgn * fx, j + 2 * sgn * fy, k + 2 * sgn * fz)
                            if a2 >= a1 and a2 - a1 <= 1.5 * s:
                                b = (4.0 * a1 - a2) / 3.0
                                w = 9.0 / (4.0 * s * s)
                        am[n] = b
                        wm[n] = w
                        n += 1
                    if n == 0:
                        continue
                    ubar = _godunov_solve(am, wm, n)
                    if ubar < best:
                        best = ubar
                u[i, j, k] = best
    return u


@njit(cache=True, inline="always")
def _interp2(u, fx, fy):
    nx, ny = u.shape
    if fx < 0.0:
        fx = 0.0
    if fx > nx - 1.0:
        fx = nx - 1.0
    if fy < 0.0:
        fy = 0.0
    if fy > ny - 1.0:
        fy = ny - 1.0
    i0 = int(fx)
    j0 = int(fy)
    if i0 > nx - 2:
        i0 = nx - 2
    if j0 > ny - 2:
        j0 = ny - 2
    ax = fx - i0
    ay = fy - j0
    c0 = u[i0, j0] * (1 - ax) + u[i0 + 1, j0] * ax
    c1 = u[i0, j0 + 1] * (1 - ax) + u[i0 + 1, j0 + 1] * ax
    return c0 * (1 - ay) + c1 * ay


@njit(cache=True)
def _sweep2d(u, D, S, WH, SID, nst, frozen, sx, sy, hx, hy, order2):
    nx, ny = u.shape
    nm = D.shape[0]
    am = np.empty(nm)
    wm = np.empty(nm)
    x0, x1, dx = (0, nx, 1) if sx > 0 else (nx - 1, -1, -1)
    y0, y1, dy = (0, ny, 1) if sy > 0 else (ny - 1, -1, -1)
    for i in range(x0, x1, dx):
        for j in range(y0, y1, dy):
            if frozen[i, j]:
                continue
            best = u[i, j]
            for g in range(nst):
                n = 0
                for mth in range(nm):
                    if SID[mth] != g or WH[mth] == 0.0:
                        continue
                    s = S[mth, i, j]
                    if s <= 0.0:
                        continue
                    fx = D[mth, 0, i, j] * s / hx
                    fy = D[mth, 1, i, j] * s / hy
                    up = _interp2(u, i + fx, j + fy)
                    um = _interp2(u, i - fx, j - fy)
                    if up <= um:
                        a1 = up
                        sgn = 1.0
                    else:
                        a1 = um
                        sgn = -1.0
                    b = a1
                    w = 1.0 / (s * s)
                    if order2:
                        a2 = _interp2(u, i + 2 * sgn * fx, j + 2 * sgn * fy)
                        if a2 >= a1 and a2 - a1 <= 1.5 * s:
                            b = (4.0 * a1 - a2) / 3.0
                            w = 9.0 / (4.0 * s * s)
                    am[n] = b
                    wm[n] = w
                    n += 1
                if n == 0:
                    continue
                ubar = _godunov_solve(am, wm, n)
                if ubar < best:
                    best = ubar
            u[i, j] = best
    return u


def _sweep1d(u, D, S, WH, SID, nst, frozen, sdir, h, order2):
    n = u.shape[0]
    rng = range(n) if sdir > 0 else range(n - 1, -1, -1)
    am = np.empty(D.shape[0])
    wm = np.empty(D.shape[0])
    for i in rng:
        if frozen[i]:
            continue
        cnt = 0
        for mth in range(D.shape[0]):
            if WH[mth] == 0.0:
                continue
            s = S[mth, i]
            if s <= 0.0:
                continue
            fx = i + (D[mth, 0, i] * s) / h
            gx = i - (D[mth, 0, i] * s) / h
            fx = min(max(fx, 0.0), n - 1.0)
            gx = min(max(gx, 0.0), n - 1.0)
            i0 = min(int(fx), n - 2)
            up = u[i0] * (1 - (fx - i0)) + u[i0 + 1] * (fx - i0)
            i1 = min(int(gx), n - 2)
            um = u[i1] * (1 - (gx - i1)) + u[i1 + 1] * (gx - i1)
            sgn = 1.0 if up <= um else -1.0
            a1 = min(up, um)
            b = a1
            w = 1.0 / (s * s)
            if order2:
                f2 = min(max(i + 2 * sgn * (D[mth, 0, i] * s) / h, 0.0), n - 1.0)
                i2 = min(int(f2), n - 2)
                a2 = u[i2] * (1 - (f2 - i2)) + u[i2 + 1] * (f2 - i2)
                if a2 >= a1 and a2 - a1 <= 1.5 * s:
                    b = (4.0 * a1 - a2) / 3.0
                    w = 9.0 / (4.0 * s * s)
            am[cnt] = b
            wm[cnt] = w
            cnt += 1
        if cnt == 0:
            continue
        # same incremental quadratic solve as the jitted kernels
        order = np.argsort(am[:cnt])
        A = B = C = 0.0
        ubar = am[order[0]] + 1.0 / math.sqrt(wm[order[0]])
        for kk in range(cnt):
            a = am[order[kk]]
            w = wm[order[kk]]
            A += w
            B += w * a
            C += w * a * a
            disc = max(B * B - A * (C - 1.0), 0.0)
            cand = (B + math.sqrt(disc)) / A
            if kk == cnt - 1 or cand <= am[order[kk + 1]]:
                ubar = cand
                break
        if ubar < u[i]:
            u[i] = ubar
    return u


# ---------------------------------------------------------------------------
# Distance fields
# ---------------------------------------------------------------------------


@dataclass
class DistanceField:
    source: np.ndarray
    tau: float
    grid: GridSpec
    values: np.ndarray
    rounds: int
    final_change: float

    def interpolator(self) -> Callable[[np.ndarray], np.ndarray]:
        from scipy.interpolate import RegularGridInterpolator

        rgi = RegularGridInterpolator(
            self.grid.axes(), self.values, bounds_error=False, fill_value=np.inf
        )

        def f(pts):
            return np.asarray(rgi(np.atleast_2d(pts)), dtype=float)

        return f

    def at(self, x) -> float:
        return float(self.values[self.grid.nearest_node(x)])


def speed_rows(m: Model, grid: GridSpec, tau: float) -> np.ndarray:
    """Coefficient tensor C[m, axis, grid]: horizontal rows then tau-scaled
    vertical rows; the eikonal Hamiltonian is |C p|."""
    pts = grid.points()
    rows = []
    for X in m.horizontal:
        rows.append(np.stack([c.values(pts).reshape(grid.shape) for c in X.components]))
    if tau > 0:
        for Z in m.vertical:
            rows.append(tau * np.stack([c.values(pts).reshape(grid.shape) for c in Z.components]))
    return np.ascontiguousarray(np.stack(rows))


def stencil_speed_rows(m: Model, grid: GridSpec, tau: float) -> tuple[np.ndarray, np.ndarray, int]:
    """(rows, stencil_ids, n_stencils): each stencil is an orthonormal row
    set realising the same Hamiltonian.  For a rank-2 horizontal frame a
    45-degree rotated pair is added as a second stencil; vertical rows are
    appended to every stencil."""
    pts = grid.points()

    def field_rows(fields, scale=1.0):
        out = []
        for X in fields:
            out.append(scale * np.stack([c.values(pts).reshape(grid.shape) for c in X.components]))
        return out

    horiz = field_rows(m.horizontal)
    vert = field_rows(m.vertical, tau) if tau > 0 else []
    stencils = [horiz]
    if len(horiz) == 2:
        r = 1.0 / math.sqrt(2.0)
        stencils.append([r * (horiz[0] + horiz[1]), r * (horiz[0] - horiz[1])])
    rows = []
    sid = []
    for g, st in enumerate(stencils):
        for row in st:
            rows.append(row)
            sid.append(g)
        for vz in vert:
            rows.append(vz)
            sid.append(g)
    return (
        np.ascontiguousarray(np.stack(rows)),
        np.asarray(sid, dtype=np.int64),
        len(stencils),
    )


def row_steps(C: np.ndarray, spacing, axis_caps: Optional[Sequence[float]] = None) -> np.ndarray:
    """Per-row, per-node step sizes: the largest step along the row field that
    moves at most ``axis_caps[ax]`` cells per axis (default one cell; fine
    vertical axes tolerate multi-cell moves since the interpolation error
    depends on the landing cell, not the step length).  Rows that vanish at a
    node get step 0 there and drop out of the update."""
    nm = C.shape[0]
    grid_shape = C.shape[2:]
    if axis_caps is None:
        axis_caps = [1.0] * len(spacing)
    S = np.empty((nm,) + grid_shape)
    for mth in range(nm):
        bound = np.full(grid_shape, np.inf)
        for ax, h in enumerate(spacing):
            a = np.abs(C[mth, ax])
            with np.errstate(divide="ignore"):
                bound = np.minimum(
                    bound,
                    np.where(a > 1e-14, axis_caps[ax] * h / np.maximum(a, 1e-300), np.inf),
                )
        S[mth] = np.where(np.isfinite(bound), bound, 0.0)
    return np.ascontiguousarray(S)


_BIG = 1e10


def _sweep_to_convergence(
    u: np.ndarray,
    D: np.ndarray,
    S: np.ndarray,
    wh: np.ndarray,
    sid: np.ndarray,
    nst: int,
    frozen: np.ndarray,
    spacing,
    tol: float,
    max_rounds: int,
    min_rounds: int,
    exact_rounds: Optional[int] = None,
    order2: bool = True,
) -> tuple[int, float]:
    ndim = u.ndim
    h = spacing
    signs = (1, -1)
    rounds = 0
    change = math.inf

    def one_round(use_order2: bool) -> float:
        prev = u.copy()
        if ndim == 3:
            for sx in signs:
                for sy in signs:
                    for sz in signs:
                        _sweep3d(u, D, S, wh, sid, nst, frozen, sx, sy, sz, h[0], h[1], h[2], use_order2)
        elif ndim == 2:
            for sx in signs:
                for sy in signs:
                    _sweep2d(u, D, S, wh, sid, nst, frozen, sx, sy, h[0], h[1], use_order2)
        elif ndim == 1:
            for s in signs:
                _sweep1d(u, D, S, wh, sid, nst, frozen, s, h[0], use_order2)
        else:
            raise ValueError("sweeping supports 1-3 dimensions")
        return float(np.max(np.abs(u - prev)))

    if exact_rounds is not None:
        # lockstep mode used by the comparison pair: fixed round budget
        for _ in range(exact_rounds):
            change = one_round(order2)
            rounds += 1
        return rounds, change
    # phase 1: monotone first-order sweeps from the huge initial state
    while rounds < max_rounds:
        change = one_round(False)
        rounds += 1
        if change < tol and rounds >= min_rounds:
            break
    else:
        raise SweepConvergenceError(
            f"no convergence after {max_rounds} rounds (last change {change:.3e})"
        )
    if not order2:
        return rounds, change
    # phase 2: sharpen with limited second-order one-sided differences
    while rounds < 2 * max_rounds:
        change = one_round(True)
        rounds += 1
        if change < tol:
            return rounds, change
    raise SweepConvergenceError(
        f"second-order phase stalled after {rounds} rounds (last change {change:.3e})"
    )


def _nested_grids(m: Model, grid: GridSpec, x0: np.ndarray, levels: int, shrink: float = 4.0) -> list[GridSpec]:
    """Source-refinement hierarchy: boxes shrinking toward the source with
    node counts kept fixed.  Axes reached only through brackets (step-2
    vertical axes) shrink by the square of the horizontal factor, matching
    the anisotropic dilations of the small-ball geometry; otherwise the
    near-source ball would stay under-resolved at every level."""
    out = [grid]
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    vert = _vertical_axes(m)
    factor = np.array([shrink**2 if ax in vert else shrink for ax in range(grid.ndim)])
    for _ in range(1, levels):
        half = (hi - lo) / 2.0 / factor
        lo = x0 - half
        hi = x0 + half
        out.append(GridSpec(tuple(lo), tuple(hi), grid.shape))
    return out


def _solve_level(
    m: Model,
    grid: GridSpec,
    x0: np.ndarray,
    tau: float,
    tol: float,
    max_rounds: int,
    min_rounds: int,
    seed_field: Optional[DistanceField],
    seed_box: Optional[tuple[np.ndarray, np.ndarray]],
    h_weights: Optional[np.ndarray] = None,
    exact_rounds: Optional[int] = None,
    rows_tau: Optional[float] = None,
    order2: bool = True,
) -> tuple[np.ndarray, int]:
    """One source-refinement level.  ``rows_tau`` selects the speed-row set
    (defaults to ``tau``); ``h_weights`` masks rows out of the Hamiltonian
    while keeping their dissipation terms, which is how the exactly
    comparable pair solves share a stencil."""
    D, sid, nst = stencil_speed_rows(m, grid, rows_tau if rows_tau is not None else tau)
    caps = [4.0 if ax in _vertical_axes(m) else 1.0 for ax in range(grid.ndim)]
    S = row_steps(D, grid.spacing, caps)
    wh = (
        np.ascontiguousarray(np.asarray(h_weights, dtype=np.float64))
        if h_weights is not None
        else np.ones(D.shape[0])
    )
    u = np.full(grid.shape, _BIG, dtype=np.float64)
    frozen = np.zeros(grid.shape, dtype=np.uint8)
    src = grid.nearest_node(x0)
    u[src] = 0.0
    frozen[src] = 1
    if seed_field is not None and seed_box is not None:
        pts = grid.points()
        lo, hi = seed_box
        inside = np.all((pts >= lo) & (pts <= hi), axis=1).reshape(grid.shape)
        if np.any(inside):
            vals = seed_field.interpolator()(pts).reshape(grid.shape)
            good = inside & np.isfinite(vals)
            u[good] = vals[good]
            frozen[good] = 1
    rounds, _ = _sweep_to_convergence(
        u, D, S, wh, sid, nst, frozen, grid.spacing, tol, max_rounds, min_rounds, exact_rounds, order2
    )
    return u, rounds


def _seed_box(x0: np.ndarray, child: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    half = 0.45 * (np.array(child.hi) - np.array(child.lo)) / 2.0
    return (x0 - half, x0 + half)


def distance_field(
    m: Model,
    x0,
    tau: float,
    grid: GridSpec,
    tol: float = 1e-8,
    max_rounds: int = 1000,
    min_rounds: int = 0,
    levels: int = 3,
) -> DistanceField:
    """Viscosity solution of the frame eikonal equation sum_i (X_i u)^2 +
    tau^2 sum_j (Z_j u)^2 = 1 with u(x0) = 0, by frame-aligned LF sweeping
    plus source refinement: the point-source cone is re-solved on ``levels``
    nested grids shrinking anisotropically toward the source, each freezing a
    seed ball in its parent (a point source of a sub-Riemannian eikonal is
    otherwise under-resolved at every uniform resolution)."""
    if not m.has_global_chart:
        raise ValueError(f"model {m.name} has no global chart; use shooting instead")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    if grid.ncells > max_cells_cap():
        raise SweepConvergenceError(
            f"grid has {grid.ncells} cells, above the SRLAB_MAX_CELLS cap"
        )
    x0 = np.asarray(x0, dtype=float)
    grids = _nested_grids(m, grid, x0, max(int(levels), 1))
    seed: Optional[DistanceField] = None
    rounds_total = 0
    u = None
    for k in range(len(grids) - 1, -1, -1):
        g = grids[k]
        box = _seed_box(x0, grids[k + 1]) if seed is not None else None
        u, rounds = _solve_level(
            m, g, x0, tau, tol, max_rounds, min_rounds if k == 0 else 0, seed, box
        )
        rounds_total += rounds
        seed = DistanceField(x0, tau, g, u, rounds, 0.0)
    return DistanceField(x0, tau, grid, u, rounds_total, 0.0)


def distance_field_pair(
    m: Model,
    x0,
    tau: float,
    grid: GridSpec,
    tol: float = 1e-8,
    max_rounds: int = 1000,
    levels: int = 3,
) -> tuple[DistanceField, DistanceField]:
    """(d_tau, d_0) solved in lockstep: both use the stencil rows of the
    larger tau speed set (the d_0 Hamiltonian masks the vertical rows, whose
    dissipation terms remain) and identical per-level round counts, which
    makes d_tau <= d_0 hold exactly on the grid (monotone update, pointwise
    ordered Hamiltonians, induction over sweeps and levels)."""
    if tau <= 0:
        raise ValueError("tau must be positive for a pair comparison")
    x0 = np.asarray(x0, dtype=float)
    grids = _nested_grids(m, grid, x0, max(int(levels), 1))
    n_stencils = 2 if m.d == 2 else 1
    rows_per = m.d + m.h
    wh_tau = np.ones(n_stencils * rows_per)
    wh_0 = np.tile(np.concatenate([np.ones(m.d), np.zeros(m.h)]), n_stencils)
    seed_t: Optional[DistanceField] = None
    seed_0: Optional[DistanceField] = None
    total = 0
    u_t = u_0 = None
    for k in range(len(grids) - 1, -1, -1):
        g = grids[k]
        box = _seed_box(x0, grids[k + 1]) if seed_t is not None else None
        _, r1 = _solve_level(m, g, x0, tau, tol, max_rounds, 0, seed_t, box, wh_tau, rows_tau=tau, order2=False)
        _, r2 = _solve_level(m, g, x0, tau, tol, max_rounds, 0, seed_0, box, wh_0, rows_tau=tau, order2=False)
        r = max(r1, r2)
        u_t, _ = _solve_level(
            m, g, x0, tau, tol, max_rounds, 0, seed_t, box, wh_tau, exact_rounds=r, rows_tau=tau, order2=False
        )
        u_0, _ = _solve_level(
            m, g, x0, tau, tol, max_rounds, 0, seed_0, box, wh_0, exact_rounds=r, rows_tau=tau, order2=False
        )
        total += r
        seed_t = DistanceField(x0, tau, g, u_t, r, 0.0)
        seed_0 = DistanceField(x0, 0.0, g, u_0, r, 0.0)
    return (
        DistanceField(x0, tau, grid, u_t, total, 0.0),
        DistanceField(x0, 0.0, grid, u_0, total, 0.0),
    )


def grid_tolerance(df: DistanceField) -> float:
    """2 h * (local speed bound): the documented metric-assertion slack."""
    return 2.0 * max(df.grid.spacing)


# ---------------------------------------------------------------------------
# Ball volumes and doubling
# ---------------------------------------------------------------------------


class BallBoundaryError(RuntimeError):
    pass


@dataclass
class BallVolumeTable:
    center: np.ndarray
    radii: list[float]
    volumes: list[float]


def ball_volume(df: DistanceField, density_values: np.ndarray, r: float) -> float:
    """mu(B(center, r)) by midpoint counting of cells with df < r."""
    inside = df.values < r
    for axis in range(df.values.ndim):
        face = [slice(None)] * df.values.ndim
        for end in (0, -1):
            face[axis] = end
            if np.any(inside[tuple(face)]):
                raise BallBoundaryError(f"ball of radius {r} touches the grid boundary")
    vol = float(np.sum(density_values[inside]) * df.grid.cell_volume)
    if vol <= 0:
        raise BallBoundaryError(f"ball of radius {r} contains no cells")
    return vol


def ball_volume_table(m: Model, df: DistanceField, radii: Sequence[float]) -> BallVolumeTable:
    dens = m.density.values(df.grid.points()).reshape(df.grid.shape)
    vols = [ball_volume(df, dens, float(r)) for r in radii]
    return BallVolumeTable(df.source, [float(r) for r in radii], vols)


def _vertical_extent_factor(m: Model) -> float:
    # ball of radius R extends R^2/(4 pi) ~ 0.08 R^2 along a step-2 vertical
    # axis; 0.18 keeps head-room for negatively curved charts
    return 0.18


def ball_grid(m: Model, x, R: float, nodes: int = 97, nodes_vertical: Optional[int] = None) -> GridSpec:
    """A grid box sized to contain B(x, R) with margin.  Axes along which the
    horizontal frame vanishes at first order (step-2 vertical axes) scale as
    R^2 and get a finer node count (the distance function has a thin
    curvature layer in those directions); grids for different R are then
    exact dilates of each other on dilation-homogeneous models."""
    x = np.asarray(x, dtype=float)
    if nodes_vertical is None:
        nodes_vertical = int(1.6 * nodes) | 1
    lo, hi, shape = [], [], []
    vert_axes = _vertical_axes(m)
    for ax in range(m.n):
        if ax in vert_axes:
            half = _vertical_extent_factor(m) * R * R
            shape.append(nodes_vertical)
        else:
            half = 1.25 * R
            shape.append(nodes)
        lo.append(x[ax] - half)
        hi.append(x[ax] + half)
    return GridSpec(tuple(lo), tuple(hi), tuple(shape))


def _vertical_axes(m: Model) -> set[int]:
    """Axes reached only through the vertical frame at the box scale (z-axes
    of step-2 charts): the horizontal fields have zero mean coefficient there."""
    if m.n == m.d:
        return set()
    out = set()
    pts = np.zeros((1, m.n))
    for ax in range(m.n):
        horiz = sum(abs(float(X.components[ax].values(pts)[0])) for X in m.horizontal)
        if horiz == 0.0:
            vert = sum(abs(float(Z.components[ax].values(pts)[0])) for Z in m.vertical)
            if vert > 0:
                out.add(ax)
    return out


@dataclass
class DoublingResult:
    r: float
    ratio: float
    v_small: float
    v_big: float
    cells_small: int


def doubling_ratio(m: Model, x, r: float, nodes: int = 97, min_cells: int = 100) -> DoublingResult:
    """V(x, 2r) / V(x, r) on a per-radius scaled grid."""
    df = None
    scale = 1.0
    for attempt in range(3):
        grid = ball_grid(m, x, 2.0 * r * scale, nodes)
        df = distance_field(m, x, 0.0, grid)
        try:
            dens = m.density.values(grid.points()).reshape(grid.shape)
            v1 = ball_volume(df, dens, r)
            v2 = ball_volume(df, dens, 2.0 * r)
            break
        except BallBoundaryError:
            scale *= 1.5
    else:
        raise BallBoundaryError(f"could not box the ball of radius {2 * r}")
    cells_small = int(np.sum(df.values < r))
    if cells_small < min_cells:
        raise BallBoundaryError(
            f"ball of radius {r} resolved by only {cells_small} cells (< {min_cells})"
        )
    return DoublingResult(r=r, ratio=v2 / v1, v_small=v1, v_big=v2, cells_small=cells_small)


@dataclass
class ExpDoublingFit:
    C1: float
    C2: float
    radii: list[float]
    ratios: list[float]


def exp_doubling_fit(m: Model, x, radii: Sequence[float], nodes: int = 97) -> ExpDoublingFit:
    """Regress ln(V(2r)/V(r)) on r^2: intercept ln C1, slope C2.  The slope
    vanishes on dilation-homogeneous groups and is positive under negative
    curvature."""
    radii = [float(r) for r in radii]
    ratios = [doubling_ratio(m, x, r, nodes).ratio for r in radii]
    A = np.column_stack([np.ones(len(radii)), np.square(radii)])
    coef, *_ = np.linalg.lstsq(A, np.log(ratios), rcond=None)
    return ExpDoublingFit(C1=float(np.exp(coef[0])), C2=float(coef[1]), radii=radii, ratios=ratios)


# ---------------------------------------------------------------------------
# Hamiltonian geodesic shooting
# ---------------------------------------------------------------------------


@dataclass
class ShootResult:
    endpoint: np.ndarray
    length: float
    h_initial: float
    h_drift: float


class _HamiltonianSystem:
    """x' = sum_i (a_i . p) a_i, p' = -sum_i (a_i . p) (Jac a_i)^T p."""

    def __init__(self, m: Model):
        self.m = m
        self.n = m.n
        self.fields = m.horizontal

    def coefficients(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """a[i, k, pt] and jac[i, k, ax, pt] at points x (P, n)."""
        ctx = EvalContext(x)
        d, n, P = len(self.fields), self.n, x.shape[0]
        a = np.zeros((d, n, P))
        jac = np.zeros((d, n, n, P))
        for i, X in enumerate(self.fields):
            for k, comp in enumerate(X.components):
                jet = comp._jet_memo(ctx, 1)
                a[i, k] = jet.value()
                for ax in range(n):
                    unit = tuple(1 if q == ax else 0 for q in range(n))
                    jac[i, k, ax] = jet.coefficient(unit)
        return a, jac

    def hamiltonian(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        a, _ = self.coefficients(x)
        s = np.einsum("ikp,pk->ip", a, p)
        return 0.5 * np.sum(s * s, axis=0)

    def rhs(self, t, state: np.ndarray, batch: int) -> np.ndarray:
        st = state.reshape(batch, 2 * self.n)
        x, p = st[:, : self.n], st[:, self.n :]
        a, jac = self.coefficients(x)
        s = np.einsum("ikp,pk->ip", a, p)  # (d, P)
        xdot = np.einsum("ip,ikp->pk", s, a)
        # dH/dx_ax = sum_i s_i * (d a_i / d x_ax . p)
        dadx_p = np.einsum("ikap,pk->iap", jac, p)  # (d, n, P)
        pdot = -np.einsum("ip,iap->pa", s, dadx_p)
        return np.concatenate([xdot, pdot], axis=1).ravel()


def geodesic_shoot(
    m: Model,
    x0,
    p0,
    T: float,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> ShootResult:
    """Integrate the normal-geodesic flow for time T from (x0, p0)."""
    sys = _HamiltonianSystem(m)
    x0 = np.asarray(x0, dtype=float)
    p0 = np.asarray(p0, dtype=float)
    state0 = np.concatenate([x0, p0])
    h0 = float(sys.hamiltonian(x0[None, :], p0[None, :])[0])
    sol = solve_ivp(
        lambda t, s: sys.rhs(t, s, 1),
        (0.0, T),
        state0,
        method="DOP853",
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise RuntimeError(f"geodesic integration failed: {sol.message}")
    end = sol.y[:, -1]
    x_end, p_end = end[: m.n], end[m.n :]
    h1 = float(sys.hamiltonian(x_end[None, :], p_end[None, :])[0])
    drift = abs(h1 - h0) / max(abs(h0), 1e-300)
    return ShootResult(
        endpoint=x_end,
        length=math.sqrt(max(2.0 * h0, 0.0)) * T,
        h_initial=h0,
        h_drift=drift,
    )


def _shoot_batch(sys: _HamiltonianSystem, x0: np.ndarray, P0: np.ndarray, T: float, rtol=1e-8, atol=1e-10) -> np.ndarray:
    """Endpoints for a fan of covectors, one adaptive solve for the batch."""
    K = P0.shape[0]
    X0 = np.broadcast_to(x0, (K, sys.n))
    state0 = np.concatenate([X0, P0], axis=1).ravel()
    sol = solve_ivp(
        lambda t, s: sys.rhs(t, s, K),
        (0.0, T),
        state0,
        method="DOP853",
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise RuntimeError(f"fan integration failed: {sol.message}")
    return sol.y[:, -1].reshape(K, 2 * sys.n)[:, : sys.n]


def _fan_covectors(n: int, count: int, seed: int = 0) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    v = rng.standard_normal((count, n))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def shooting_distance(
    m: Model,
    x0,
    y,
    fan: int = 64,
    seed: int = 0,
    target_tol: float = 1e-6,
) -> float:
    """Distance estimate by a covector fan refined with a boundary-value
    polish: minimise |endpoint(1, p0) - y|, length sqrt(2 H(x0, p0*)).

    An upper-bound oracle up to integration error (every normal geodesic
    that reaches y bounds d(x0, y) by its length)."""
    sys = _HamiltonianSystem(m)
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(y, dtype=float)
    chord = np.linalg.norm(y - x0)
    if chord == 0:
        return 0.0
    dirs = _fan_covectors(m.n, fan, seed)
    best = None
    for scale in (0.5 * chord, chord, 2.0 * chord, 4.0 * chord):
        P0 = dirs * scale
        ends = _shoot_batch(sys, x0, P0, 1.0)
        miss = np.linalg.norm(ends - y, axis=1)
        k = int(np.argmin(miss))
        if best is None or miss[k] < best[0]:
            best = (float(miss[k]), P0[k])

    def residual(p0):
        end = _shoot_batch(sys, x0, p0[None, :], 1.0, rtol=1e-10, atol=1e-12)[0]
        return end - y

    sol = least_squares(residual, best[1], xtol=1e-12, ftol=1e-12, gtol=1e-12)
    miss = float(np.linalg.norm(sol.fun))
    if miss > target_tol * max(1.0, chord):
        raise RuntimeError(f"shooting failed to hit the target (miss {miss:.2e})")
    h = float(sys.hamiltonian(x0[None, :], sol.x[None, :])[0])
    return math.sqrt(max(2.0 * h, 0.0))


@dataclass
class DistanceCrossCheck:
    eikonal: float
    shooting: float
    gap: float


def cross_validate_distance(m: Model, x0, y, grid: GridSpec, seed: int = 0) -> DistanceCrossCheck:
    df = distance_field(m, x0, 0.0, grid)
    eik = float(df.interpolator()(np.asarray(y, dtype=float)[None, :])[0])
    shoot = shooting_distance(m, x0, y, seed=seed)
    denom = max(abs(eik), abs(shoot), 1e-12)
    return DistanceCrossCheck(eikonal=eik, shooting=shoot, gap=abs(eik - shoot) / denom)


# ---------------------------------------------------------------------------
# Diameter of compact models
# ---------------------------------------------------------------------------


@dataclass
class DiameterEstimate:
    value: float
    n_targets: int
    failures: int


def diameter_estimate(m: Model, n_targets: int = 24, fan: int = 96, seed: int = 0) -> DiameterEstimate:
    """Lower bound for the diameter of a compact group model: max over
    sampled targets of the shooting distance from the identity (distances
    are left-invariant, so one base point suffices)."""
    if not m.is_compact:
        raise ValueError(f"model {m.name} is not compact")
    if m.group is None:
        raise ValueError("diameter estimation needs group sampling")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    targets = m.group.random_points(rng, n_targets)
    e = m.group.identity()
    best = 0.0
    failures = 0
    for k in range(n_targets):
        try:
            dist = shooting_distance(m, e, targets[k], fan=fan, seed=seed + 101 * k, target_tol=1e-5)
            best = max(best, dist)
        except RuntimeError:
            failures += 1
    return DiameterEstimate(value=best, n_targets=n_targets, failures=failures)


def bonnet_myers_bound(rho1: float, rho2: float, kappa: float, d: float) -> float:
    """2 sqrt(3) pi sqrt((rho2 + kappa) / (rho1 rho2) (1 + 3 kappa / (2 rho2)) d)."""
    if rho1 <= 0:
        raise ValueError("the diameter bound needs rho1 > 0")
    return 2.0 * math.sqrt(3.0) * math.pi * math.sqrt(
        (rho2 + kappa) / (rho1 * rho2) * (1.0 + 3.0 * kappa / (2.0 * rho2)) * d
    )


# ---------------------------------------------------------------------------
# Distance comparison d <= C(tau) max(sqrt(d_tau), d_tau)
# ---------------------------------------------------------------------------


@dataclass
class DistanceComparison:
    c_hat: float
    worst_pair: tuple
    n_pairs: int
    tau_le_d_max_violation: float


def distance_comparison_check(
    m: Model,
    tau: float,
    grid: GridSpec,
    n_targets: int = 200,
    n_sources: int = 4,
    seed: int = 0,
) -> DistanceComparison:
    """Empirical C(tau) = max d / max(sqrt(d_tau), d_tau) over sampled pairs,
    plus the zero-slack full-grid check that d_tau <= d.

    Both fields are swept with the viscosities of the larger (tau) speed set
    and a shared round count, which makes the discrete comparison exact."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    lo = np.array(grid.lo)
    hi = np.array(grid.hi)
    margin = 0.15 * (hi - lo)
    c_hat = 0.0
    worst = None
    violation = 0.0
    total = 0
    per_source = max(1, n_targets // n_sources)
    for s_idx in range(n_sources):
        x0 = lo + margin + (hi - lo - 2 * margin) * rng.random(grid.ndim)
        df_tau, df_0 = distance_field_pair(m, x0, tau, grid)
        violation = max(violation, float(np.max(df_tau.values - df_0.values)))
        interp_0 = df_0.interpolator()
        interp_tau = df_tau.interpolator()
        targets = lo + margin + (hi - lo - 2 * margin) * rng.random((per_source, grid.ndim))
        d0 = interp_0(targets)
        dt = interp_tau(targets)
        for k in range(per_source):
            if dt[k] <= 1e-9:  # degenerate pair (target ~ source)
                continue
            total += 1
            ratio = d0[k] / max(math.sqrt(dt[k]), dt[k])
            if ratio > c_hat:
                c_hat = float(ratio)
                worst = (tuple(float(v) for v in x0), tuple(float(v) for v in targets[k]))
    return DistanceComparison(c_hat=c_hat, worst_pair=worst, n_pairs=total, tau_le_d_max_violation=violation)
