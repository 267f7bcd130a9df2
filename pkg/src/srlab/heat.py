"""The heat semigroup P_t = e^{tL} and the estimates built on it.

Two routes to P_t: an explicit finite-difference solver on chart models with
the sub-Laplacian discretised as a composition of centered first-derivative
stencils per frame field (preserving the sum-of-squares structure), and a
Monte-Carlo sampler of the underlying diffusion d xi = sqrt(2) sum_i X_i o dB_i
(Stratonovich-Heun on charts, geometric exponential stepping on groups).
On top of those sit the gradient-estimate, Harnack, ball-hitting and
Poincare deficit evaluators.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .fields import ScalarField, as_field
from .gamma import CDParams, gamma_field
from .models import Model


class SolverError(RuntimeError):
    """Heat solve failed (CFL violation, NaN blow-up, bad grid)."""


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.lo) == len(self.hi) == len(self.shape)):
            raise ValueError("lo/hi/shape must have equal lengths")
        if any(s < 3 for s in self.shape):
            raise ValueError("need at least 3 nodes per axis")
        if any(h <= l for l, h in zip(self.lo, self.hi)):
            raise ValueError("hi must exceed lo")

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((h - l) / (s - 1) for l, h, s in zip(self.lo, self.hi, self.shape))

    @property
    def ncells(self) -> int:
        return int(np.prod(self.shape))

    def axes(self) -> list[np.ndarray]:
        return [np.linspace(l, h, s) for l, h, s in zip(self.lo, self.hi, self.shape)]

    def points(self) -> np.ndarray:
        """All nodes, shape (ncells, ndim), C order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    def nearest_node(self, x) -> tuple[int, ...]:
        x = np.asarray(x, dtype=float)
        idx = []
        for c, l, h, s in zip(x, self.lo, self.hi, self.shape):
            if c < l or c > h:
                raise ValueError(f"point {x} outside grid")
            idx.append(int(round((c - l) / (h - l) * (s - 1))))
        return tuple(idx)

    def node_point(self, idx: Sequence[int]) -> np.ndarray:
        return np.array([l + i * s for l, i, s in zip(self.lo, idx, self.spacing)])

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "shape": list(self.shape)}

    @staticmethod
    def from_json(doc) -> "GridSpec":
        return GridSpec(tuple(doc["lo"]), tuple(doc["hi"]), tuple(doc["shape"]))


@dataclass
class GridField:
    grid: GridSpec
    values: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.shape:
            raise ValueError("values shape does not match grid")

    def interpolator(self) -> RegularGridInterpolator:
        return RegularGridInterpolator(self.grid.axes(), self.values, bounds_error=False, fill_value=np.nan)

    def at(self, x) -> float:
        return float(self.values[self.grid.nearest_node(x)])


def grid_field_from_function(grid: GridSpec, fn, time: float = 0.0) -> GridField:
    pts = grid.points()
    if isinstance(fn, ScalarField):
        vals = fn.values(pts)
    else:
        vals = np.asarray(fn(pts), dtype=float)
    return GridField(grid, vals.reshape(grid.shape), time)


def grid_to_csv(gf: GridField, path: str) -> None:
    """Rows: x1, ..., xn, value."""
    pts = gf.grid.points()
    data = np.column_stack([pts, gf.values.ravel()])
    header = ",".join([f"x{i+1}" for i in range(gf.grid.ndim)] + ["value"])
    np.savetxt(path, data, delimiter=",", header=header, comments="")


def max_cells_cap(default: int = 8_000_000) -> int:
    import os

    raw = os.environ.get("SRLAB_MAX_CELLS")
    if raw:
        return int(raw)
    return default


# ---------------------------------------------------------------------------
# Discrete sub-Laplacian
# ---------------------------------------------------------------------------


def _central_diff(u: np.ndarray, h: float, axis: int) -> np.ndarray:
    """Second-order centered first derivative, one-sided at the faces."""
    return np.gradient(u, h, axis=axis, edge_order=2)


class DiscreteOperator:
    """L = sum_i X_i(X_i .) with per-field composed centered stencils."""

    def __init__(self, m: Model, grid: GridSpec):
        if grid.ncells > max_cells_cap():
            raise SolverError(
                f"grid has {grid.ncells} cells, above the SRLAB_MAX_CELLS cap {max_cells_cap()}"
            )
        self.model = m
        self.grid = grid
        self.h = grid.spacing
        pts = grid.points()
        self.coeffs: list[list[Optional[np.ndarray]]] = []
        for X in m.horizontal:
            row = []
            for c in X.components:
                vals = c.values(pts).reshape(grid.shape)
                row.append(None if not np.any(vals) else vals)
            self.coeffs.append(row)
        self.vert_coeffs: list[list[Optional[np.ndarray]]] = []
        for Z in m.vertical:
            row = []
            for c in Z.components:
                vals = c.values(pts).reshape(grid.shape)
                row.append(None if not np.any(vals) else vals)
            self.vert_coeffs.append(row)

    def apply_frame_field(self, i: int, u: np.ndarray, vertical: bool = False) -> np.ndarray:
        coeffs = self.vert_coeffs[i] if vertical else self.coeffs[i]
        out = np.zeros_like(u)
        for axis, c in enumerate(coeffs):
            if c is None:
                continue
            out += c * _central_diff(u, self.h[axis], axis)
        return out

    def apply_l(self, u: np.ndarray) -> np.ndarray:
        out = np.zeros_like(u)
        for i in range(len(self.coeffs)):
            out += self.apply_frame_field(i, self.apply_frame_field(i, u))
        return out

    def stable_dt(self, cfl: float) -> float:
        s = 0.0
        zero = None
        for row in self.coeffs:
            per_field = None
            for axis, c in enumerate(row):
                if c is None:
                    continue
                contrib = np.abs(c) / self.h[axis]
                per_field = contrib if per_field is None else per_field + contrib
            if per_field is not None:
                s_field = float(np.max(per_field) ** 2)
                s += s_field
        if s == 0:
            raise SolverError("operator has no active coefficients")
        return cfl / s


@dataclass(frozen=True)
class HeatConfig:
    cfl: float = 0.25
    #: zero the boundary shell each step (homogeneous Dirichlet box)
    dirichlet: bool = True

    def to_json(self) -> dict:
        return {"cfl": self.cfl, "dirichlet": self.dirichlet}


def solve_heat(
    m: Model,
    f0: GridField,
    times: Sequence[float],
    cfg: HeatConfig = HeatConfig(),
    op: Optional[DiscreteOperator] = None,
) -> list[GridField]:
    """March u_t = Lu from f0 by explicit Euler, returning snapshots at the
    requested times (strictly increasing, >= f0.time)."""
    if not m.has_global_chart:
        raise SolverError(f"model {m.name} has no global chart for grid solving")
    times = sorted(float(t) for t in times)
    if times and times[0] < f0.time:
        raise SolverError("requested time precedes the initial condition")
    op = op or DiscreteOperator(m, f0.grid)
    dt_max = op.stable_dt(cfg.cfl)
    u = f0.values.copy()
    if cfg.dirichlet:
        _zero_boundary(u)
    t = f0.time
    sup = float(np.max(np.abs(u)))
    out = []
    for target in times:
        span = target - t
        if span > 0:
            steps = max(1, int(math.ceil(span / dt_max)))
            dt = span / steps
            for _ in range(steps):
                u = u + dt * op.apply_l(u)
                if cfg.dirichlet:
                    _zero_boundary(u)
            t = target
            if not np.all(np.isfinite(u)):
                raise SolverError(f"NaN/Inf at t={t:.4f} (dt={dt:.3e}, sup before blow-up {sup:.3e})")
            new_sup = float(np.max(np.abs(u)))
            if new_sup > sup * (1 + 1e-8) + 1e-12:
                raise SolverError(f"sup norm grew {sup:.6e} -> {new_sup:.6e}: CFL too large")
            sup = new_sup
        out.append(GridField(f0.grid, u.copy(), t))
    return out


def _zero_boundary(u: np.ndarray) -> None:
    for axis in range(u.ndim):
        sl = [slice(None)] * u.ndim
        sl[axis] = 0
        u[tuple(sl)] = 0.0
        sl[axis] = -1
        u[tuple(sl)] = 0.0


def mass(m: Model, gf: GridField, density_vals: Optional[np.ndarray] = None) -> float:
    if density_vals is None:
        density_vals = m.density.values(gf.grid.points()).reshape(gf.grid.shape)
    return float(np.sum(gf.values * density_vals) * gf.grid.cell_volume)


# ---------------------------------------------------------------------------
# Monte-Carlo sampling of the diffusion
# ---------------------------------------------------------------------------


@dataclass
class SampleSet:
    endpoints: np.ndarray
    x0: np.ndarray
    t: float
    step_count: int
    seed: int
    stepper_id: str
    clipped_fraction: float = 0.0


@dataclass
class CI:
    """Normal-approximation 95% confidence interval."""

    mean: float
    half_width: float

    @staticmethod
    def from_samples(values: np.ndarray) -> "CI":
        values = np.asarray(values, dtype=float)
        n = values.size
        if n == 0:
            raise ValueError("empty sample set")
        m = float(np.mean(values))
        if n == 1:
            return CI(m, math.inf)
        s = float(np.std(values, ddof=1))
        return CI(m, 1.96 * s / math.sqrt(n))


#: guard box half-width multiplier before a chart path counts as divergent
_CLIP_FACTOR = 50.0


def sample_paths(
    m: Model,
    x0,
    t: float,
    n: int,
    dt: Optional[float] = None,
    seed: int = 0,
    stepper: Optional[str] = None,
) -> SampleSet:
    """Simulate n paths of d xi = sqrt(2) sum_i X_i(xi) o dB^i to time t.

    Group models step geometrically, g <- g exp(sqrt(2 dt) sum eta_i E_i);
    chart models use Stratonovich-Heun.  The sqrt(2) scaling matches the
    generator L = sum X_i^2.
    """
    x0 = np.asarray(x0, dtype=float)
    if dt is None:
        dt = t / 400.0
    if dt > t:
        raise ValueError("dt must not exceed t")
    steps = max(1, int(round(t / dt)))
    dt = t / steps
    if stepper is None:
        stepper = "group" if m.group is not None else "heun"
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    pts = np.broadcast_to(x0, (n, x0.size)).copy()
    clipped = np.zeros(n, dtype=bool)
    d = m.d
    scale = math.sqrt(2.0 * dt)
    if stepper == "group":
        if m.group is None:
            raise ValueError(f"model {m.name} has no group structure")
        for _ in range(steps):
            xi = scale * rng.standard_normal((n, d))
            pts = m.group.horizontal_step(pts, xi)
    elif stepper == "heun":
        box = m.default_box
        if box is not None:
            lo = np.array([b[0] for b in box]) * _CLIP_FACTOR
            hi = np.array([b[1] for b in box]) * _CLIP_FACTOR
        for _ in range(steps):
            eta = scale * rng.standard_normal((n, d))
            drift0 = _frame_combination(m, pts, eta)
            pred = pts + drift0
            drift1 = _frame_combination(m, pred, eta)
            pts = pts + 0.5 * (drift0 + drift1)
            if box is not None:
                bad = np.any((pts < lo) | (pts > hi), axis=1)
                if np.any(bad):
                    clipped |= bad
                    pts = np.clip(pts, lo, hi)
    else:
        raise ValueError(f"unknown stepper {stepper!r}")
    return SampleSet(
        endpoints=pts,
        x0=x0,
        t=t,
        step_count=steps,
        seed=seed,
        stepper_id=stepper,
        clipped_fraction=float(np.mean(clipped)),
    )


def _frame_combination(m: Model, pts: np.ndarray, eta: np.ndarray) -> np.ndarray:
    """sum_i eta[:, i] * X_i(pts), evaluated in one batch."""
    out = np.zeros_like(pts)
    for i, X in enumerate(m.horizontal):
        coeff = X.coefficients_at(pts)
        out += eta[:, i : i + 1] * coeff
    return out


def estimate_semigroup(s: SampleSet, f) -> CI:
    """P_t f(x0) ~ mean of f over path endpoints."""
    if isinstance(f, ScalarField):
        vals = f.values(s.endpoints)
    else:
        vals = np.asarray(f(s.endpoints), dtype=float)
    return CI.from_samples(vals)


# ---------------------------------------------------------------------------
# Gradient-estimate deficit on grid solutions
# ---------------------------------------------------------------------------


@dataclass
class LiYauDeficit:
    deficit_full: float
    deficit_simplified: Optional[float]
    lhs: float
    lu_over_u: float
    gamma_ln: float
    gammaZ_ln: float
    point: tuple
    time: float


class LiYauEvaluator:
    """Grid-differenced Gamma(ln u), Gamma^Z(ln u) and Lu/u for one snapshot."""

    def __init__(self, m: Model, op: DiscreteOperator, snap: GridField, positivity_floor: float = 0.0):
        u = snap.values
        if np.any(u < positivity_floor):
            pass  # masked below; sampling must avoid non-positive stencils
        self.grid = snap.grid
        self.time = snap.time
        with np.errstate(divide="ignore", invalid="ignore"):
            ln_u = np.where(u > 0, np.log(np.where(u > 0, u, 1.0)), np.nan)
        self.gamma_ln = np.zeros_like(u)
        for i in range(m.d):
            xi = op.apply_frame_field(i, ln_u)
            self.gamma_ln += xi * xi
        self.gammaZ_ln = np.zeros_like(u)
        for j in range(m.h):
            zj = op.apply_frame_field(j, ln_u, vertical=True)
            self.gammaZ_ln += zj * zj
        with np.errstate(divide="ignore", invalid="ignore"):
            self.lu_over_u = np.where(u > 0, op.apply_l(u) / np.where(u > 0, u, 1.0), np.nan)

    def deficit_at(self, idx: tuple[int, ...], p: CDParams) -> LiYauDeficit:
        t = self.time
        if t <= 0:
            raise ValueError("gradient estimate needs t > 0")
        c = 1.0 + 3.0 * p.kappa / (2.0 * p.rho2)
        lhs = self.gamma_ln[idx] + (2.0 * p.rho2 / 3.0) * t * self.gammaZ_ln[idx]
        ratio = self.lu_over_u[idx]
        if not np.isfinite(lhs) or not np.isfinite(ratio):
            raise ValueError("solution not positive near the requested stencil")
        rhs_full = (
            (c - 2.0 * p.rho1 * t / 3.0) * ratio
            + p.d * p.rho1**2 * t / 6.0
            - 0.5 * p.rho1 * p.d * c
            + p.d * c**2 / (2.0 * t)
        )
        deficit_full = float(rhs_full - lhs)
        deficit_simplified = None
        if p.rho1 >= 0:
            rhs0 = c * ratio + p.d * c**2 / (2.0 * t)
            deficit_simplified = float(rhs0 - lhs)
        return LiYauDeficit(
            deficit_full=deficit_full,
            deficit_simplified=deficit_simplified,
            lhs=float(lhs),
            lu_over_u=float(ratio),
            gamma_ln=float(self.gamma_ln[idx]),
            gammaZ_ln=float(self.gammaZ_ln[idx]),
            point=tuple(float(v) for v in self.grid.node_point(idx)),
            time=t,
        )


def li_yau_deficit(
    m: Model,
    snapshots: Sequence[GridField],
    p: CDParams,
    x,
    t: float,
    op: Optional[DiscreteOperator] = None,
) -> LiYauDeficit:
    """Deficit (RHS - LHS) of the parabolic gradient estimate at (x, t),
    evaluated on the snapshot whose time is closest to t."""
    snap = min(snapshots, key=lambda s: abs(s.time - t))
    op = op or DiscreteOperator(m, snap.grid)
    ev = LiYauEvaluator(m, op, snap)
    return ev.deficit_at(snap.grid.nearest_node(x), p)


# ---------------------------------------------------------------------------
# Harnack deficit
# ---------------------------------------------------------------------------


@dataclass
class HarnackDeficit:
    lhs: CI
    rhs_base: CI
    factor: float
    deficit: float
    slack3: float
    dist: float


def harnack_factor(p: CDParams, s: float, t: float, dist: float) -> float:
    if not 0 < s < t:
        raise ValueError("need 0 < s < t")
    return (t / s) ** (p.D / 2.0) * math.exp((p.D / p.d) * dist**2 / (4.0 * (t - s)))


def harnack_deficit(
    m: Model,
    f,
    xs: tuple,
    yt: tuple,
    p: CDParams,
    dist: float,
    n_paths: int = 100_000,
    dt: Optional[float] = None,
    seed: int = 0,
) -> HarnackDeficit:
    """RHS - LHS of P_s f(x) <= P_t f(y) (t/s)^{D/2} exp(D/d d(x,y)^2/(4(t-s)))
    via Monte-Carlo semigroup values at both ends."""
    (x, s), (y, t) = xs, yt
    factor = harnack_factor(p, s, t, dist)
    lhs = estimate_semigroup(sample_paths(m, x, s, n_paths, dt, seed=seed), f)
    rhs = estimate_semigroup(sample_paths(m, y, t, n_paths, dt, seed=seed + 1), f)
    deficit = rhs.mean * factor - lhs.mean
    slack3 = 3.0 * (rhs.half_width * factor + lhs.half_width)
    return HarnackDeficit(lhs=lhs, rhs_base=rhs, factor=factor, deficit=float(deficit), slack3=float(slack3), dist=dist)


# ---------------------------------------------------------------------------
# Ball hitting and Poincare
# ---------------------------------------------------------------------------


@dataclass
class BallHitting:
    A: float
    prob: CI


def ball_hitting_probability(
    m: Model,
    x,
    r: float,
    A: float,
    distance_to_x: Callable[[np.ndarray], np.ndarray],
    n_paths: int = 20_000,
    seed: int = 0,
) -> CI:
    """P_{A r^2}(1_{B(x,r)})(x): fraction of diffusion paths still within
    distance r of x at time A r^2."""
    if not 0 < A < 1:
        raise ValueError("A must lie in (0, 1)")
    t = A * r * r
    ss = sample_paths(m, x, t, n_paths, dt=t / 200.0, seed=seed)
    dist = np.asarray(distance_to_x(ss.endpoints), dtype=float)
    inside = (dist < r).astype(float)
    inside[~np.isfinite(dist)] = 0.0
    p = float(np.mean(inside))
    half = 1.96 * math.sqrt(max(p * (1 - p), 1e-12) / n_paths)
    return CI(p, half)


def scan_ball_hitting(
    m: Model,
    x,
    r: float,
    distance_to_x,
    As: Sequence[float] = tuple(np.round(np.arange(0.05, 0.51, 0.05), 2)),
    n_paths: int = 20_000,
    seed: int = 0,
) -> tuple[Optional[float], list[BallHitting]]:
    """Scan A over a grid; return the largest A whose hitting probability is
    >= 1/2 minus its CI half-width, plus the full table."""
    table = []
    a_star = None
    for k, A in enumerate(As):
        ci = ball_hitting_probability(m, x, r, float(A), distance_to_x, n_paths, seed + k)
        table.append(BallHitting(float(A), ci))
        if ci.mean >= 0.5 - ci.half_width:
            a_star = float(A)
    return a_star, table


@dataclass
class PoincareResult:
    numerator: float
    denominator: float
    ratio: Optional[float]  # None when f is constant on the ball


def poincare_ratio(
    m: Model,
    f,
    x,
    r: float,
    df_values: np.ndarray,
    grid: GridSpec,
) -> PoincareResult:
    """[int_B |f - f_B|^2 dmu] / [r^2 int_B Gamma(f) dmu] over the distance-
    field ball B = {df < r}, midpoint quadrature."""
    mask = df_values < r
    if not np.any(mask):
        raise ValueError("ball contains no grid cells")
    pts = grid.points()
    dens = m.density.values(pts).reshape(grid.shape)
    f = as_field(f)
    fv = f.values(pts).reshape(grid.shape)
    gv = gamma_field(m, f).values(pts).reshape(grid.shape)
    w = dens[mask]
    vol = float(np.sum(w))
    f_bar = float(np.sum(fv[mask] * w) / vol)
    num = float(np.sum((fv[mask] - f_bar) ** 2 * w) * grid.cell_volume)
    den = float(r * r * np.sum(gv[mask] * w) * grid.cell_volume)
    if den <= 1e-300:
        return PoincareResult(num, den, None)
    return PoincareResult(num, den, num / den)
