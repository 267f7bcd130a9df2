"""Bundled sub-Riemannian model spaces.

Each model packages a chart dimension, a horizontal frame, an optional
vertical frame, a measure density and a few capability flags.  Group models
(the three-dimensional Sasakian family at nonzero curvature parameter) are
realised on ambient matrix coordinates: SU(2) as unit quaternions in R^4,
SL(2,R) as 2x2 real matrices in R^4.  Left translation is linear there, so
the left-invariant frame fields are polynomial and the jet engine
differentiates them exactly.  A separate exponential-coordinate chart
realisation supports grid work near the identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .fields import (
    Constant,
    Coordinate,
    EvalContext,
    Jet,
    ScalarField,
    VectorField,
    as_field,
    parse_field,
)
from .jets import jet_space


@dataclass(frozen=True)
class BracketRelation:
    """Expected structure relation [a, b] = sum expected[label] * frame[label]."""

    a: str
    b: str
    expected: Mapping[str, float]


class GroupOps:
    """Intrinsic operations a matrix/group model exposes: Haar-ish sampling
    and the geometric Euler step g <- g * exp(xi_1 E_1 + xi_2 E_2 + ...)."""

    def random_points(self, rng: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError

    def horizontal_step(self, points: np.ndarray, xi: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def identity(self) -> np.ndarray:
        raise NotImplementedError


@dataclass
class Model:
    name: str
    n: int
    horizontal: tuple[VectorField, ...]
    vertical: tuple[VectorField, ...]
    density: ScalarField
    is_group: bool = False
    is_compact: bool = False
    has_global_chart: bool = True
    bracket_table: tuple[BracketRelation, ...] = ()
    default_box: Optional[tuple[tuple[float, float], ...]] = None
    group: Optional[GroupOps] = None
    #: homogeneous dimension, when the model carries natural dilations
    homogeneous_dim: Optional[float] = None

    @property
    def d(self) -> int:
        return len(self.horizontal)

    @property
    def h(self) -> int:
        return len(self.vertical)

    def frame(self) -> dict[str, VectorField]:
        out = {f"X{i + 1}": v for i, v in enumerate(self.horizontal)}
        out.update({f"Z{j + 1}": v for j, v in enumerate(self.vertical)})
        return out

    def sample_points(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Random chart points: box-uniform on chart models, intrinsic on
        group models without a global chart."""
        if self.has_global_chart and self.default_box is not None:
            lo = np.array([b[0] for b in self.default_box])
            hi = np.array([b[1] for b in self.default_box])
            return lo + (hi - lo) * rng.random((count, self.n))
        if self.group is not None:
            return self.group.random_points(rng, count)
        raise ValueError(f"model {self.name} has no sampling rule")


def _box(half: float, n: int) -> tuple[tuple[float, float], ...]:
    return tuple((-half, half) for _ in range(n))


# ---------------------------------------------------------------------------
# Euclidean space
# ---------------------------------------------------------------------------


def euclidean(n: int) -> Model:
    """R^n with the coordinate frame; the vertical form vanishes."""
    if n < 1:
        raise ValueError("dimension must be >= 1")
    horiz = tuple(
        VectorField([Constant(1.0 if j == i else 0.0) for j in range(n)], f"X{i + 1}")
        for i in range(n)
    )
    return Model(
        name=f"euclidean{n}",
        n=n,
        horizontal=horiz,
        vertical=(),
        density=Constant(1.0),
        is_group=True,
        default_box=_box(3.0, n),
        homogeneous_dim=float(n),
    )


# ---------------------------------------------------------------------------
# Heisenberg group (symmetric exponential chart)
# ---------------------------------------------------------------------------


class _HeisenbergOps(GroupOps):
    def random_points(self, rng, count):
        return -2.0 + 4.0 * rng.random((count, 3))

    def horizontal_step(self, points, xi):
        x, y, z = points[:, 0], points[:, 1], points[:, 2]
        a, b = xi[:, 0], xi[:, 1]
        return np.stack([x + a, y + b, z + 0.5 * (x * b - y * a)], axis=1)

    def identity(self):
        return np.zeros(3)


def heisenberg() -> Model:
    """The Heisenberg group on R^3: X = dx - (y/2) dz, Y = dy + (x/2) dz,
    Z = dz, Lebesgue Haar measure."""
    x, y = Coordinate(0), Coordinate(1)
    zero, one = Constant(0.0), Constant(1.0)
    X = VectorField([one, zero, -0.5 * y], "X1")
    Y = VectorField([zero, one, 0.5 * x], "X2")
    Z = VectorField([zero, zero, one], "Z1")
    table = (
        BracketRelation("X1", "X2", {"Z1": 1.0}),
        BracketRelation("X1", "Z1", {}),
        BracketRelation("X2", "Z1", {}),
    )
    return Model(
        name="heisenberg",
        n=3,
        horizontal=(X, Y),
        vertical=(Z,),
        density=Constant(1.0),
        is_group=True,
        bracket_table=table,
        default_box=_box(3.0, 3),
        group=_HeisenbergOps(),
        homogeneous_dim=4.0,
    )


# ---------------------------------------------------------------------------
# The three-dimensional Sasakian family
# ---------------------------------------------------------------------------


def _quat_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    p0, p1, p2, p3 = p[..., 0], p[..., 1], p[..., 2], p[..., 3]
    q0, q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            p0 * q0 - p1 * q1 - p2 * q2 - p3 * q3,
            p0 * q1 + p1 * q0 + p2 * q3 - p3 * q2,
            p0 * q2 - p1 * q3 + p2 * q0 + p3 * q1,
            p0 * q3 + p1 * q2 - p2 * q1 + p3 * q0,
        ],
        axis=-1,
    )


def _quat_left_invariant(eps: Sequence[float], name: str) -> VectorField:
    """Field q -> q * E with E the pure-imaginary quaternion (0, eps)."""
    e1, e2, e3 = (float(v) for v in eps)
    q0, q1, q2, q3 = (Coordinate(i) for i in range(4))

    def lin(*pairs):
        terms = [(c, f) for c, f in pairs if c != 0.0]
        if not terms:
            return Constant(0.0)
        acc = terms[0][0] * terms[0][1]
        for c, f in terms[1:]:
            acc = acc + c * f
        return acc

    return VectorField(
        [
            lin((-e1, q1), (-e2, q2), (-e3, q3)),
            lin((e1, q0), (e3, q2), (-e2, q3)),
            lin((e2, q0), (-e3, q1), (e1, q3)),
            lin((e3, q0), (e2, q1), (-e1, q2)),
        ],
        name,
    )


class _SU2Ops(GroupOps):
    def __init__(self, a: float):
        self.a = a  # algebra scaling sqrt(rho1)

    def random_points(self, rng, count):
        q = rng.standard_normal((count, 4))
        return q / np.linalg.norm(q, axis=1, keepdims=True)

    def horizontal_step(self, points, xi):
        # exp of the pure quaternion (a/2)(xi1 i + xi2 j)
        v = 0.5 * self.a * xi
        theta = np.sqrt(v[:, 0] ** 2 + v[:, 1] ** 2)
        s = np.where(theta > 1e-300, np.sin(theta) / np.maximum(theta, 1e-300), 1.0)
        g = np.stack([np.cos(theta), s * v[:, 0], s * v[:, 1], np.zeros_like(theta)], axis=1)
        out = _quat_mul(points, g)
        return out / np.linalg.norm(out, axis=1, keepdims=True)

    def identity(self):
        return np.array([1.0, 0.0, 0.0, 0.0])


def _su2_model(rho1: float) -> Model:
    a = math.sqrt(rho1)
    X = _quat_left_invariant((0.5 * a, 0.0, 0.0), "X1")
    Y = _quat_left_invariant((0.0, 0.5 * a, 0.0), "X2")
    Z = _quat_left_invariant((0.0, 0.0, 0.5 * rho1), "Z1")
    table = (
        BracketRelation("X1", "X2", {"Z1": 1.0}),
        BracketRelation("X1", "Z1", {"X2": -rho1}),
        BracketRelation("X2", "Z1", {"X1": rho1}),
    )
    return Model(
        name=f"sasakian({rho1:g})",
        n=4,
        horizontal=(X, Y),
        vertical=(Z,),
        density=Constant(1.0),
        is_group=True,
        is_compact=True,
        has_global_chart=False,
        bracket_table=table,
        group=_SU2Ops(a),
    )


_SL2_BASIS = (
    0.5 * np.array([[1.0, 0.0], [0.0, -1.0]]),
    0.5 * np.array([[0.0, 1.0], [1.0, 0.0]]),
    0.5 * np.array([[0.0, 1.0], [-1.0, 0.0]]),
)


def _mat_left_invariant(E: np.ndarray, name: str) -> VectorField:
    """Field m -> m @ E on the chart (m11, m12, m21, m22)."""
    m11, m12, m21, m22 = (Coordinate(i) for i in range(4))
    return VectorField(
        [
            E[0, 0] * m11 + E[1, 0] * m12,
            E[0, 1] * m11 + E[1, 1] * m12,
            E[0, 0] * m21 + E[1, 0] * m22,
            E[0, 1] * m21 + E[1, 1] * m22,
        ],
        name,
    )


def _expm2_traceless(A: np.ndarray) -> np.ndarray:
    """exp of a batch (..., 2, 2) of traceless matrices, closed form."""
    det = A[..., 0, 0] * A[..., 1, 1] - A[..., 0, 1] * A[..., 1, 0]
    eye = np.zeros_like(A)
    eye[..., 0, 0] = 1.0
    eye[..., 1, 1] = 1.0
    out = np.empty_like(A)
    # det < 0: cosh branch; det > 0: cos branch; det ~ 0: series
    theta = np.sqrt(np.abs(det))
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(det < 0, np.cosh(theta), np.cos(theta))
        s = np.where(det < 0, np.sinh(theta) / theta, np.sin(theta) / theta)
    c = np.where(small, 1.0 - det / 2.0, c)
    s = np.where(small, 1.0 - det / 6.0, s)
    out = c[..., None, None] * eye + s[..., None, None] * A
    return out


class _SL2Ops(GroupOps):
    def __init__(self, basis_xyz: tuple[np.ndarray, np.ndarray, np.ndarray], box_half=0.8):
        self.basis = basis_xyz
        self.box_half = box_half

    def random_points(self, rng, count):
        u = self.box_half * (2.0 * rng.random((count, 3)) - 1.0)
        A = (
            u[:, 0, None, None] * self.basis[0]
            + u[:, 1, None, None] * self.basis[1]
            + u[:, 2, None, None] * self.basis[2]
        )
        return _expm2_traceless(A).reshape(count, 4)

    def horizontal_step(self, points, xi):
        A = xi[:, 0, None, None] * self.basis[0] + xi[:, 1, None, None] * self.basis[1]
        g = _expm2_traceless(A)
        m = points.reshape(-1, 2, 2)
        out = np.einsum("pij,pjk->pik", m, g)
        return out.reshape(-1, 4)

    def identity(self):
        return np.array([1.0, 0.0, 0.0, 1.0])


def _sl2_model(rho1: float) -> Model:
    a = math.sqrt(-rho1)
    EX = a * _SL2_BASIS[0]
    EY = a * _SL2_BASIS[1]
    EZ = (-rho1) * _SL2_BASIS[2]
    X = _mat_left_invariant(EX, "X1")
    Y = _mat_left_invariant(EY, "X2")
    Z = _mat_left_invariant(EZ, "Z1")
    table = (
        BracketRelation("X1", "X2", {"Z1": 1.0}),
        BracketRelation("X1", "Z1", {"X2": -rho1}),
        BracketRelation("X2", "Z1", {"X1": rho1}),
    )
    return Model(
        name=f"sasakian({rho1:g})",
        n=4,
        horizontal=(X, Y),
        vertical=(Z,),
        density=Constant(1.0),
        is_group=True,
        has_global_chart=False,
        bracket_table=table,
        group=_SL2Ops((EX, EY, EZ)),
    )


def sasakian(rho1: float) -> Model:
    """The 3-D Lie group with [X,Y] = Z, [X,Z] = -rho1 Y, [Y,Z] = rho1 X:
    Heisenberg at 0, SU(2) for rho1 > 0, SL(2,R) for rho1 < 0."""
    if rho1 == 0:
        return heisenberg()
    if rho1 > 0:
        return _su2_model(float(rho1))
    return _sl2_model(float(rho1))


# ---------------------------------------------------------------------------
# Exponential-coordinate chart for the Sasakian family
# ---------------------------------------------------------------------------


def _series_inverse(c: np.ndarray) -> np.ndarray:
    """Coefficients of 1 / sum c_k z^k given c_0 != 0."""
    b = np.zeros_like(c)
    b[0] = 1.0 / c[0]
    for m in range(1, len(c)):
        b[m] = -np.dot(c[1 : m + 1], b[m - 1 :: -1][: m]) / c[0]
    return b


def _dexp_series(terms: int) -> tuple[np.ndarray, np.ndarray]:
    """Taylor coefficients of (1-e^{-z})/z and of its reciprocal z/(1-e^{-z})."""
    psi = np.array([(-1.0) ** k / math.factorial(k + 1) for k in range(terms)])
    phi = _series_inverse(psi)
    return psi, phi


class _AdSeries:
    """Evaluates S(u) = sum_k coeff_k * ad_u^k entrywise as jets, where
    ad_u = sum_i u_i * ad_i is linear in the chart coordinates."""

    def __init__(self, ad: np.ndarray, coeffs: np.ndarray):
        self.ad = ad  # (n, n, n): ad[i] is the matrix of ad_{E_i}
        self.coeffs = coeffs

    def entries(self, ctx: EvalContext, order: int) -> list[list[Jet]]:
        key = (id(self), order)
        cached = ctx.memo.get(key)
        if cached is not None:
            return cached
        n = self.ad.shape[1]
        npts = ctx.npoints
        coords = [Jet.coordinate(ctx.points, i, order) for i in range(self.ad.shape[0])]
        zero = Jet.constant(0.0, ctx.nvars, order, npts)
        # A[r][c] = (ad_u)_{rc} as a jet
        A = [[zero for _ in range(n)] for _ in range(n)]
        for i in range(self.ad.shape[0]):
            for r in range(n):
                for c in range(n):
                    w = self.ad[i, r, c]
                    if w != 0.0:
                        A[r][c] = A[r][c] + coords[i].scale(w)
        S = [
            [Jet.constant(self.coeffs[0] if r == c else 0.0, ctx.nvars, order, npts) for c in range(n)]
            for r in range(n)
        ]
        P = [[Jet.constant(1.0 if r == c else 0.0, ctx.nvars, order, npts) for c in range(n)] for r in range(n)]
        for k in range(1, len(self.coeffs)):
            P = [
                [sum((P[r][m] * A[m][c] for m in range(n)), zero) for c in range(n)]
                for r in range(n)
            ]
            ck = self.coeffs[k]
            if ck != 0.0:
                S = [[S[r][c] + P[r][c].scale(ck) for c in range(n)] for r in range(n)]
        ctx.memo[key] = S
        return S


class _AdSeriesEntry(ScalarField):
    def __init__(self, series: _AdSeries, row: int, col: int):
        self.series = series
        self.row = row
        self.col = col

    def _jet(self, ctx, order):
        return self.series.entries(ctx, order)[self.row][self.col]


class _AdSeriesDet(ScalarField):
    def __init__(self, series: _AdSeries):
        self.series = series

    def _jet(self, ctx, order):
        m = self.series.entries(ctx, order)
        det = (
            m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
        )
        return det


def sasakian_chart(rho1: float, half_width: float = 1.4, terms: int = 40) -> Model:
    """Exponential-coordinate (first kind) chart of the Sasakian model around
    the identity: u -> exp(u1 X + u2 Y + u3 Z).

    The frame coefficients are columns of ad_u/(1 - e^{-ad_u}) and the Haar
    density is det((1 - e^{-ad_u})/ad_u); both series converge for
    ||ad_u|| < 2 pi, which bounds the usable box.  At rho1 = 0 this chart
    reduces exactly to the symmetric Heisenberg chart.
    """
    r = float(rho1)
    # ad matrices in the basis (X, Y, Z); rows/cols ordered the same way
    ad = np.zeros((3, 3, 3))
    ad[0] = [[0.0, 0.0, 0.0], [0.0, 0.0, -r], [0.0, 1.0, 0.0]]  # ad_X
    ad[1] = [[0.0, 0.0, r], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]  # ad_Y
    ad[2] = [[0.0, -r, 0.0], [r, 0.0, 0.0], [0.0, 0.0, 0.0]]  # ad_Z
    scale = max(abs(r), 1.0)
    if 3 * half_width * scale >= 2 * math.pi * 0.95:
        raise ValueError("chart box too large for the dexp series to converge")
    psi, phi = _dexp_series(terms)
    phi_series = _AdSeries(ad, phi)
    psi_series = _AdSeries(ad, psi)
    frames = []
    for col, label in ((0, "X1"), (1, "X2"), (2, "Z1")):
        comps = [_AdSeriesEntry(phi_series, row, col) for row in range(3)]
        frames.append(VectorField(comps, label))
    density = _AdSeriesDet(psi_series)
    table = (
        BracketRelation("X1", "X2", {"Z1": 1.0}),
        BracketRelation("X1", "Z1", {"X2": -r}),
        BracketRelation("X2", "Z1", {"X1": r}),
    )
    return Model(
        name=f"sasakian-chart({r:g})",
        n=3,
        horizontal=(frames[0], frames[1]),
        vertical=(frames[2],),
        density=density,
        is_group=True,
        bracket_table=table,
        default_box=_box(half_width, 3),
    )


def chart_realization(m: Model) -> Model:
    """A grid-capable chart realisation of a model: the model itself when it
    already has a global chart, the exponential chart for Sasakian matrix
    models."""
    if m.has_global_chart:
        return m
    if m.name.startswith("sasakian("):
        rho1 = float(m.name[len("sasakian(") : -1])
        return sasakian_chart(rho1)
    raise ValueError(f"no chart realisation available for {m.name}")


# ---------------------------------------------------------------------------
# Step-2 Carnot groups
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CarnotSpec:
    """Structure constants of a step-2 stratified algebra: [X_i, X_j] =
    sum_k B[k, i, j] Z_k with B skew in (i, j) and bracket-generating."""

    d: int
    h: int
    B: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B, dtype=np.float64)
        if B.shape != (self.h, self.d, self.d):
            raise ValueError(f"B must have shape (h, d, d) = {(self.h, self.d, self.d)}")
        if not np.allclose(B, -np.swapaxes(B, 1, 2), atol=1e-14):
            raise ValueError("structure constants must be skew in the horizontal indices")
        pairs = [B[:, i, j] for i in range(self.d) for j in range(i + 1, self.d)]
        if pairs:
            rank = np.linalg.matrix_rank(np.stack(pairs)) if self.h > 0 else 0
        else:
            rank = 0
        if self.h > 0 and rank < self.h:
            raise ValueError("structure constants do not span the vertical layer")
        object.__setattr__(self, "B", B)

    @property
    def homogeneous_dim(self) -> int:
        return self.d + 2 * self.h


class _CarnotOps(GroupOps):
    def __init__(self, spec: CarnotSpec):
        self.spec = spec

    def random_points(self, rng, count):
        n = self.spec.d + self.spec.h
        return -2.0 + 4.0 * rng.random((count, n))

    def horizontal_step(self, points, xi):
        d, h, B = self.spec.d, self.spec.h, self.spec.B
        x, z = points[:, :d], points[:, d:]
        # BCH for step 2: z gains -(1/2) B^k_{ij} x_j xi_i (matching the frame sign)
        gain = -0.5 * np.einsum("kij,pj,pi->pk", B, x, xi)
        return np.concatenate([x + xi, z + gain], axis=1)

    def identity(self):
        return np.zeros(self.spec.d + self.spec.h)


def carnot_step2(spec: CarnotSpec) -> Model:
    """Exponential-coordinate step-2 Carnot group with frame
    X_i = d_i - (1/2) sum_{j,k} B^k_{ij} x_j d_{z_k}, Z_k = d_{z_k}.

    With this sign convention [X_i, X_j] = sum_k B^k_{ij} Z_k, and the
    d=2, h=1, B^1_{12}=1 case is the Heisenberg frame verbatim.
    """
    d, h, B = spec.d, spec.h, spec.B
    n = d + h
    zero, one = Constant(0.0), Constant(1.0)
    horiz = []
    for i in range(d):
        comps: list[ScalarField] = [one if j == i else zero for j in range(d)]
        for k in range(h):
            terms = None
            for j in range(d):
                w = -0.5 * B[k, i, j]
                if w != 0.0:
                    t = w * Coordinate(j)
                    terms = t if terms is None else terms + t
            comps.append(terms if terms is not None else zero)
        horiz.append(VectorField(comps, f"X{i + 1}"))
    vert = []
    for k in range(h):
        comps = [one if j == d + k else zero for j in range(n)]
        vert.append(VectorField(comps, f"Z{k + 1}"))
    table = []
    for i in range(d):
        for j in range(i + 1, d):
            expected = {f"Z{k + 1}": B[k, i, j] for k in range(h) if B[k, i, j] != 0.0}
            table.append(BracketRelation(f"X{i + 1}", f"X{j + 1}", expected))
    return Model(
        name=f"carnot2(d={d},h={h})",
        n=n,
        horizontal=tuple(horiz),
        vertical=tuple(vert),
        density=Constant(1.0),
        is_group=True,
        bracket_table=tuple(table),
        default_box=_box(2.0, n),
        group=_CarnotOps(spec),
        homogeneous_dim=float(spec.homogeneous_dim),
    )


def free_carnot_step2(d: int) -> Model:
    """Free step-2 group on d horizontal generators: h = d(d-1)/2."""
    h = d * (d - 1) // 2
    B = np.zeros((h, d, d))
    k = 0
    for i in range(d):
        for j in range(i + 1, d):
            B[k, i, j] = 1.0
            B[k, j, i] = -1.0
            k += 1
    return carnot_step2(CarnotSpec(d, h, B))


# ---------------------------------------------------------------------------
# Validation and JSON definition files
# ---------------------------------------------------------------------------


@dataclass
class ValidationReport:
    model: str
    bracket_residual: float
    hoermander_ok: bool
    min_rank: int
    density_min: float
    ok: bool
    messages: tuple[str, ...] = ()


def validate_model(
    m: Model,
    rng: Optional[np.random.Generator] = None,
    npoints: int = 100,
    tol: float = 1e-10,
) -> ValidationReport:
    """Check declared bracket relations, the depth-2 Hoermander rank
    condition and density positivity at sampled points."""
    rng = rng or np.random.default_rng(0)
    pts = m.sample_points(rng, npoints)
    frame = m.frame()
    worst = 0.0
    messages = []
    for rel in m.bracket_table:
        br = frame[rel.a].bracket(frame[rel.b])
        expect_comps = []
        for i in range(m.n):
            term: ScalarField = Constant(0.0)
            for label, c in rel.expected.items():
                term = term + c * frame[label].components[i]
            expect_comps.append(term)
        for i in range(m.n):
            resid = np.max(np.abs(br.components[i].values(pts) - expect_comps[i].values(pts)))
            worst = max(worst, float(resid))
    if worst > tol:
        messages.append(f"bracket residual {worst:.3e} exceeds {tol:.1e}")

    # Hoermander: horizontal fields plus their pairwise brackets span R^n
    fields = list(m.horizontal)
    for i in range(m.d):
        for j in range(i + 1, m.d):
            fields.append(m.horizontal[i].bracket(m.horizontal[j]))
    min_rank = m.n
    vecs = np.stack([f.coefficients_at(pts) for f in fields], axis=1)  # (P, F, n)
    target_rank = m.n if m.has_global_chart else m.n - 1  # matrix models sit on a level set
    for p in range(pts.shape[0]):
        rank = np.linalg.matrix_rank(vecs[p], tol=1e-8)
        min_rank = min(min_rank, int(rank))
    hoermander_ok = min_rank >= target_rank
    if not hoermander_ok:
        messages.append(f"depth-2 span rank {min_rank} < {target_rank}")

    dens = m.density.values(pts)
    density_min = float(np.min(dens))
    if density_min <= 0:
        messages.append("density not strictly positive on sampled points")

    ok = worst <= tol and hoermander_ok and density_min > 0
    return ValidationReport(
        model=m.name,
        bracket_residual=worst,
        hoermander_ok=hoermander_ok,
        min_rank=min_rank,
        density_min=density_min,
        ok=ok,
        messages=tuple(messages),
    )


def model_from_json(doc: Mapping) -> Model:
    """Build a model from a definition document (see README for the schema)."""
    kind = doc.get("type")
    if kind == "euclidean":
        return euclidean(int(doc["n"]))
    if kind == "heisenberg":
        return heisenberg()
    if kind == "sasakian":
        return sasakian(float(doc["rho1"]))
    if kind == "carnot2":
        spec = CarnotSpec(int(doc["d"]), int(doc["h"]), np.asarray(doc["B"], dtype=float))
        return carnot_step2(spec)
    if kind == "custom":
        variables = list(doc["variables"])
        n = len(variables)
        horiz = tuple(
            VectorField([parse_field(src, variables) for src in comp], f"X{i + 1}")
            for i, comp in enumerate(doc["horizontal"])
        )
        vert = tuple(
            VectorField([parse_field(src, variables) for src in comp], f"Z{j + 1}")
            for j, comp in enumerate(doc.get("vertical", []))
        )
        for v in horiz + vert:
            if v.dim != n:
                raise ValueError("frame component count must match the variable list")
        density = parse_field(doc.get("density", "1"), variables)
        box = doc.get("box")
        return Model(
            name=doc.get("name", "custom"),
            n=n,
            horizontal=horiz,
            vertical=vert,
            density=density,
            default_box=tuple((float(a), float(b)) for a, b in box) if box else _box(2.0, n),
        )
    raise ValueError(f"unknown model type {kind!r}")


def load_model(source) -> Model:
    """Accepts a model name, a JSON document dict, or a path to a JSON file."""
    if isinstance(source, Model):
        return source
    if isinstance(source, Mapping):
        return model_from_json(source)
    if isinstance(source, str):
        name = source.strip()
        if name.startswith("{"):
            return model_from_json(json.loads(name))
        lowered = name.lower()
        if lowered == "heisenberg":
            return heisenberg()
        if lowered.startswith("euclidean"):
            return euclidean(int(lowered.removeprefix("euclidean")))
        if lowered.startswith("sasakian_chart(") and lowered.endswith(")"):
            return sasakian_chart(float(lowered[len("sasakian_chart(") : -1]))
        if lowered.startswith("sasakian(") and lowered.endswith(")"):
            return sasakian(float(lowered[len("sasakian(") : -1]))
        if lowered.startswith("carnot-free"):
            return free_carnot_step2(int(lowered.removeprefix("carnot-free")))
        try:
            return model_from_json(json.loads(open(name).read()))
        except FileNotFoundError:
            raise ValueError(f"unknown model reference {source!r}")
    raise TypeError(f"cannot resolve model from {source!r}")
