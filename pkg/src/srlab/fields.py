"""Scalar and vector fields over a coordinate chart.

A :class:`ScalarField` is a small expression DAG whose nodes know how to
produce a :class:`~srlab.jets.Jet` at a batch of points.  Evaluation is pure
and memoised per call, so shared subexpressions (ubiquitous in the Gamma
calculus) are computed once.  Vector fields act on scalar fields through the
chain rule, losing one usable jet order per application.
"""

from __future__ import annotations

import ast
import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .jets import DEFAULT_MAX_ORDER, EvaluationDomainError, Jet, jet_space


class EvalContext:
    """One evaluation pass: a point batch plus a per-node jet memo."""

    __slots__ = ("points", "memo")

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim == 1:
            points = points[None, :]
        if points.ndim != 2:
            raise ValueError("points must have shape (n,) or (npoints, n)")
        if not np.all(np.isfinite(points)):
            raise ValueError("points must be finite")
        self.points = points
        self.memo: dict[int, Jet] = {}

    @property
    def npoints(self) -> int:
        return self.points.shape[0]

    @property
    def nvars(self) -> int:
        return self.points.shape[1]


class ScalarField:
    """Base class; subclasses implement ``_jet(ctx, order)``."""

    def jet(self, points, order: int) -> Jet:
        ctx = EvalContext(points)
        return self._jet_memo(ctx, order)

    def values(self, points) -> np.ndarray:
        return self.jet(points, 0).value()

    def value(self, point) -> float:
        return float(self.jet(point, 0).value()[0])

    def _jet_memo(self, ctx: EvalContext, order: int) -> Jet:
        cached = ctx.memo.get(id(self))
        if cached is not None and cached.order >= order:
            return cached.truncate(order)
        jet = self._jet(ctx, order)
        ctx.memo[id(self)] = jet
        return jet

    def _jet(self, ctx: EvalContext, order: int) -> Jet:  # pragma: no cover
        raise NotImplementedError

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return _lincomb([(1.0, self), (1.0, as_field(other))])

    __radd__ = __add__

    def __neg__(self):
        return _lincomb([(-1.0, self)])

    def __sub__(self, other):
        return _lincomb([(1.0, self), (-1.0, as_field(other))])

    def __rsub__(self, other):
        return _lincomb([(-1.0, self), (1.0, as_field(other))])

    def __mul__(self, other):
        if not isinstance(other, ScalarField) and np.isscalar(other):
            return _lincomb([(float(other), self)])
        return Product(self, as_field(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, ScalarField) and np.isscalar(other):
            return _lincomb([(1.0 / float(other), self)])
        return Quotient(self, as_field(other))

    def __rtruediv__(self, other):
        return Quotient(as_field(other), self)

    def __pow__(self, p):
        return Power(self, p)

    def partial(self, axis: int) -> "ScalarField":
        return Partial(self, axis)


def as_field(x) -> ScalarField:
    if isinstance(x, ScalarField):
        return x
    if np.isscalar(x):
        return Constant(float(x))
    raise TypeError(f"cannot interpret {x!r} as a scalar field")


class Constant(ScalarField):
    def __init__(self, c: float):
        self.c = float(c)

    def _jet(self, ctx, order):
        return Jet.constant(self.c, ctx.nvars, order, ctx.npoints)


class Coordinate(ScalarField):
    def __init__(self, axis: int):
        self.axis = axis

    def _jet(self, ctx, order):
        if self.axis >= ctx.nvars:
            raise ValueError(f"coordinate {self.axis} outside chart of dim {ctx.nvars}")
        return Jet.coordinate(ctx.points, self.axis, order)


class LinComb(ScalarField):
    """const + sum of coef * field; additions fold into one node."""

    def __init__(self, terms: Sequence[tuple[float, ScalarField]], const: float = 0.0):
        self.terms = tuple((float(c), f) for c, f in terms)
        self.const = float(const)

    def _jet(self, ctx, order):
        acc = None
        for c, f in self.terms:
            piece = f._jet_memo(ctx, order).scale(c)
            acc = piece if acc is None else acc + piece
        if acc is None:
            return Jet.constant(self.const, ctx.nvars, order, ctx.npoints)
        if self.const:
            acc = acc + self.const
        return acc


def _lincomb(terms: Iterable[tuple[float, ScalarField]], const: float = 0.0) -> ScalarField:
    flat: list[tuple[float, ScalarField]] = []
    c0 = const
    for c, f in terms:
        if isinstance(f, Constant):
            c0 += c * f.c
        elif isinstance(f, LinComb):
            c0 += c * f.const
            flat.extend((c * ci, fi) for ci, fi in f.terms)
        else:
            flat.append((c, f))
    if not flat:
        return Constant(c0)
    return LinComb(flat, c0)


class Product(ScalarField):
    def __init__(self, a: ScalarField, b: ScalarField):
        self.a, self.b = a, b

    def _jet(self, ctx, order):
        return self.a._jet_memo(ctx, order) * self.b._jet_memo(ctx, order)


class Quotient(ScalarField):
    def __init__(self, num: ScalarField, den: ScalarField):
        self.num, self.den = num, den

    def _jet(self, ctx, order):
        return self.num._jet_memo(ctx, order) / self.den._jet_memo(ctx, order)


class Power(ScalarField):
    def __init__(self, base: ScalarField, exponent: float):
        self.base = base
        self.exponent = float(exponent)

    def _jet(self, ctx, order):
        return self.base._jet_memo(ctx, order).powf(self.exponent)


_PRIMITIVES: dict[str, Callable[[Jet], Jet]] = {
    "exp": Jet.exp,
    "log": Jet.log,
    "sin": Jet.sin,
    "cos": Jet.cos,
    "sqrt": Jet.sqrt,
}


class Primitive(ScalarField):
    def __init__(self, name: str, arg: ScalarField):
        if name not in _PRIMITIVES:
            raise ValueError(f"unknown primitive {name!r}")
        self.name = name
        self.arg = arg

    def _jet(self, ctx, order):
        return _PRIMITIVES[self.name](self.arg._jet_memo(ctx, order))


def exp(f) -> ScalarField:
    return Primitive("exp", as_field(f))


def log(f) -> ScalarField:
    return Primitive("log", as_field(f))


def sin(f) -> ScalarField:
    return Primitive("sin", as_field(f))


def cos(f) -> ScalarField:
    return Primitive("cos", as_field(f))


def sqrt(f) -> ScalarField:
    return Primitive("sqrt", as_field(f))


class Partial(ScalarField):
    """d/dx_axis of a field; consumes one jet order of the argument."""

    def __init__(self, f: ScalarField, axis: int):
        self.f = f
        self.axis = axis

    def _jet(self, ctx, order):
        return self.f._jet_memo(ctx, order + 1).derivative(self.axis)


class Opaque(ScalarField):
    """A field defined by an arbitrary jet rule ``fn(points, order) -> Jet``."""

    def __init__(self, fn: Callable[[np.ndarray, int], Jet], name: str = "opaque"):
        self.fn = fn
        self.name = name

    def _jet(self, ctx, order):
        return self.fn(ctx.points, order)


class Polynomial(ScalarField):
    """Dense-coefficient polynomial; exact jets, serialisable coefficients."""

    def __init__(self, coeffs: Mapping[tuple[int, ...], float], nvars: int):
        self.nvars = int(nvars)
        clean = {}
        for alpha, c in coeffs.items():
            alpha = tuple(int(a) for a in alpha)
            if len(alpha) != self.nvars:
                raise ValueError("multi-index length does not match nvars")
            if c != 0.0:
                clean[alpha] = float(c)
        self.coeffs = clean
        self.degree = max((sum(a) for a in clean), default=0)

    def _jet(self, ctx, order):
        if ctx.nvars != self.nvars:
            raise ValueError("polynomial arity does not match chart dimension")
        # cache coordinate jet powers; monomials are products of those
        powers: list[list[Jet]] = []
        max_degs = [0] * self.nvars
        for alpha in self.coeffs:
            for i, a in enumerate(alpha):
                max_degs[i] = max(max_degs[i], a)
        for i in range(self.nvars):
            xi = Jet.coordinate(ctx.points, i, order)
            col = [None, xi]
            for k in range(2, max_degs[i] + 1):
                col.append(col[-1] * xi)
            powers.append(col)
        acc = Jet.constant(0.0, ctx.nvars, order, ctx.npoints)
        for alpha, c in self.coeffs.items():
            term = None
            for i, a in enumerate(alpha):
                if a == 0:
                    continue
                term = powers[i][a] if term is None else term * powers[i][a]
            acc = acc + (term.scale(c) if term is not None else c)
        return acc

    def to_json(self) -> dict:
        return {
            "kind": "poly",
            "nvars": self.nvars,
            "coeffs": {",".join(map(str, a)): c for a, c in self.coeffs.items()},
        }

    @staticmethod
    def from_json(doc: Mapping) -> "Polynomial":
        coeffs = {
            tuple(int(s) for s in key.split(",")): float(c)
            for key, c in doc["coeffs"].items()
        }
        return Polynomial(coeffs, int(doc["nvars"]))


def eval_jet(f: ScalarField, point, order: int, max_order: int = DEFAULT_MAX_ORDER) -> Jet:
    """Evaluate all partials of ``f`` at ``point`` through ``order``.

    Raises :class:`EvaluationDomainError` where ``f`` is undefined and
    ``ValueError`` when the order exceeds the configured maximum.
    """
    if order < 0 or order > max_order:
        raise ValueError(f"jet order {order} outside [0, {max_order}]")
    return f.jet(point, order)


class VectorField:
    """A chart vector field: one coefficient ScalarField per coordinate."""

    __slots__ = ("components", "name")

    def __init__(self, components: Sequence[ScalarField], name: str = ""):
        self.components = tuple(as_field(c) for c in components)
        self.name = name

    @property
    def dim(self) -> int:
        return len(self.components)

    def __call__(self, f: ScalarField) -> ScalarField:
        """(Vf)(x) = sum_i V_i(x) d_i f(x)."""
        f = as_field(f)
        terms = []
        for i, vi in enumerate(self.components):
            if isinstance(vi, Constant):
                if vi.c != 0.0:
                    terms.append((vi.c, Partial(f, i)))
            else:
                terms.append((1.0, Product(vi, Partial(f, i))))
        return _lincomb(terms)

    def coefficients_at(self, points) -> np.ndarray:
        """Coefficient values, shape (npoints, dim)."""
        ctx = EvalContext(points)
        cols = [c._jet_memo(ctx, 0).value() for c in self.components]
        return np.stack(cols, axis=1)

    def bracket(self, other: "VectorField") -> "VectorField":
        """[V, W], components V(W_i) - W(V_i)."""
        comps = [
            self(other.components[i]) - other(self.components[i])
            for i in range(self.dim)
        ]
        name = f"[{self.name},{other.name}]" if self.name and other.name else ""
        return VectorField(comps, name)


def apply_field(v: VectorField, f: ScalarField) -> ScalarField:
    return v(f)


def lie_bracket(v: VectorField, w: VectorField) -> VectorField:
    return v.bracket(w)


def coordinate_fields(n: int) -> list[ScalarField]:
    return [Coordinate(i) for i in range(n)]


# -- expression strings ------------------------------------------------------

_ALLOWED_CALLS = set(_PRIMITIVES)
_CONSTANTS = {"pi": math.pi, "e": math.e}


def parse_field(src: str, variables: Sequence[str]) -> ScalarField:
    """Compile an arithmetic expression string into a ScalarField.

    Supports +, -, *, /, ** (numeric exponents), the chart variables, the
    constants pi and e, and the calls exp/log/sin/cos/sqrt.
    """
    var_pos = {name: i for i, name in enumerate(variables)}
    tree = ast.parse(src, mode="eval")

    def build(node) -> ScalarField:
        if isinstance(node, ast.Expression):
            return build(node.body)
        if isinstance(node, ast.Constant):
            if isinstance(node.value, (int, float)):
                return Constant(float(node.value))
            raise ValueError(f"unsupported literal {node.value!r}")
        if isinstance(node, ast.Name):
            if node.id in var_pos:
                return Coordinate(var_pos[node.id])
            if node.id in _CONSTANTS:
                return Constant(_CONSTANTS[node.id])
            raise ValueError(f"unknown name {node.id!r}")
        if isinstance(node, ast.UnaryOp):
            if isinstance(node.op, ast.USub):
                return -build(node.operand)
            if isinstance(node.op, ast.UAdd):
                return build(node.operand)
            raise ValueError("unsupported unary operator")
        if isinstance(node, ast.BinOp):
            if isinstance(node.op, ast.Pow):
                exponent = node.right
                if isinstance(exponent, ast.UnaryOp) and isinstance(exponent.op, ast.USub):
                    if isinstance(exponent.operand, ast.Constant):
                        return Power(build(node.left), -float(exponent.operand.value))
                if not isinstance(exponent, ast.Constant):
                    raise ValueError("exponent must be a numeric literal")
                return Power(build(node.left), float(exponent.value))
            left, right = build(node.left), build(node.right)
            if isinstance(node.op, ast.Add):
                return left + right
            if isinstance(node.op, ast.Sub):
                return left - right
            if isinstance(node.op, ast.Mult):
                return left * right
            if isinstance(node.op, ast.Div):
                return left / right
            raise ValueError("unsupported binary operator")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _ALLOWED_CALLS:
                raise ValueError("only exp/log/sin/cos/sqrt calls are allowed")
            if len(node.args) != 1 or node.keywords:
                raise ValueError("primitive calls take exactly one argument")
            return Primitive(node.func.id, build(node.args[0]))
        raise ValueError(f"unsupported syntax: {ast.dump(node)}")

    return build(tree)
