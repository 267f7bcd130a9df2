"""Truncated multivariate Taylor-jet arithmetic.

A jet of order ``k`` at a base point stores the scaled partials
``c_alpha = (d^alpha f)(x) / alpha!`` for every multi-index ``|alpha| <= k``.
Sums, products, quotients and composition with analytic primitives act on
these coefficient tables exactly (up to float rounding), so polynomial
inputs differentiate to machine precision.  Jets are vectorised over a
batch of base points: the coefficient array has shape ``(n_coeffs, n_points)``.

Multi-indices are enumerated degree block by degree block, so the
coefficient table of an order-``k`` jet is a prefix of the table of any
higher-order jet over the same variables.  Truncation is a slice.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np
import scipy.sparse as sp

#: Largest jet order the public evaluation entry points accept.  Second-order
#: Gamma forms consume third derivatives; one spare order is kept for
#: diagnostics.
DEFAULT_MAX_ORDER = 4


class EvaluationDomainError(ValueError):
    """A field was evaluated where it is undefined (log of a non-positive
    value, division by zero, fractional power of a negative base...)."""


def _compositions(total: int, n: int) -> Iterator[tuple[int, ...]]:
    if n == 1:
        yield (total,)
        return
    for head in range(total, -1, -1):
        for rest in _compositions(total - head, n - 1):
            yield (head,) + rest


def multi_indices(nvars: int, order: int) -> list[tuple[int, ...]]:
    """All exponent tuples with ``|alpha| <= order``, graded order."""
    out: list[tuple[int, ...]] = []
    for deg in range(order + 1):
        out.extend(_compositions(deg, nvars))
    return out


@lru_cache(maxsize=None)
def jet_space(nvars: int, order: int) -> "JetSpace":
    return JetSpace(nvars, order)


class JetSpace:
    """Coefficient layout plus cached multiplication/derivative tables."""

    def __init__(self, nvars: int, order: int):
        if nvars < 1 or order < 0:
            raise ValueError("need nvars >= 1 and order >= 0")
        self.nvars = nvars
        self.order = order
        self.indices = tuple(multi_indices(nvars, order))
        self.position = {alpha: i for i, alpha in enumerate(self.indices)}
        self.size = len(self.indices)
        self._degrees = np.array([sum(a) for a in self.indices])
        self._mul = None
        self._deriv: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def __repr__(self) -> str:  # pragma: no cover
        return f"JetSpace(nvars={self.nvars}, order={self.order})"

    @property
    def mul_table(self):
        """Arrays (ia, ib) and a scatter matrix S so that the coefficients of
        a product are ``S @ (a[ia] * b[ib])``."""
        if self._mul is None:
            ia, ib, ic = [], [], []
            for i, a in enumerate(self.indices):
                da = sum(a)
                for j, b in enumerate(self.indices):
                    if da + sum(b) > self.order:
                        continue
                    ia.append(i)
                    ib.append(j)
                    ic.append(self.position[tuple(x + y for x, y in zip(a, b))])
            ia = np.asarray(ia, dtype=np.int64)
            ib = np.asarray(ib, dtype=np.int64)
            ic = np.asarray(ic, dtype=np.int64)
            scatter = sp.csr_matrix(
                (np.ones(len(ic)), (ic, np.arange(len(ic)))),
                shape=(self.size, len(ic)),
            )
            self._mul = (ia, ib, scatter)
        return self._mul

    def deriv_table(self, axis: int) -> tuple[np.ndarray, np.ndarray]:
        """(src, fac): coefficients of d/dx_axis f are ``c[src] * fac`` laid
        out in the space one order lower."""
        if axis not in self._deriv:
            if self.order == 0:
                raise ValueError("cannot differentiate an order-0 jet")
            lower = jet_space(self.nvars, self.order - 1)
            src = np.empty(lower.size, dtype=np.int64)
            fac = np.empty(lower.size, dtype=np.float64)
            for pos, beta in enumerate(lower.indices):
                alpha = list(beta)
                alpha[axis] += 1
                src[pos] = self.position[tuple(alpha)]
                fac[pos] = beta[axis] + 1
            self._deriv[axis] = (src, fac)
        return self._deriv[axis]


class Jet:
    """Order-``k`` Taylor data of a scalar function at a batch of points."""

    __slots__ = ("space", "coeffs")

    def __init__(self, space: JetSpace, coeffs: np.ndarray):
        self.space = space
        self.coeffs = coeffs  # shape (space.size, npoints)

    # -- constructors -------------------------------------------------------

    @staticmethod
    def constant(values, nvars: int, order: int, npoints: int | None = None) -> "Jet":
        space = jet_space(nvars, order)
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 0:
            if npoints is None:
                npoints = 1
            values = np.full(npoints, float(values))
        coeffs = np.zeros((space.size, values.shape[0]))
        coeffs[0] = values
        return Jet(space, coeffs)

    @staticmethod
    def coordinate(points: np.ndarray, axis: int, order: int) -> "Jet":
        """The jet of the coordinate function x_axis at each point."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        npts, nvars = points.shape
        space = jet_space(nvars, order)
        coeffs = np.zeros((space.size, npts))
        coeffs[0] = points[:, axis]
        if order >= 1:
            unit = tuple(1 if i == axis else 0 for i in range(nvars))
            coeffs[space.position[unit]] = 1.0
        return Jet(space, coeffs)

    # -- basic queries ------------------------------------------------------

    @property
    def order(self) -> int:
        return self.space.order

    @property
    def nvars(self) -> int:
        return self.space.nvars

    @property
    def npoints(self) -> int:
        return self.coeffs.shape[1]

    def value(self) -> np.ndarray:
        return self.coeffs[0]

    def coefficient(self, alpha: Sequence[int]) -> np.ndarray:
        """Scaled coefficient d^alpha f / alpha! (zero above the order)."""
        alpha = tuple(int(a) for a in alpha)
        if sum(alpha) > self.order:
            return np.zeros(self.npoints)
        return self.coeffs[self.space.position[alpha]]

    def partial(self, alpha: Sequence[int]) -> np.ndarray:
        """Plain partial derivative d^alpha f (coefficient times alpha!)."""
        fac = 1.0
        for a in alpha:
            fac *= math.factorial(int(a))
        return self.coefficient(alpha) * fac

    def truncate(self, order: int) -> "Jet":
        if order >= self.order:
            return self
        space = jet_space(self.nvars, order)
        return Jet(space, self.coeffs[: space.size])

    # -- ring operations ----------------------------------------------------

    def _align(self, other: "Jet") -> tuple["Jet", "Jet"]:
        k = min(self.order, other.order)
        return self.truncate(k), other.truncate(k)

    def __add__(self, other):
        if isinstance(other, Jet):
            a, b = self._align(other)
            return Jet(a.space, a.coeffs + b.coeffs)
        out = self.coeffs.copy()
        out[0] = out[0] + other
        return Jet(self.space, out)

    __radd__ = __add__

    def __neg__(self):
        return Jet(self.space, -self.coeffs)

    def __sub__(self, other):
        if isinstance(other, Jet):
            a, b = self._align(other)
            return Jet(a.space, a.coeffs - b.coeffs)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c) -> "Jet":
        return Jet(self.space, self.coeffs * c)

    def __mul__(self, other):
        if not isinstance(other, Jet):
            return self.scale(other)
        a, b = self._align(other)
        ia, ib, scatter = a.space.mul_table
        prod = a.coeffs[ia] * b.coeffs[ib]
        return Jet(a.space, scatter @ prod)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        return self.scale(1.0 / other)

    def __rtruediv__(self, other):
        return self.reciprocal().scale(other)

    def derivative(self, axis: int) -> "Jet":
        """Jet of d/dx_axis, one usable order lower."""
        src, fac = self.space.deriv_table(axis)
        lower = jet_space(self.nvars, self.order - 1)
        return Jet(lower, self.coeffs[src] * fac[:, None])

    def powi(self, k: int) -> "Jet":
        """Integer power by repeated multiplication (domain-free, exact for
        polynomials)."""
        if k < 0:
            return self.reciprocal().powi(-k)
        result = Jet.constant(1.0, self.nvars, self.order, self.npoints)
        base = self
        while k:
            if k & 1:
                result = result * base
            base = base * base if k > 1 else base
            k >>= 1
        return result

    # -- analytic primitives ------------------------------------------------

    def _compose(self, series: np.ndarray) -> "Jet":
        """Horner evaluation of sum_j series[j] * (self - value)^j."""
        if self.order == 0:
            return Jet(self.space, series[0][None, :].copy())
        shifted = self.coeffs.copy()
        shifted[0] = 0.0
        s = Jet(self.space, shifted)
        acc = Jet.constant(series[-1], self.nvars, self.order, self.npoints)
        for j in range(self.order - 1, -1, -1):
            acc = acc * s
            acc.coeffs[0] += series[j]
        return acc

    def _series_from_derivs(self, derivs: np.ndarray) -> np.ndarray:
        # derivs[j] = g^{(j)}(value); series[j] = derivs[j] / j!
        fac = np.array([math.factorial(j) for j in range(self.order + 1)])
        return derivs / fac[:, None]

    def exp(self) -> "Jet":
        v = np.exp(self.value())
        derivs = np.broadcast_to(v, (self.order + 1, self.npoints))
        return self._compose(self._series_from_derivs(np.array(derivs)))

    def log(self) -> "Jet":
        v = self.value()
        if np.any(v <= 0):
            raise EvaluationDomainError("log of non-positive value")
        derivs = np.empty((self.order + 1, self.npoints))
        derivs[0] = np.log(v)
        for j in range(1, self.order + 1):
            derivs[j] = ((-1.0) ** (j + 1)) * math.factorial(j - 1) / v**j
        return self._compose(self._series_from_derivs(derivs))

    def sin(self) -> "Jet":
        v = self.value()
        derivs = np.array([np.sin(v + j * np.pi / 2) for j in range(self.order + 1)])
        return self._compose(self._series_from_derivs(derivs))

    def cos(self) -> "Jet":
        v = self.value()
        derivs = np.array([np.cos(v + j * np.pi / 2) for j in range(self.order + 1)])
        return self._compose(self._series_from_derivs(derivs))

    def reciprocal(self) -> "Jet":
        v = self.value()
        if np.any(v == 0):
            raise EvaluationDomainError("division by zero")
        derivs = np.empty((self.order + 1, self.npoints))
        for j in range(self.order + 1):
            derivs[j] = ((-1.0) ** j) * math.factorial(j) / v ** (j + 1)
        return self._compose(self._series_from_derivs(derivs))

    def sqrt(self) -> "Jet":
        return self.powf(0.5)

    def powf(self, p: float) -> "Jet":
        """Real power; requires a strictly positive base."""
        if float(p).is_integer():
            return self.powi(int(p))
        v = self.value()
        if np.any(v <= 0):
            raise EvaluationDomainError("fractional power of non-positive base")
        derivs = np.empty((self.order + 1, self.npoints))
        coef = 1.0
        for j in range(self.order + 1):
            derivs[j] = coef * v ** (p - j)
            coef *= p - j
        return self._compose(self._series_from_derivs(derivs))
