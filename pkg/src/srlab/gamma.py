"""The Gamma-calculus core.

Bilinear forms Gamma and Gamma^Z, the iterated forms Gamma_2 and Gamma_2^Z,
the curvature-dimension residual with closed-form optimisation over the free
parameter nu, hypothesis checks, and the empirical sharp-rho1 estimator.

All forms are assembled as shared expression DAGs over the jet engine, so one
memoised evaluation yields every first- and second-order quantity for a given
test function and point batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Mapping, Optional, Sequence

import numpy as np

from .fields import Polynomial, Primitive, ScalarField, as_field
from .fields import EvalContext
from .models import Model

#: nu -> infinity sentinel: the nu-dependent terms vanish in the limit when
#: Gamma_2^Z = 0 < kappa * Gamma.
NU_LIMIT_INF = math.inf
#: nu -> 0+ sentinel: both nu-terms vanish when kappa * Gamma = 0 < Gamma_2^Z.
NU_LIMIT_ZERO = 0.0

#: samples with Gamma below this are treated as degenerate for rho1 estimation
GAMMA_FLOOR = 1e-4


class EstimationError(RuntimeError):
    """Raised when every sample of a sharp-constant estimation is degenerate."""


@dataclass(frozen=True)
class CDParams:
    """The quadruple (rho1, rho2, kappa, d); d may be math.inf."""

    rho1: float
    rho2: float
    kappa: float
    d: float

    def __post_init__(self):
        if not self.rho2 > 0:
            raise ValueError("rho2 must be positive")
        if self.kappa < 0:
            raise ValueError("kappa must be nonnegative")
        if not self.d > 0:
            raise ValueError("d must be positive (math.inf allowed)")

    @property
    def D(self) -> float:
        return self.d * (1.0 + 3.0 * self.kappa / (2.0 * self.rho2))

    @property
    def inv_d(self) -> float:
        return 0.0 if math.isinf(self.d) else 1.0 / self.d

    def to_json(self) -> dict:
        return {
            "rho1": self.rho1,
            "rho2": self.rho2,
            "kappa": self.kappa,
            "d": "inf" if math.isinf(self.d) else self.d,
            "D": "inf" if math.isinf(self.D) else self.D,
        }

    @staticmethod
    def from_json(doc: Mapping) -> "CDParams":
        d = doc["d"]
        return CDParams(
            float(doc["rho1"]),
            float(doc["rho2"]),
            float(doc["kappa"]),
            math.inf if d in ("inf", None) else float(d),
        )


@dataclass
class GammaValues:
    """First- and second-order form values for one test function, vectorised
    over a point batch."""

    gamma: np.ndarray
    gammaZ: np.ndarray
    Lf: np.ndarray
    gamma2: np.ndarray
    gamma2Z: np.ndarray


# ---------------------------------------------------------------------------
# Form construction
# ---------------------------------------------------------------------------


def laplacian_field(m: Model, f: ScalarField) -> ScalarField:
    """L f = sum_i X_i(X_i f)."""
    f = as_field(f)
    acc = None
    for X in m.horizontal:
        term = X(X(f))
        acc = term if acc is None else acc + term
    return acc if acc is not None else as_field(0.0)


def gamma_field(m: Model, f: ScalarField, g: Optional[ScalarField] = None) -> ScalarField:
    """Gamma(f, g) = sum_i (X_i f)(X_i g): the carre du champ."""
    f = as_field(f)
    g = f if g is None else as_field(g)
    acc = None
    for X in m.horizontal:
        term = X(f) * X(g) if g is not f else X(f) * X(f)
        acc = term if acc is None else acc + term
    return acc if acc is not None else as_field(0.0)


def gamma_z_field(m: Model, f: ScalarField, g: Optional[ScalarField] = None) -> ScalarField:
    """Gamma^Z(f, g) = sum_j (Z_j f)(Z_j g); zero when the vertical frame is
    empty (the purely Riemannian reduction)."""
    f = as_field(f)
    g = f if g is None else as_field(g)
    acc = None
    for Z in m.vertical:
        term = Z(f) * Z(g) if g is not f else Z(f) * Z(f)
        acc = term if acc is None else acc + term
    return acc if acc is not None else as_field(0.0)


class FormBundle:
    """Shared DAG for every Gamma-quantity of one test function."""

    def __init__(self, m: Model, f: ScalarField):
        self.model = m
        self.f = as_field(f)
        xf = [X(self.f) for X in m.horizontal]
        zf = [Z(self.f) for Z in m.vertical]
        self.lf = _sum(X(xf[i]) for i, X in enumerate(m.horizontal))
        self.gamma = _sum(v * v for v in xf)
        self.gammaZ = _sum(v * v for v in zf)
        gamma_f_lf = _sum(xf[i] * X(self.lf) for i, X in enumerate(m.horizontal))
        gammaZ_f_lf = _sum(zf[j] * Z(self.lf) for j, Z in enumerate(m.vertical))
        self.gamma2 = 0.5 * (laplacian_field(m, self.gamma) - 2.0 * gamma_f_lf)
        if m.vertical:
            self.gamma2Z = 0.5 * (laplacian_field(m, self.gammaZ) - 2.0 * gammaZ_f_lf)
        else:
            self.gamma2Z = as_field(0.0)

    def evaluate(self, points) -> GammaValues:
        ctx = EvalContext(points)
        # deepest first so lower-order requests reuse the memoised jets
        g2 = self.gamma2._jet_memo(ctx, 0).value()
        g2z = self.gamma2Z._jet_memo(ctx, 0).value()
        return GammaValues(
            gamma=self.gamma._jet_memo(ctx, 0).value().copy(),
            gammaZ=self.gammaZ._jet_memo(ctx, 0).value().copy(),
            Lf=self.lf._jet_memo(ctx, 0).value().copy(),
            gamma2=g2.copy(),
            gamma2Z=g2z.copy(),
        )


def _sum(terms) -> ScalarField:
    acc = None
    for t in terms:
        acc = t if acc is None else acc + t
    return acc if acc is not None else as_field(0.0)


# -- pointwise wrappers ------------------------------------------------------


def gamma_form(m: Model, f, g, x) -> float:
    return float(gamma_field(m, as_field(f), as_field(g)).values(x)[0])


def gamma_z_form(m: Model, f, g, x) -> float:
    return float(gamma_z_field(m, as_field(f), as_field(g)).values(x)[0])


def apply_l(m: Model, f, x) -> float:
    return float(laplacian_field(m, as_field(f)).values(x)[0])


def gamma2_form(m: Model, f, x) -> float:
    return float(FormBundle(m, f).gamma2.values(x)[0])


def gamma2_z_form(m: Model, f, x) -> float:
    return float(FormBundle(m, f).gamma2Z.values(x)[0])


def gamma_values(m: Model, f, points) -> GammaValues:
    return FormBundle(m, f).evaluate(points)


# ---------------------------------------------------------------------------
# Curvature-dimension residual
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OptimalNu:
    nu: float  # positive float, NU_LIMIT_INF, or NU_LIMIT_ZERO
    nu_term: float  # inf over nu > 0 of nu*Gamma_2^Z + (kappa/nu)*Gamma


def optimal_nu(gamma_val: float, gamma2z_val: float, kappa: float) -> OptimalNu:
    """Minimise the nu-dependent part nu*Gamma_2^Z + (kappa/nu)*Gamma.

    Returns the AM-GM minimiser when both terms are active, otherwise the
    sentinel describing the monotone limit that attains the infimum.
    """
    if gamma_val < 0 or gamma2z_val < 0 or kappa < 0:
        raise ValueError("optimal_nu inputs must be nonnegative")
    kg = kappa * gamma_val
    if kg > 0 and gamma2z_val > 0:
        nu = math.sqrt(kg / gamma2z_val)
        return OptimalNu(nu, 2.0 * math.sqrt(kg * gamma2z_val))
    if gamma2z_val > 0:
        return OptimalNu(NU_LIMIT_ZERO, 0.0)
    return OptimalNu(NU_LIMIT_INF, 0.0)


def _nu_terms_vec(gamma: np.ndarray, g2z: np.ndarray, kappa: float):
    """Vectorised optimal nu and optimal nu-term; negative Gamma_2^Z drives
    the infimum to -inf (no CD inequality can hold there)."""
    kg = kappa * np.maximum(gamma, 0.0)
    pos = (kg > 0) & (g2z > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        nu = np.where(pos, np.sqrt(kg / np.where(g2z > 0, g2z, 1.0)), np.inf)
    nu = np.where((~pos) & (g2z > 0), 0.0, nu)
    term = np.where(pos, 2.0 * np.sqrt(kg * np.maximum(g2z, 0.0)), 0.0)
    term = np.where(g2z < 0, -np.inf, term)
    return nu, term


def residual_from_values(vals: GammaValues, p: CDParams, nu) -> np.ndarray:
    """Gamma_2 + nu Gamma_2^Z - (1/d)(Lf)^2 - (rho1 - kappa/nu) Gamma
    - rho2 Gamma^Z, with limit semantics at the nu sentinels."""
    base = (
        vals.gamma2
        - p.inv_d * vals.Lf**2
        - p.rho1 * vals.gamma
        - p.rho2 * vals.gammaZ
    )
    if nu == NU_LIMIT_INF:
        vertical = np.where(vals.gamma2Z != 0, np.sign(vals.gamma2Z) * np.inf, 0.0)
        return base + vertical
    if nu == NU_LIMIT_ZERO:
        horizontal = np.where(p.kappa * vals.gamma > 0, np.inf, 0.0)
        return base + horizontal
    if not nu > 0:
        raise ValueError("nu must be positive or a limit sentinel")
    return base + nu * vals.gamma2Z + (p.kappa / nu) * vals.gamma


def cd_residual(m: Model, p: CDParams, nu, f, x) -> float:
    """The CD(rho1, rho2, kappa, d) defect at (f, x) for one nu; the
    inequality holds iff this is >= 0 for all f, x and nu > 0."""
    vals = gamma_values(m, as_field(f), x)
    return float(residual_from_values(vals, p, nu)[0])


def residual_at_optimal_nu(vals: GammaValues, p: CDParams) -> tuple[np.ndarray, np.ndarray]:
    """(residual minimised over nu, argmin nu) per point."""
    nu, term = _nu_terms_vec(vals.gamma, vals.gamma2Z, p.kappa)
    res = (
        vals.gamma2
        + term
        - p.inv_d * vals.Lf**2
        - p.rho1 * vals.gamma
        - p.rho2 * vals.gammaZ
    )
    return res, nu


# ---------------------------------------------------------------------------
# Hypothesis checks
# ---------------------------------------------------------------------------


def check_commutation(m: Model, f, x) -> float:
    """|Gamma(f, Gamma^Z(f)) - Gamma^Z(f, Gamma(f))| at x (the commutation
    hypothesis between the horizontal and vertical forms)."""
    f = as_field(f)
    gz = gamma_z_field(m, f)
    g = gamma_field(m, f)
    lhs = gamma_field(m, f, gz)
    rhs = gamma_z_field(m, f, g)
    diff = lhs - rhs
    return float(np.max(np.abs(diff.values(x))))


def commutator_lz_residual(m: Model, f, x) -> float:
    """max_j |L Z_j f - Z_j L f| at x: the sub-Laplacian commutes with the
    vertical frame on the bundled models."""
    f = as_field(f)
    lf = laplacian_field(m, f)
    worst = 0.0
    for Z in m.vertical:
        diff = laplacian_field(m, Z(f)) - Z(lf)
        worst = max(worst, float(np.max(np.abs(diff.values(x)))))
    return worst


# ---------------------------------------------------------------------------
# Sasakian Gamma_2 decomposition
# ---------------------------------------------------------------------------


@dataclass
class Gamma2Decomposition:
    hess_norm_sq: float
    cross_term: float
    gamma2_reconstructed: float


def _sasakian_rho1(m: Model) -> float:
    for rel in m.bracket_table:
        if {rel.a, rel.b} == {"X1", "Z1"}:
            return -float(rel.expected.get("X2", 0.0))
    raise ValueError(f"model {m.name} does not declare Sasakian brackets")


def sasakian_gamma2_decomposition(m: Model, f, x) -> Gamma2Decomposition:
    """Split Gamma_2 into the symmetrised horizontal Hessian square, the
    curvature term, half the vertical form and the mixed third-order term;
    the recombination must match gamma2_form."""
    if m.d != 2 or m.h != 1:
        raise ValueError("decomposition applies to the 3-D Sasakian family only")
    rho1 = _sasakian_rho1(m)
    f = as_field(f)
    X, Y = m.horizontal
    Z = m.vertical[0]
    xf, yf, zf = X(f), Y(f), Z(f)
    xxf, yyf = X(X(f)), Y(Y(f))
    sym = 0.5 * (X(Y(f)) + Y(X(f)))
    hess = xxf * xxf + 2.0 * (sym * sym) + yyf * yyf
    cross = 2.0 * (yf * X(zf) - xf * Y(zf))
    gamma = xf * xf + yf * yf
    gz = zf * zf
    recon = hess + rho1 * gamma + 0.5 * gz + cross
    ctx = EvalContext(x)
    return Gamma2Decomposition(
        hess_norm_sq=float(hess._jet_memo(ctx, 0).value()[0]),
        cross_term=float(cross._jet_memo(ctx, 0).value()[0]),
        gamma2_reconstructed=float(recon._jet_memo(ctx, 0).value()[0]),
    )


# ---------------------------------------------------------------------------
# Random test-function families and the sharp-rho1 estimator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplerSpec:
    """Test-function family for CD sampling: random polynomials of bounded
    total degree (complete for pointwise 3-jet statements) plus optional
    low-frequency trigonometric fields."""

    degree: int = 4
    count: int = 500
    points: int = 100
    box: Optional[tuple[tuple[float, float], ...]] = None
    seed: int = 0
    family: str = "poly"  # poly | trig | mixed

    def to_json(self) -> dict:
        return {
            "degree": self.degree,
            "count": self.count,
            "points": self.points,
            "box": self.box,
            "seed": self.seed,
            "family": self.family,
        }

    @staticmethod
    def from_json(doc: Mapping) -> "SamplerSpec":
        box = doc.get("box")
        return SamplerSpec(
            degree=int(doc.get("degree", 4)),
            count=int(doc.get("count", 500)),
            points=int(doc.get("points", 100)),
            box=tuple((float(a), float(b)) for a, b in box) if box else None,
            seed=int(doc.get("seed", 0)),
            family=str(doc.get("family", "poly")),
        )


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    # counter-based: reproducible per (seed, index) independent of scheduling
    return np.random.Generator(np.random.Philox(key=np.uint64(seed) + (np.uint64(index) << np.uint64(20))))


class TrigField(ScalarField):
    """Sum of low-frequency sinusoids a_k sin(w_k . x + phi_k)."""

    def __init__(self, amps: np.ndarray, freqs: np.ndarray, phases: np.ndarray):
        self.amps = np.asarray(amps, dtype=float)
        self.freqs = np.asarray(freqs, dtype=float)
        self.phases = np.asarray(phases, dtype=float)
        from .fields import Coordinate  # local to avoid cycle noise

        acc = None
        for a, w, ph in zip(self.amps, self.freqs, self.phases):
            lin = _sum(float(w[i]) * Coordinate(i) for i in range(len(w)))
            term = float(a) * Primitive("sin", lin + float(ph))
            acc = term if acc is None else acc + term
        self._expr = acc if acc is not None else as_field(0.0)

    def _jet(self, ctx, order):
        return self._expr._jet_memo(ctx, order)

    def to_json(self) -> dict:
        return {
            "kind": "trig",
            "amps": self.amps.tolist(),
            "freqs": self.freqs.tolist(),
            "phases": self.phases.tolist(),
        }


def random_polynomial(rng: np.random.Generator, nvars: int, degree: int) -> Polynomial:
    from .jets import multi_indices

    alphas = multi_indices(nvars, degree)
    coeffs = {alpha: float(c) for alpha, c in zip(alphas, rng.uniform(-1, 1, len(alphas)))}
    return Polynomial(coeffs, nvars)


def random_trig(rng: np.random.Generator, nvars: int, waves: int = 3) -> TrigField:
    amps = rng.uniform(-1, 1, waves)
    freqs = rng.integers(-2, 3, (waves, nvars)).astype(float)
    for row in freqs:  # avoid identically-zero frequencies
        if not row.any():
            row[rng.integers(0, nvars)] = 1.0
    phases = rng.uniform(0, 2 * np.pi, waves)
    return TrigField(amps, freqs, phases)


def sample_function(rng: np.random.Generator, nvars: int, spec: SamplerSpec, index: int):
    if spec.family == "poly" or (spec.family == "mixed" and index % 2 == 0):
        return random_polynomial(rng, nvars, spec.degree)
    if spec.family in ("trig", "mixed"):
        return random_trig(rng, nvars)
    raise ValueError(f"unknown sampler family {spec.family!r}")


def _sample_points(m: Model, rng: np.random.Generator, spec: SamplerSpec) -> np.ndarray:
    if spec.box is not None:
        lo = np.array([b[0] for b in spec.box])
        hi = np.array([b[1] for b in spec.box])
        return lo + (hi - lo) * rng.random((spec.points, m.n))
    return m.sample_points(rng, spec.points)


def function_to_json(f) -> dict:
    if isinstance(f, Polynomial):
        return f.to_json()
    if isinstance(f, TrigField):
        return f.to_json()
    raise TypeError(f"cannot serialise test function {f!r}")


def function_from_json(doc: Mapping):
    if doc["kind"] == "poly":
        return Polynomial.from_json(doc)
    if doc["kind"] == "trig":
        return TrigField(np.array(doc["amps"]), np.array(doc["freqs"]), np.array(doc["phases"]))
    raise ValueError(f"unknown function kind {doc['kind']!r}")


@dataclass
class Witness:
    """A re-runnable minimiser record: test function, point and nu."""

    function: dict
    point: list
    nu: Optional[float]
    value: float

    def to_json(self) -> dict:
        nu = self.nu
        if nu is not None and math.isinf(nu):
            nu = "inf"
        return {"function": self.function, "point": self.point, "nu": nu, "value": self.value}

    @staticmethod
    def from_json(doc: Mapping) -> "Witness":
        nu = doc.get("nu")
        if nu == "inf":
            nu = math.inf
        return Witness(dict(doc["function"]), list(doc["point"]), nu, float(doc["value"]))


@dataclass
class SharpRho1Result:
    rho1_hat: float
    witness: Witness
    n_samples: int
    n_degenerate: int
    min_degenerate_residual: float


def estimate_sharp_rho1(
    m: Model,
    rho2: float,
    kappa: float,
    d: float,
    sampler: SamplerSpec,
) -> SharpRho1Result:
    """Empirical upper bound for the best rho1 in the CD inequality at fixed
    (rho2, kappa, d): the minimum over samples of the per-sample bound
    [Gamma_2 + opt-nu terms - (1/d)(Lf)^2 - rho2 Gamma^Z] / Gamma.

    Sound by construction: if CD(rho1, rho2, kappa, d) holds, every sample
    bound is >= rho1.  Samples with Gamma below GAMMA_FLOOR are excluded from
    the minimum (the rho1 term vanishes there) but their rho1-free residual
    is still tracked.
    """
    p_ref = CDParams(0.0, rho2, kappa, d)
    best = math.inf
    best_witness = None
    n_deg = 0
    min_deg_resid = math.inf
    n_used = 0
    for idx in range(sampler.count):
        rng = _sample_rng(sampler.seed, idx)
        f = sample_function(rng, m.n, sampler, idx)
        pts = _sample_points(m, rng, sampler)
        vals = FormBundle(m, f).evaluate(pts)
        res0, nu = residual_at_optimal_nu(vals, p_ref)  # rho1 = 0 residual
        mask = vals.gamma > GAMMA_FLOOR
        n_deg += int(np.sum(~mask))
        if np.any(~mask):
            min_deg_resid = min(min_deg_resid, float(np.min(res0[~mask])))
        if not np.any(mask):
            continue
        bounds = res0[mask] / vals.gamma[mask]
        k = int(np.argmin(bounds))
        n_used += int(np.sum(mask))
        if bounds[k] < best:
            best = float(bounds[k])
            sel = np.flatnonzero(mask)[k]
            best_witness = Witness(
                function=function_to_json(f),
                point=[float(v) for v in pts[sel]],
                nu=float(nu[sel]),
                value=best,
            )
    if best_witness is None:
        raise EstimationError("all samples were degenerate (Gamma ~ 0)")
    return SharpRho1Result(
        rho1_hat=best,
        witness=best_witness,
        n_samples=n_used,
        n_degenerate=n_deg,
        min_degenerate_residual=min_deg_resid,
    )


@dataclass
class CDCheckResult:
    min_residual: float
    witness: Witness
    n_samples: int


def cd_min_residual(m: Model, p: CDParams, sampler: SamplerSpec) -> CDCheckResult:
    """Minimum CD residual (nu optimised per sample) over a random family of
    test functions and points; nonnegative iff no sampled violation."""
    best = math.inf
    best_witness = None
    total = 0
    for idx in range(sampler.count):
        rng = _sample_rng(sampler.seed, idx)
        f = sample_function(rng, m.n, sampler, idx)
        pts = _sample_points(m, rng, sampler)
        vals = FormBundle(m, f).evaluate(pts)
        res, nu = residual_at_optimal_nu(vals, p)
        total += res.shape[0]
        k = int(np.argmin(res))
        if res[k] < best:
            best = float(res[k])
            best_witness = Witness(
                function=function_to_json(f),
                point=[float(v) for v in pts[k]],
                nu=float(nu[k]),
                value=best,
            )
    return CDCheckResult(min_residual=best, witness=best_witness, n_samples=total)


def reevaluate_witness(m: Model, p: CDParams, witness: Witness) -> float:
    """Recompute the CD residual recorded by a witness (must reproduce the
    stored value to tight tolerance)."""
    f = function_from_json(witness.function)
    vals = gamma_values(m, f, np.asarray(witness.point))
    nu = witness.nu
    if nu is None:
        nu = NU_LIMIT_INF
    return float(residual_from_values(vals, p, nu)[0])
