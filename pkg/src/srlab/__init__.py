"""srlab: a numerical laboratory for generalized curvature-dimension
inequalities on sub-Riemannian model spaces."""

from .jets import DEFAULT_MAX_ORDER, EvaluationDomainError, Jet, JetSpace, jet_space
from .fields import (
    Constant,
    Coordinate,
    Polynomial,
    ScalarField,
    VectorField,
    apply_field,
    as_field,
    cos,
    eval_jet,
    exp,
    lie_bracket,
    log,
    parse_field,
    sin,
    sqrt,
)
from .models import (
    BracketRelation,
    CarnotSpec,
    Model,
    carnot_step2,
    chart_realization,
    euclidean,
    free_carnot_step2,
    heisenberg,
    load_model,
    model_from_json,
    sasakian,
    sasakian_chart,
    validate_model,
)
from .gamma import (
    CDParams,
    GammaValues,
    NU_LIMIT_INF,
    NU_LIMIT_ZERO,
    SamplerSpec,
    Witness,
    apply_l,
    cd_min_residual,
    cd_residual,
    check_commutation,
    commutator_lz_residual,
    estimate_sharp_rho1,
    gamma2_form,
    gamma2_z_form,
    gamma_form,
    gamma_values,
    gamma_z_form,
    optimal_nu,
    sasakian_gamma2_decomposition,
)

__version__ = "0.1.0"
