"""Numerical verification toolkit for PQ^eps-projectively equivalent metrics."""

__version__ = "0.1.0"

from .expr import ExprDomainError, ExprError, ExprSyntaxError, ScalarExpr, eval_jet, evaluate, parse_expr
from .geometry import ChartDomain, GeodesicState, MetricField, TensorField11, integrate_geodesic
from .pq_struct import (
    PQScene,
    SceneError,
    SceneValidationError,
    compute_A_at,
    lambda_at,
    phi_from_lambda_at,
    reconstruct_gbar,
    residual_report,
    validate_scene,
)
from .spectra import classify_pair, eigen_at, lemma_dim_check, lemma_eigenvectors_check
from .integrals import (
    F_c_regularized_at,
    F_t_at,
    IntegralSpec,
    PhasePoint,
    T_tensor_at,
    commutation_report,
    conservation_report,
    poisson_bracket_at,
)
from .catalog import (
    CatalogEntry,
    make_affine_pair,
    make_cp1_hprojective_pair,
    make_dini_pair,
    make_sphere_projective_pair,
)
