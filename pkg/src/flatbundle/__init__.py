"""Flat subbundles of connections on coordinate charts.

Given closed-form connection coefficients on a trivialized vector bundle
over a rectangular coordinate chart, this package computes the maximal
subbundle on which the connection restricts flatly, integrates local
parallel sections, and uses the induced connection on symmetric 2-tensors
to decide whether a tangent-bundle connection is locally a metric one.
"""

from .exprfield import (
    ScalarField,
    ParseError,
    SingularEvaluationError,
    parse_scalar_field,
    derivative,
    evaluate,
)
from .bundle import (
    Chart,
    Connection,
    SectionField,
    CurvatureSlice,
    connection_from_christoffel,
    curvature_operators,
    covariant_derivative,
    induce_sym2,
    frame_change,
    sym2_basis,
)
from .flag import (
    Subspace,
    SubbundleField,
    FrameField,
    FlagReport,
    FlagError,
    principal_angles,
    common_kernel,
    smooth_refine,
    gauge_align,
    second_fundamental_form,
    sff_kernel,
    derived_flag,
    is_regular,
)
from .frobenius import (
    AdaptedFrame,
    ParallelFrameField,
    IntegrationError,
    MembershipError,
    adapted_frame,
    flatness_residual,
    integrate_parallel_frame,
    make_parallel_section,
    parallel_transport,
    parallelism_residual,
)
from .metric import MetricReport, metric_check, find_positive_definite

__version__ = "0.1.0"

__all__ = [
    "ScalarField", "ParseError", "SingularEvaluationError",
    "parse_scalar_field", "derivative", "evaluate",
    "Chart", "Connection", "SectionField", "CurvatureSlice",
    "connection_from_christoffel", "curvature_operators",
    "covariant_derivative", "induce_sym2", "frame_change", "sym2_basis",
    "Subspace", "SubbundleField", "FrameField", "FlagReport", "FlagError",
    "principal_angles", "common_kernel", "smooth_refine", "gauge_align",
    "second_fundamental_form", "sff_kernel", "derived_flag", "is_regular",
    "AdaptedFrame", "ParallelFrameField", "IntegrationError", "MembershipError",
    "adapted_frame", "flatness_residual", "integrate_parallel_frame",
    "make_parallel_section", "parallel_transport", "parallelism_residual",
    "MetricReport", "metric_check", "find_positive_definite",
    "__version__",
]
