"""Discrete proportional hazards estimation that augments a once-observed
gold-standard outcome with frequent error-prone reports of known sensitivity
and specificity, plus survey weighting, regression calibration, and the
Monte Carlo machinery to study them.
"""

from .calibration import (
    CalibrationModel,
    MiCombineResult,
    fit_calibration,
    mi_variance,
    predict_xhat,
    read_calibration_csv,
)
from .comparator import (
    GlmFit,
    cloglog,
    fit_cloglog,
    fit_standard,
    inverse_cloglog,
    relative_efficiency,
)
from .data_model import (
    Dataset,
    MisclassSpec,
    SubjectRecord,
    Violation,
    VisitSchedule,
    read_long_csv,
    read_wide_csv,
    truncate_after_first_positive,
    truncate_dataset,
    validate,
    write_long_csv,
    write_wide_csv,
)
from .errors import (
    AuglikError,
    ConfigError,
    ConvergenceError,
    DataError,
    DegenerateLikelihoodError,
    DesignError,
)
from .estimation import (
    FitOptions,
    FitResult,
    SurveyDesign,
    finite_difference_hessian,
    fit,
    hessian_covariance,
    sandwich_covariance,
)
from .likelihood import (
    ParamVector,
    c_row,
    d_row_from_c,
    default_lam,
    lam_to_survival,
    loglik_subject,
    loglik_total,
    pack_dataset,
    score_subject,
    survival_from_theta,
    survival_to_lam,
    theta_from_survival,
)
from .simulation import (
    CalibrationSubset,
    HchsSample,
    SimDesign,
    StudySummary,
    bundled_design,
    bundled_design_names,
    censoring_rate,
    generate_hchs_like,
    generate_srs,
    generate_survey,
    run_study,
    write_summary_csv,
)

__version__ = "0.1.0"

__all__ = [
    "AuglikError",
    "CalibrationModel",
    "CalibrationSubset",
    "ConfigError",
    "ConvergenceError",
    "DataError",
    "Dataset",
    "DegenerateLikelihoodError",
    "DesignError",
    "FitOptions",
    "FitResult",
    "GlmFit",
    "HchsSample",
    "MiCombineResult",
    "MisclassSpec",
    "ParamVector",
    "SimDesign",
    "StudySummary",
    "bundled_design",
    "bundled_design_names",
    "SubjectRecord",
    "SurveyDesign",
    "Violation",
    "VisitSchedule",
    "c_row",
    "censoring_rate",
    "cloglog",
    "d_row_from_c",
    "default_lam",
    "finite_difference_hessian",
    "fit",
    "fit_calibration",
    "fit_cloglog",
    "fit_standard",
    "generate_hchs_like",
    "generate_srs",
    "generate_survey",
    "hessian_covariance",
    "inverse_cloglog",
    "lam_to_survival",
    "loglik_subject",
    "loglik_total",
    "mi_variance",
    "pack_dataset",
    "predict_xhat",
    "read_calibration_csv",
    "read_long_csv",
    "read_wide_csv",
    "relative_efficiency",
    "run_study",
    "sandwich_covariance",
    "score_subject",
    "survival_from_theta",
    "survival_to_lam",
    "theta_from_survival",
    "truncate_after_first_positive",
    "truncate_dataset",
    "validate",
    "write_long_csv",
    "write_summary_csv",
    "write_wide_csv",
]
