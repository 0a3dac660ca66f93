"""Joint distribution of binary potential outcomes from one study, using a baseline stratum."""

__version__ = "0.1.0"

from .data import (  # noqa: E402
    Dataset,
    Observation,
    StratumMapping,
    StratumSpec,
    construct_stratum,
    make_dataset,
    stratify,
    validate_dataset,
)
from .errors import *  # noqa: E402,F401,F403
from .inference import BootstrapPlan, IntervalReport, bootstrap, delta_method  # noqa: E402
from .ls import (  # noqa: E402
    JointPODistribution,
    SensitivitySpec,
    ThetaEstimate,
    check_rank,
    consistency_check,
    estimate_theta,
    joint_distribution,
    sensitivity_sweep,
    solve_theta,
    solve_theta_sensitivity,
    theta_variance,
)
from .nuisance import (  # noqa: E402
    LogisticModel,
    NuisanceSet,
    OutcomeModelSpec,
    PrognosticScore,
    PropensitySpec,
    fit_logistic,
    fit_nuisances,
    prognostic_score,
    spline_basis,
)
from .orthogonal import (  # noqa: E402
    LinkSpec,
    XiEstimate,
    ls_initializer,
    orthogonality_probe,
    psi_score,
    solve_xi,
    standardize_theta,
    xi_variance,
)
from .pipeline import EstimatorConfig, RunConfig, RunReport, emit_report, fit, run  # noqa: E402
from .risk import MarginalY0, StratumRiskTable, estimate_mu, risks_by_aipw, risks_by_proportion  # noqa: E402
from .sim import DGPConfig, MCReport, generate, oracle_targets, run_study  # noqa: E402
