"""psbayes: approximate-Bayesian and frequentist inference for propensity-
score weighting under unit nonresponse, with a Monte Carlo lab and a CLI."""

from .bps import (
    HpdInterval,
    JointFit,
    ParameterSummary,
    PosteriorDraws,
    bps_sample,
    fit_joint,
    hpd,
    summarize,
)
from .data import (
    Dataset,
    PanelDataset,
    read_csv,
    read_panel_csv,
    respondent_subset,
    write_csv,
    write_panel_csv,
)
from .errors import (
    DegenerateChain,
    EmptyRespondents,
    InconsistentMissingness,
    MissingPredictor,
    NoConvergence,
    NonFiniteEvaluation,
    NonFiniteTilt,
    NotPSD,
    ParseError,
    PsBayesError,
    Separation,
    SingularJacobian,
    TooFewDraws,
    TooManyFailures,
    WeightDegeneracyWarning,
)
from .frequentist import (
    FreqEstimate,
    complete_case,
    full_sample,
    kott_chang,
    ops_gmm,
    ps_taylor,
    sandwich_variance,
)
from .nmar import (
    DaConfig,
    FiResult,
    FractionalImputation,
    NmarResponseModel,
    NonrespondentDensity,
    OutcomeModel,
    bda_sample,
    fi_em,
    fit_outcome_model,
    odds,
    predict_nonrespondent_density,
)
from .numerics import (
    RngHandle,
    SolverConfig,
    numeric_jacobian,
    sample_mvn,
    solve_root,
)
from .obps import MhConfig, MhDiagnostics, log_pseudo_likelihood, obps_sample
from .panel import (
    PanelFit,
    cumulative_propensity,
    panel_bps,
    panel_fit,
    panel_obps,
    wave_scores,
)
from .propensity import (
    EstimatingSystem,
    MomentCovariance,
    ResponseModel,
    augmented_system,
    calibration_moments,
    floor_event_count,
    ipw_moment,
    mar_system,
    moment_covariance,
    reset_floor_events,
    response_probabilities,
    response_probability,
    response_score,
)
from .simlab import (
    McReport,
    MethodReport,
    PanelSimConfig,
    SimulatedPanel,
    SimulatedSample,
    StudyOneConfig,
    StudyTwoConfig,
    gen_panel,
    gen_sim1,
    gen_sim2,
    run_method,
    run_study,
)

__version__ = "0.1.0"
