"""ruleval: evaluate A/B-test decision rules by their cumulative returns.

Decision rules map an experiment's observations to an arm to launch.  This
package estimates what a rule would have earned on a north-star metric
across a corpus of past experiments, using estimators that separate the
data that makes the decision from the data that scores it, which removes
the winner's curse of the plug-in estimate.  A closed-form Gaussian model
and a Monte Carlo harness validate the estimators end to end.
"""

__version__ = "0.1.0"

from .closed_form import (
    EffectModel,
    cv_expectation,
    levelset_grid,
    mills_conditional,
    naive_expectation,
    true_reward,
)
from .corpus import (
    CorpusFormatError,
    EvaluationReport,
    ExperimentCorpus,
    RuleEstimateRow,
    evaluate_rules,
    ingest_csv,
    make_synthetic_corpus,
    write_corpus_csv,
)
from .estimators import (
    ConfidenceInterval,
    EstimatorConfig,
    RewardEstimate,
    bootstrap_ci,
    cv_fold_reward,
    cv_reward,
    estimate_reward,
    leave_l_out_reward,
    naive_reward,
    per_experiment_rewards,
    poisson_rescaled_reward,
)
from .experiments import (
    ArmData,
    DecisionRule,
    DegenerateArmError,
    DegenerateFoldError,
    ExperimentData,
    FoldAssignment,
    RewardSpec,
    assign_folds,
    blend_mean_and_se,
    decide,
    decide_on_folds,
    significance_set,
)
from .figures import run_figure
from .simulator import (
    DEFAULT_MODEL,
    DEFAULT_PROXIES,
    ProxySpec,
    RescalingCheckReport,
    SelectionCheckReport,
    SimRule,
    SimulationConfig,
    SimulationResult,
    SweepSpec,
    check_poisson_rescaling,
    check_rule_selection,
    draw_experiment,
    run_bias_sweep,
)

__all__ = [
    "ArmData",
    "ConfidenceInterval",
    "CorpusFormatError",
    "DEFAULT_MODEL",
    "DEFAULT_PROXIES",
    "DecisionRule",
    "DegenerateArmError",
    "DegenerateFoldError",
    "EffectModel",
    "EstimatorConfig",
    "EvaluationReport",
    "ExperimentCorpus",
    "ExperimentData",
    "FoldAssignment",
    "ProxySpec",
    "RescalingCheckReport",
    "RewardEstimate",
    "RewardSpec",
    "RuleEstimateRow",
    "SelectionCheckReport",
    "SimRule",
    "SimulationConfig",
    "SimulationResult",
    "SweepSpec",
    "assign_folds",
    "blend_mean_and_se",
    "bootstrap_ci",
    "check_poisson_rescaling",
    "check_rule_selection",
    "cv_expectation",
    "cv_fold_reward",
    "cv_reward",
    "decide",
    "decide_on_folds",
    "draw_experiment",
    "estimate_reward",
    "evaluate_rules",
    "ingest_csv",
    "leave_l_out_reward",
    "levelset_grid",
    "make_synthetic_corpus",
    "mills_conditional",
    "naive_expectation",
    "naive_reward",
    "per_experiment_rewards",
    "poisson_rescaled_reward",
    "run_bias_sweep",
    "run_figure",
    "significance_set",
    "true_reward",
    "write_corpus_csv",
]
