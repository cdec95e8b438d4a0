"""Reward estimators for decision rules over historical experiments.

Three families are implemented:

* the naive plug-in estimate: the sample mean of the reward over the units
  of whichever arm the rule picks on the full data.  Because selection
  conditions on the same noise being averaged, it inherits a winner's
  curse: the selected arm's observed reward overstates its true mean.
* k-fold cross-validation: the rule is applied with one fold held out and
  the reward is measured on the held-out fold only, so selection noise and
  evaluation noise are independent.
* leave-l-out with Poisson rescaling: summing the fold rewards over every
  size-l held-out subset and scaling by ``l! / m0**l`` gives an estimator
  whose expectation equals the expected reward of the rule applied to the
  full experiment, when the per-arm unit count is Poisson with mean ``m0``
  (fixed enrollment rate over a fixed window).

Aggregates over experiments come in two modes: ``mean`` (weighted mean of
per-experiment estimates) and ``cumulative`` (weighted sum), the latter
being the natural readout for "total return across the program".
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .experiments import (
    ArmData,
    DecisionRule,
    DegenerateFoldError,
    ExperimentData,
    FoldAssignment,
    RewardSpec,
    assign_folds,
    decide,
    decide_on_folds,
)
from .streams import substream

__all__ = [
    "ConfidenceInterval",
    "EstimatorConfig",
    "RewardEstimate",
    "aggregate",
    "bootstrap_ci",
    "cv_fold_reward",
    "cv_reward",
    "estimate_reward",
    "leave_l_out_reward",
    "naive_reward",
    "per_experiment_rewards",
    "poisson_rescaled_reward",
]

ESTIMATOR_KINDS = ("naive", "cv-kfold", "cv-leave-l-out", "poisson-rescaled")
AGGREGATE_MODES = ("mean", "cumulative")


@dataclass(frozen=True)
class RewardEstimate:
    """A point estimate of rule reward with estimator provenance.

    When ``per_experiment`` is present, ``value`` is exactly the weighted
    mean (mode="mean") or weighted sum (mode="cumulative") of those
    contributions.
    """

    value: float
    estimator: str
    mode: str = "mean"
    params: dict = field(default_factory=dict)
    per_experiment: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    level: float
    method: str = "bootstrap-experiments"

    def __post_init__(self) -> None:
        if not self.lower <= self.upper:
            raise ValueError(f"lower {self.lower} > upper {self.upper}")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must be in (0, 1)")


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and with what parameters.

    ``fold_seed`` fixes the random fold assignment for cv-kfold;
    ``max_folds`` caps leave-l-out enumeration (subsets beyond the cap are
    sampled uniformly and rescaled, keeping the estimate unbiased for the
    exact sum); ``m0`` is the Poisson enrollment rate used by the rescaled
    estimator and must be supplied by the caller, not estimated from data.
    """

    kind: str = "cv-kfold"
    num_folds: int = 10
    leave_out: int = 1
    m0: float | None = None
    max_folds: int | None = None
    fold_seed: int = 0
    mode: str = "mean"

    def __post_init__(self) -> None:
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.mode not in AGGREGATE_MODES:
            raise ValueError(f"unknown aggregate mode {self.mode!r}")
        if self.kind == "cv-kfold" and self.num_folds < 2:
            raise ValueError("cv-kfold needs num_folds >= 2")
        if self.kind in ("cv-leave-l-out", "poisson-rescaled"):
            if self.leave_out < 1:
                raise ValueError("leave_out must be >= 1")
        if self.kind == "poisson-rescaled":
            if self.m0 is None or not self.m0 > 0:
                raise ValueError("poisson-rescaled needs m0 > 0")


def _reward_values(arm: ArmData, reward: RewardSpec) -> np.ndarray:
    return arm.units @ reward.weights(arm.num_metrics)


def naive_reward(exp: ExperimentData, rule: DecisionRule, reward: RewardSpec) -> float:
    """Plug-in estimate: mean reward over the units of the arm the rule picks."""
    chosen = decide(exp, rule)
    return float(_reward_values(exp.arm(chosen), reward).mean())


def cv_fold_reward(
    exp: ExperimentData,
    rule: DecisionRule,
    reward: RewardSpec,
    folds: FoldAssignment,
    p: int,
) -> float:
    """Reward of the decision made without fold ``p``, measured on fold ``p``.

    The decision sees every unit outside the fold; the estimate is the mean
    reward over the fold's units in the chosen arm only.
    """
    chosen = decide_on_folds(exp, rule, folds, p)
    arm = exp.arm(chosen)
    mask = folds.folds[chosen] == p
    if not mask.any():
        raise DegenerateFoldError(
            f"experiment {exp.experiment_id!r}: fold {p} contains no units "
            f"of the chosen arm {chosen}"
        )
    return float(_reward_values(arm, reward)[mask].mean())


def _experiment_cv_mean(
    exp: ExperimentData,
    rule: DecisionRule,
    reward: RewardSpec,
    num_folds: int,
    fold_seed: int,
) -> float:
    folds = assign_folds(exp, num_folds, fold_seed)
    values = [
        cv_fold_reward(exp, rule, reward, folds, p)
        for p in range(1, num_folds + 1)
    ]
    return float(np.mean(values))


def aggregate(values: np.ndarray, weights: np.ndarray, mode: str) -> float:
    """Weighted mean or weighted sum of per-experiment contributions."""
    values = np.asarray(values, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if mode == "cumulative":
        return float(np.sum(weights * values))
    total = float(weights.sum())
    if total <= 0:
        raise ValueError("aggregate mean needs positive total weight")
    return float(np.sum(weights * values) / total)


def cv_reward(
    exps: list[ExperimentData],
    rule: DecisionRule,
    reward: RewardSpec,
    num_folds: int,
    seed: int = 0,
    mode: str = "mean",
) -> RewardEstimate:
    """k-fold cross-validation estimate aggregated over experiments.

    Each experiment contributes the unweighted mean of its fold rewards;
    contributions are then combined by experiment weight.
    """
    if num_folds < 2:
        raise ValueError("num_folds must be >= 2")
    contributions = []
    for exp in exps:
        try:
            contributions.append(
                _experiment_cv_mean(exp, rule, reward, num_folds, seed)
            )
        except Exception as err:
            raise type(err)(
                f"experiment {exp.experiment_id!r}: {err}"
            ) from err
    weights = np.array([e.weight for e in exps])
    value = aggregate(np.array(contributions), weights, mode)
    return RewardEstimate(
        value=value,
        estimator="cv-kfold",
        mode=mode,
        params={"num_folds": num_folds, "fold_seed": seed},
        per_experiment=tuple(contributions),
        weights=tuple(float(w) for w in weights),
    )


def _loo_sum_fast(
    exp: ExperimentData, rule: DecisionRule, reward: RewardSpec
) -> float:
    """Exact leave-one-out sum for ungated rules in one pass.

    Holding out position m removes unit m from every arm, so the blend
    mean of arm k without m is (total_k - blend_km) / (M - 1).  The fold
    reward is the reward value of unit m in the arm chosen without it.
    """
    m = exp.arms[0].num_units
    blend_vals = np.stack([arm.units @ rule.blend for arm in exp.arms])
    psi_vals = np.stack([_reward_values(arm, reward) for arm in exp.arms])
    loo_means = (blend_vals.sum(axis=1, keepdims=True) - blend_vals) / (m - 1)
    chosen = np.argmax(loo_means, axis=0)  # first max = lowest arm index
    return float(psi_vals[chosen, np.arange(m)].sum())


def _subset_fold_reward(
    exp: ExperimentData,
    rule: DecisionRule,
    reward: RewardSpec,
    subset: tuple[int, ...],
) -> float:
    """Fold reward for one held-out set of unit positions (all arms)."""
    m = exp.arms[0].num_units
    keep = np.ones(m, dtype=bool)
    keep[list(subset)] = False
    min_units = 2 if rule.gate == "significant-vs-reference" else 1
    if int(keep.sum()) < min_units:
        raise DegenerateFoldError(
            f"experiment {exp.experiment_id!r}: holding out {len(subset)} "
            f"unit(s) leaves {int(keep.sum())}, needs >= {min_units}"
        )
    reduced = ExperimentData(
        experiment_id=exp.experiment_id,
        arms=tuple(
            ArmData(arm_index=a.arm_index, units=a.units[keep]) for a in exp.arms
        ),
        weight=exp.weight,
    )
    chosen = decide(reduced, rule)
    vals = _reward_values(exp.arm(chosen), reward)
    return float(vals[list(subset)].mean())


def leave_l_out_reward(
    exp: ExperimentData,
    rule: DecisionRule,
    reward: RewardSpec,
    leave_out: int,
    max_folds: int | None = None,
    seed: int = 0,
) -> float:
    """Sum of fold rewards over every size-l held-out subset of unit positions.

    All arms must have the same unit count M; a held-out subset of
    positions applies to every arm at once.  Returns the sum over all
    C(M, l) subsets.  When that count exceeds ``max_folds`` (default
    10,000 for l >= 2), the sum is estimated without bias from
    ``max_folds`` uniformly sampled subsets, scaled by C(M, l).

    Note this is the raw sum, not a mean: the Poisson-rescaled estimator
    multiplies it by ``l! / m0**l``.
    """
    if leave_out < 1:
        raise ValueError("leave_out must be >= 1")
    sizes = {arm.num_units for arm in exp.arms}
    if len(sizes) != 1:
        raise ValueError(
            f"experiment {exp.experiment_id!r}: leave-l-out needs equal arm "
            f"sizes, got {sorted(sizes)}"
        )
    m = sizes.pop()
    if leave_out >= m:
        raise ValueError(
            f"experiment {exp.experiment_id!r}: leave_out={leave_out} "
            f"requires arms larger than {leave_out}, got {m}"
        )
    if leave_out == 1 and rule.gate == "none":
        return _loo_sum_fast(exp, rule, reward)

    num_subsets = math.comb(m, leave_out)
    if max_folds is None:
        max_folds = num_subsets if leave_out == 1 else 10_000
    if num_subsets <= max_folds:
        total = 0.0
        for subset in combinations(range(m), leave_out):
            total += _subset_fold_reward(exp, rule, reward, subset)
        return total
    rng = substream(seed, "leave-l-out", exp.experiment_id, leave_out)
    acc = 0.0
    for _ in range(max_folds):
        subset = tuple(rng.choice(m, size=leave_out, replace=False))
        acc += _subset_fold_reward(exp, rule, reward, subset)
    return num_subsets * acc / max_folds


def poisson_rescaled_reward(
    exp: ExperimentData,
    rule: DecisionRule,
    reward: RewardSpec,
    leave_out: int,
    m0: float,
    max_folds: int | None = None,
    seed: int = 0,
) -> float:
    """Leave-l-out sum rescaled by ``l! / m0**l``.

    Under per-arm unit counts drawn Poisson with mean ``m0``, the rescaled
    sum is unbiased for the expected reward of the rule applied to the full
    experiment.  ``m0`` is the enrollment-rate design parameter and is
    supplied, not estimated.
    """
    if not m0 > 0:
        raise ValueError("m0 must be > 0")
    total = leave_l_out_reward(exp, rule, reward, leave_out, max_folds, seed)
    return float(math.factorial(leave_out) * total / m0**leave_out)


def per_experiment_rewards(
    exps: list[ExperimentData],
    rule: DecisionRule,
    reward: RewardSpec,
    config: EstimatorConfig,
) -> np.ndarray:
    """Per-experiment contributions under the configured estimator.

    naive: plug-in estimate; cv-kfold: mean over fold rewards;
    cv-leave-l-out: mean over held-out subsets; poisson-rescaled: the
    rescaled leave-l-out sum.
    """
    out = np.empty(len(exps))
    for i, exp in enumerate(exps):
        if config.kind == "naive":
            out[i] = naive_reward(exp, rule, reward)
        elif config.kind == "cv-kfold":
            out[i] = _experiment_cv_mean(
                exp, rule, reward, config.num_folds, config.fold_seed
            )
        elif config.kind == "cv-leave-l-out":
            m = exp.arms[0].num_units
            total = leave_l_out_reward(
                exp, rule, reward, config.leave_out, config.max_folds,
                config.fold_seed,
            )
            out[i] = total / math.comb(m, config.leave_out)
        else:
            out[i] = poisson_rescaled_reward(
                exp, rule, reward, config.leave_out, config.m0,
                config.max_folds, config.fold_seed,
            )
    return out


def estimate_reward(
    exps: list[ExperimentData],
    rule: DecisionRule,
    reward: RewardSpec,
    config: EstimatorConfig,
) -> RewardEstimate:
    """Aggregate reward estimate over a corpus of experiments."""
    if not exps:
        raise ValueError("need at least one experiment")
    contributions = per_experiment_rewards(exps, rule, reward, config)
    weights = np.array([e.weight for e in exps])
    value = aggregate(contributions, weights, config.mode)
    params: dict = {"mode": config.mode}
    if config.kind == "cv-kfold":
        params.update(num_folds=config.num_folds, fold_seed=config.fold_seed)
    elif config.kind == "cv-leave-l-out":
        params.update(leave_out=config.leave_out, max_folds=config.max_folds)
    elif config.kind == "poisson-rescaled":
        params.update(leave_out=config.leave_out, m0=config.m0)
    return RewardEstimate(
        value=value,
        estimator=config.kind,
        mode=config.mode,
        params=params,
        per_experiment=tuple(float(c) for c in contributions),
        weights=tuple(float(w) for w in weights),
    )


def bootstrap_aggregates(
    contributions: np.ndarray,
    weights: np.ndarray,
    mode: str,
    n_replicates: int,
    rng: np.random.Generator,
    max_redraws: int = 10_000,
) -> tuple[np.ndarray, int]:
    """Experiment-level cluster bootstrap of the aggregate.

    Experiments are resampled with replacement; per-experiment
    contributions are held fixed (fold assignments and decisions are not
    recomputed).  Resamples with zero total weight in mean mode are
    redrawn and counted, up to ``max_redraws`` total.
    """
    n = len(contributions)
    out = np.empty(n_replicates)
    redraws = 0
    for b in range(n_replicates):
        while True:
            idx = rng.integers(0, n, size=n)
            w = weights[idx]
            if mode == "cumulative" or w.sum() > 0:
                break
            redraws += 1
            if redraws > max_redraws:
                raise RuntimeError(
                    "bootstrap exceeded the redraw cap: all-zero-weight "
                    "resamples keep occurring"
                )
        out[b] = aggregate(contributions[idx], w, mode)
    return out, redraws


def bootstrap_ci(
    exps: list[ExperimentData],
    rule: DecisionRule,
    reward: RewardSpec,
    config: EstimatorConfig,
    n_replicates: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> ConfidenceInterval:
    """Percentile bootstrap interval for the aggregate reward estimate.

    Experiments are the independent sampling unit.  Fold noise is held
    fixed across resamples; the interval reflects cross-experiment
    variation only.
    """
    if len(exps) < 2:
        raise ValueError("bootstrap needs at least 2 experiments")
    if n_replicates < 100:
        raise ValueError("bootstrap needs at least 100 replicates")
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    contributions = per_experiment_rewards(exps, rule, reward, config)
    weights = np.array([e.weight for e in exps])
    rng = substream(seed, "bootstrap", config.kind, n_replicates)
    draws, _ = bootstrap_aggregates(
        contributions, weights, config.mode, n_replicates, rng
    )
    alpha = 1.0 - level
    lower = float(np.quantile(draws, alpha / 2.0))
    upper = float(np.quantile(draws, 1.0 - alpha / 2.0))
    return ConfidenceInterval(lower=lower, upper=upper, level=level)
