"""Experiment data types and the decision-rule engine.

An experiment holds per-unit outcome vectors for each arm; a decision rule
maps those observations to a single arm to launch.  Rules are built from a
linear blend of the outcome metrics, optionally gated on statistical
significance versus the reference arm (arm 1).  All operations here are
pure functions of immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .streams import substream

__all__ = [
    "ArmData",
    "DecisionRule",
    "DegenerateArmError",
    "DegenerateFoldError",
    "ExperimentData",
    "FoldAssignment",
    "RewardSpec",
    "assign_folds",
    "blend_mean_and_se",
    "decide",
    "decide_on_folds",
    "significance_set",
]


class DegenerateArmError(ValueError):
    """An arm has too few units for the requested computation."""


class DegenerateFoldError(ValueError):
    """Removing a held-out fold left an arm without enough units."""


@dataclass(frozen=True)
class ArmData:
    """One treatment arm: a 1-based index and a (units, metrics) matrix.

    Units are exchangeable; row order carries no meaning.
    """

    arm_index: int
    units: np.ndarray

    def __post_init__(self) -> None:
        units = np.asarray(self.units, dtype=float)
        if units.ndim != 2:
            raise ValueError(
                f"arm {self.arm_index}: units must be 2-D (units x metrics), "
                f"got shape {units.shape}"
            )
        if units.shape[0] < 1:
            raise DegenerateArmError(f"arm {self.arm_index} has no units")
        if self.arm_index < 1:
            raise ValueError(f"arm index must be >= 1, got {self.arm_index}")
        object.__setattr__(self, "units", units)

    @property
    def num_units(self) -> int:
        return self.units.shape[0]

    @property
    def num_metrics(self) -> int:
        return self.units.shape[1]


@dataclass(frozen=True)
class ExperimentData:
    """All observations from one experiment.

    Arms are ordered and contiguously indexed from 1; arm 1 is the
    reference (control) arm.  ``weight`` scales this experiment's
    contribution in aggregate estimates.  Single-arm experiments are
    permitted; decision rules then trivially return arm 1.
    """

    experiment_id: str
    arms: tuple[ArmData, ...]
    weight: float = 1.0

    def __post_init__(self) -> None:
        arms = tuple(self.arms)
        if not arms:
            raise ValueError(f"experiment {self.experiment_id!r} has no arms")
        for pos, arm in enumerate(arms):
            if arm.arm_index != pos + 1:
                raise ValueError(
                    f"experiment {self.experiment_id!r}: arm indices must be "
                    f"contiguous from 1, found {arm.arm_index} at position {pos + 1}"
                )
        num_metrics = arms[0].num_metrics
        for arm in arms:
            if arm.num_metrics != num_metrics:
                raise ValueError(
                    f"experiment {self.experiment_id!r}: arm {arm.arm_index} has "
                    f"{arm.num_metrics} metrics, expected {num_metrics}"
                )
        if not self.weight >= 0:
            raise ValueError(
                f"experiment {self.experiment_id!r}: weight must be nonnegative"
            )
        object.__setattr__(self, "arms", arms)

    @property
    def num_arms(self) -> int:
        return len(self.arms)

    @property
    def num_metrics(self) -> int:
        return self.arms[0].num_metrics

    def arm(self, arm_index: int) -> ArmData:
        if not 1 <= arm_index <= len(self.arms):
            raise ValueError(
                f"experiment {self.experiment_id!r} has no arm {arm_index}"
            )
        return self.arms[arm_index - 1]


@dataclass(frozen=True)
class RewardSpec:
    """The reward functional: a linear map from an outcome vector to a scalar.

    Either a single metric picked by 1-based index (the default reward is
    metric 1) or an explicit linear combination of all metrics.
    """

    kind: str = "metric-index"
    index: int = 1
    coefficients: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("metric-index", "linear-combination"):
            raise ValueError(f"unknown reward kind {self.kind!r}")
        if self.kind == "metric-index":
            if self.index < 1:
                raise ValueError("metric index must be >= 1")
        else:
            if self.coefficients is None:
                raise ValueError("linear-combination reward needs coefficients")
            object.__setattr__(
                self, "coefficients", np.asarray(self.coefficients, dtype=float)
            )

    @classmethod
    def metric(cls, index: int = 1) -> "RewardSpec":
        return cls(kind="metric-index", index=index)

    @classmethod
    def combination(cls, coefficients) -> "RewardSpec":
        return cls(kind="linear-combination", coefficients=coefficients)

    def weights(self, num_metrics: int) -> np.ndarray:
        """Coefficient vector of length ``num_metrics`` implementing the reward."""
        if self.kind == "metric-index":
            if self.index > num_metrics:
                raise ValueError(
                    f"reward metric index {self.index} out of range "
                    f"for {num_metrics} metrics"
                )
            w = np.zeros(num_metrics)
            w[self.index - 1] = 1.0
            return w
        coefs = self.coefficients
        if len(coefs) != num_metrics:
            raise ValueError(
                f"reward coefficients have length {len(coefs)}, "
                f"expected {num_metrics}"
            )
        return np.array(coefs, dtype=float)


@dataclass(frozen=True)
class DecisionRule:
    """A launch rule: pick the arm maximizing a blend of metrics.

    ``blend`` is applied as an inner product with each unit's outcome
    vector.  With ``gate="none"`` the rule is a plain argmax of blend
    means.  With ``gate="significant-vs-reference"`` only arms whose gate
    metrics beat the reference arm at level ``gate_alpha`` (two-sample
    z-test, unpooled standard errors) are eligible; if no arm qualifies the
    rule returns ``fallback_arm``.  ``gate_metrics`` lets the gate test
    different blends than the one being maximized, combined with
    ``gate_combine`` ("all": every gate blend must pass; "any": at least
    one must).  Ties always break to the lowest arm index, so the control
    arm wins exact ties.
    """

    blend: np.ndarray = field(default_factory=lambda: np.array([1.0]))
    gate: str = "none"
    gate_alpha: float = 0.05
    gate_sides: str = "one-sided-greater"
    gate_metrics: tuple[np.ndarray, ...] | None = None
    gate_combine: str = "all"
    fallback_arm: int = 1
    tie_break: str = "lowest-index"

    def __post_init__(self) -> None:
        object.__setattr__(self, "blend", np.asarray(self.blend, dtype=float))
        if self.gate not in ("none", "significant-vs-reference"):
            raise ValueError(f"unknown gate {self.gate!r}")
        if not 0.0 < self.gate_alpha < 1.0:
            raise ValueError("gate_alpha must be in (0, 1)")
        if self.gate_sides not in ("one-sided-greater", "two-sided"):
            raise ValueError(f"unknown gate_sides {self.gate_sides!r}")
        if self.gate_combine not in ("all", "any"):
            raise ValueError(f"unknown gate_combine {self.gate_combine!r}")
        if self.tie_break != "lowest-index":
            raise ValueError("only lowest-index tie-breaking is supported")
        if self.fallback_arm < 1:
            raise ValueError("fallback_arm must be >= 1")
        if self.gate_metrics is not None:
            gates = tuple(np.asarray(g, dtype=float) for g in self.gate_metrics)
            if not gates:
                raise ValueError("gate_metrics must be nonempty when given")
            object.__setattr__(self, "gate_metrics", gates)

    def gate_blends(self) -> tuple[np.ndarray, ...]:
        """Blends tested by the significance gate (defaults to the main blend)."""
        if self.gate_metrics is not None:
            return self.gate_metrics
        return (self.blend,)


@dataclass(frozen=True)
class FoldAssignment:
    """A partition of each arm's units into ``num_folds`` folds.

    ``folds`` maps arm index to an integer array of fold labels in
    [1, num_folds], one per unit position.  Assignments are stratified by
    arm so each arm's fold sizes differ by at most one.
    """

    experiment_id: str
    num_folds: int
    folds: dict[int, np.ndarray]
    seed: int

    def __post_init__(self) -> None:
        if self.num_folds < 2:
            raise ValueError("num_folds must be >= 2")

    def fold_of(self, arm_index: int, unit_position: int) -> int:
        """Fold label of a unit, addressed by arm index and 0-based position."""
        return int(self.folds[arm_index][unit_position])


def assign_folds(exp: ExperimentData, num_folds: int, seed: int) -> FoldAssignment:
    """Randomly split each arm's units into ``num_folds`` near-equal folds.

    The draw is a deterministic function of (seed, experiment id, arm
    sizes): each arm gets its own substream, so the same experiment always
    receives the same assignment regardless of what else was sampled.
    """
    if num_folds < 2:
        raise ValueError("num_folds must be >= 2")
    folds: dict[int, np.ndarray] = {}
    for arm in exp.arms:
        rng = substream(seed, "folds", exp.experiment_id, arm.arm_index)
        m = arm.num_units
        labels = np.arange(m) % num_folds + 1
        folds[arm.arm_index] = labels[rng.permutation(m)]
    return FoldAssignment(
        experiment_id=exp.experiment_id,
        num_folds=num_folds,
        folds=folds,
        seed=seed,
    )


def blend_mean_and_se(arm: ArmData, blend: np.ndarray) -> tuple[float, float]:
    """Sample mean and standard error of the blended outcome over an arm.

    The standard error uses the unbiased sample variance (divisor M - 1),
    so the arm must have at least two units.
    """
    blend = np.asarray(blend, dtype=float)
    if blend.shape != (arm.num_metrics,):
        raise ValueError(
            f"blend has shape {blend.shape}, expected ({arm.num_metrics},)"
        )
    m = arm.num_units
    if m < 2:
        raise DegenerateArmError(
            f"arm {arm.arm_index} has {m} unit(s); standard error needs >= 2"
        )
    values = arm.units @ blend
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(m))
    return mean, se


def _blend_means(exp: ExperimentData, blend: np.ndarray) -> np.ndarray:
    blend = np.asarray(blend, dtype=float)
    if blend.shape != (exp.num_metrics,):
        raise ValueError(
            f"blend has shape {blend.shape}, expected ({exp.num_metrics},)"
        )
    return np.array([float((arm.units @ blend).mean()) for arm in exp.arms])


def _z_statistic(mean_k: float, se_k: float, mean_ref: float, se_ref: float) -> float:
    diff = mean_k - mean_ref
    denom = float(np.hypot(se_k, se_ref))
    if denom == 0.0:
        if diff == 0.0:
            return 0.0
        return float(np.inf) if diff > 0 else float(-np.inf)
    return diff / denom


def significance_set(exp: ExperimentData, rule: DecisionRule) -> set[int]:
    """Arms whose gate metrics are significant versus the reference arm.

    Uses a two-sample z-test with unpooled standard errors per gate blend;
    an arm is in the set when the per-blend results combine to true under
    ``rule.gate_combine``.  The reference arm (arm 1) is never included.
    """
    if rule.gate != "significant-vs-reference":
        raise ValueError("significance_set requires gate='significant-vs-reference'")
    for arm in exp.arms:
        if arm.num_units < 2:
            raise DegenerateArmError(
                f"experiment {exp.experiment_id!r}: arm {arm.arm_index} has "
                f"{arm.num_units} unit(s); the significance gate needs >= 2"
            )
    if rule.gate_sides == "one-sided-greater":
        crit = float(stats.norm.isf(rule.gate_alpha))
    else:
        crit = float(stats.norm.isf(rule.gate_alpha / 2.0))

    ref = exp.arm(1)
    members: set[int] = set()
    gate_stats = []
    for blend in rule.gate_blends():
        ref_mean, ref_se = blend_mean_and_se(ref, blend)
        gate_stats.append((blend, ref_mean, ref_se))
    for arm in exp.arms[1:]:
        passed = []
        for blend, ref_mean, ref_se in gate_stats:
            mean_k, se_k = blend_mean_and_se(arm, blend)
            z = _z_statistic(mean_k, se_k, ref_mean, ref_se)
            if rule.gate_sides == "two-sided":
                passed.append(abs(z) > crit)
            else:
                passed.append(z > crit)
        ok = all(passed) if rule.gate_combine == "all" else any(passed)
        if ok:
            members.add(arm.arm_index)
    return members


def decide(exp: ExperimentData, rule: DecisionRule) -> int:
    """Apply a decision rule to an experiment, returning the chosen arm index.

    Ungated rules take the argmax of blend means over all arms.  Gated
    rules take the argmax restricted to the significance set, or the
    fallback arm when the set is empty.  Exact ties go to the lowest index.
    """
    means = _blend_means(exp, rule.blend)
    if rule.gate == "none":
        return int(np.argmax(means)) + 1
    eligible = significance_set(exp, rule)
    if not eligible:
        if rule.fallback_arm > exp.num_arms:
            raise ValueError(
                f"fallback arm {rule.fallback_arm} does not exist in "
                f"experiment {exp.experiment_id!r}"
            )
        return rule.fallback_arm
    best = None
    best_mean = -np.inf
    for k in sorted(eligible):
        if means[k - 1] > best_mean:
            best = k
            best_mean = means[k - 1]
    return int(best)


def remove_fold(
    exp: ExperimentData,
    folds: FoldAssignment,
    held_out: int,
    min_units: int,
) -> ExperimentData:
    """Experiment with the held-out fold's units removed from every arm."""
    if not 1 <= held_out <= folds.num_folds:
        raise ValueError(
            f"held-out fold {held_out} out of range [1, {folds.num_folds}]"
        )
    arms = []
    for arm in exp.arms:
        labels = folds.folds[arm.arm_index]
        if labels.shape[0] != arm.num_units:
            raise ValueError(
                f"fold assignment for experiment {exp.experiment_id!r} arm "
                f"{arm.arm_index} covers {labels.shape[0]} units, "
                f"arm has {arm.num_units}"
            )
        keep = labels != held_out
        kept = int(keep.sum())
        if kept < min_units:
            raise DegenerateFoldError(
                f"experiment {exp.experiment_id!r}: removing fold {held_out} "
                f"leaves arm {arm.arm_index} with {kept} unit(s), "
                f"needs >= {min_units}"
            )
        arms.append(ArmData(arm_index=arm.arm_index, units=arm.units[keep]))
    return ExperimentData(
        experiment_id=exp.experiment_id, arms=tuple(arms), weight=exp.weight
    )


def decide_on_folds(
    exp: ExperimentData,
    rule: DecisionRule,
    folds: FoldAssignment,
    held_out: int,
) -> int:
    """Decision made with the held-out fold's units removed from every arm.

    Raises DegenerateFoldError when the removal empties an arm (or leaves a
    single unit under a significance gate); silent skips would bias any
    estimator built on top.
    """
    min_units = 2 if rule.gate == "significant-vs-reference" else 1
    return decide(remove_fold(exp, folds, held_out, min_units), rule)
