"""Monte Carlo engine for the Gaussian experiment model.

Two simulation paths share the same generative model:

* a unit-level path (``draw_experiment``) that materializes every outcome
  vector, used for small experiments and for cross-checking;
* a sufficient-statistics fast path that simulates fold-level mean vectors
  directly.  For ungated linear-blend rules every quantity the estimators
  touch (full-data means, leave-fold-out means, held-out fold rewards) is a
  function of fold means, whose joint law is exactly multivariate normal,
  so the fast path is exact, not an approximation.  Gated rules use a
  known-variance z-gate on top of the fold means, which treats the
  unit-level covariance as known; that is accurate in the large-M regime
  the model targets.

Reductions are deterministic and independent of parallelism: work is cut
into fixed-size chunks keyed by (seed, point, chunk), executed in any
order, and reduced in chunk order.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .closed_form import EffectModel, cv_expectation, naive_expectation, true_reward
from .experiments import ArmData, DegenerateFoldError, ExperimentData
from .streams import substream

__all__ = [
    "DEFAULT_MODEL",
    "DEFAULT_PROXIES",
    "ProxySpec",
    "RescalingCheckReport",
    "SelectionCheckReport",
    "SimRule",
    "SimulationConfig",
    "SimulationResult",
    "SweepPointRow",
    "SweepSpec",
    "check_poisson_rescaling",
    "check_rule_selection",
    "draw_experiment",
    "parallelism_degree",
    "run_bias_sweep",
]

PARALLELISM_ENV_VAR = "RULEVAL_PARALLEL"
CHUNK_REPLICATIONS = 256

# Default generative parameters: a weak signal-to-noise regime with one
# hundred experiments of a million units per arm.
DEFAULT_MODEL = EffectModel.from_correlations(
    effect_sd_y=1e-4,
    effect_sd_proxy=0.01,
    effect_corr=0.8,
    noise_sd_y=0.10,
    noise_sd_proxy=10.0,
    noise_corr=0.4,
    units_per_arm=1_000_000,
    num_experiments=100,
    num_folds=10,
)
DEFAULT_REPLICATIONS = 10_000


@dataclass(frozen=True)
class ProxySpec:
    """A candidate proxy metric: its true-effect and unit-noise correlations
    with the north star."""

    name: str
    effect_corr: float
    noise_corr: float


# A proxy whose treatment effects track the north star, and one whose
# apparent alignment is almost entirely correlated measurement noise.
DEFAULT_PROXIES = (
    ProxySpec("good", effect_corr=0.8, noise_corr=0.1),
    ProxySpec("bad", effect_corr=0.05, noise_corr=0.9),
)


@dataclass(frozen=True)
class SimRule:
    """Decision rule in metric space for the fast path.

    ``blend`` has one coefficient per metric.  The treatment arm launches
    when the blended effect estimate is positive (ties go to control).
    With ``gate="significant-vs-reference"`` the launch additionally
    requires a one-sided z-statistic above the alpha critical value, with
    the unit-level covariance treated as known.
    """

    blend: np.ndarray = field(default_factory=lambda: np.array([0.0, 1.0]))
    gate: str = "none"
    gate_alpha: float = 0.05

    def __post_init__(self) -> None:
        object.__setattr__(self, "blend", np.asarray(self.blend, dtype=float))
        if self.gate not in ("none", "significant-vs-reference"):
            raise ValueError(f"unknown gate {self.gate!r}")
        if not 0.0 < self.gate_alpha < 1.0:
            raise ValueError("gate_alpha must be in (0, 1)")


@dataclass(frozen=True)
class SweepSpec:
    """One swept model field and its grid (strictly increasing)."""

    field: str
    grid: tuple[float, ...]

    _FIELDS = ("noise_sd_proxy", "units_per_arm", "num_experiments")

    def __post_init__(self) -> None:
        if self.field not in self._FIELDS:
            raise ValueError(
                f"sweep field must be one of {self._FIELDS}, got {self.field!r}"
            )
        grid = tuple(float(g) for g in self.grid)
        if len(grid) < 1:
            raise ValueError("sweep grid is empty")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("sweep grid must be strictly increasing")
        object.__setattr__(self, "grid", grid)


@dataclass(frozen=True)
class SimulationConfig:
    model: EffectModel = DEFAULT_MODEL
    size_mode: str = "fixed"
    m0: float | None = None
    num_replications: int = DEFAULT_REPLICATIONS
    seed: int = 0
    rule: SimRule = field(default_factory=SimRule)
    estimators: tuple[str, ...] = ("true", "naive", "cv")
    sweep: SweepSpec | None = None
    mode: str = "cumulative"

    def __post_init__(self) -> None:
        if self.size_mode not in ("fixed", "poisson"):
            raise ValueError(f"unknown size_mode {self.size_mode!r}")
        if self.size_mode == "poisson" and (self.m0 is None or not self.m0 > 0):
            raise ValueError("poisson size mode needs m0 > 0")
        if self.num_replications < 1:
            raise ValueError("num_replications must be >= 1")
        if self.mode not in ("mean", "cumulative"):
            raise ValueError(f"unknown mode {self.mode!r}")
        unknown = set(self.estimators) - {"true", "naive", "cv"}
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")
        if not self.estimators:
            raise ValueError("estimators must be nonempty")


@dataclass(frozen=True)
class SweepPointRow:
    variant: str
    sweep_field: str
    sweep_value: float
    estimator: str
    mean: float
    se: float
    closed_form: float | None
    rel_bias: float | None
    replications: int
    num_experiments: int


@dataclass(frozen=True)
class SimulationResult:
    rows: tuple[SweepPointRow, ...]
    zero_size_redraws: int = 0


def parallelism_degree() -> int:
    """Worker count from the environment; degree never changes results."""
    raw = os.environ.get(PARALLELISM_ENV_VAR, "1")
    try:
        degree = int(raw)
    except ValueError as err:
        raise ValueError(
            f"{PARALLELISM_ENV_VAR} must be a positive integer, got {raw!r}"
        ) from err
    if degree < 1:
        raise ValueError(f"{PARALLELISM_ENV_VAR} must be >= 1, got {degree}")
    return degree


def _ordered_parallel_map(fn, jobs: list) -> list:
    """Run jobs with the configured degree; results come back in job order."""
    degree = parallelism_degree()
    if degree == 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=degree) as pool:
        return list(pool.map(fn, jobs))


def _fold_sizes(m: int, num_folds: int) -> np.ndarray:
    """Near-equal fold sizes; the first m % P folds take the extra unit."""
    base, extra = divmod(m, num_folds)
    sizes = np.full(num_folds, base, dtype=int)
    sizes[:extra] += 1
    return sizes


def cov_factor(mat: np.ndarray) -> np.ndarray:
    """A matrix F with F @ F.T equal to the covariance.

    Cholesky when the matrix is positive definite; otherwise an
    eigendecomposition square root, which handles the semidefinite edges
    (zero covariance, correlations of exactly +-1) without perturbation.
    """
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        eigvals, eigvecs = np.linalg.eigh(mat)
        return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def draw_experiment(
    model: EffectModel,
    size_mode: str,
    rng: np.random.Generator,
    m0: float | None = None,
    experiment_id: str = "sim",
    counters: dict[str, int] | None = None,
) -> tuple[ExperimentData, tuple[float, float]]:
    """Draw one unit-level two-arm experiment and its true effects.

    Control units are centered at zero, treatment units at the drawn true
    effect vector; both share the model's unit-level noise covariance.  In
    poisson mode the per-arm unit count is drawn once per experiment; a
    draw of zero is rejected and redrawn (counted in ``counters`` under
    ``"zero_size_redraws"``) because no decision is defined on an empty
    experiment.
    """
    if size_mode == "fixed":
        m = model.units_per_arm
    elif size_mode == "poisson":
        if m0 is None or not m0 > 0:
            raise ValueError("poisson size mode needs m0 > 0")
        m = int(rng.poisson(m0))
        while m == 0:
            if counters is not None:
                counters["zero_size_redraws"] = counters.get("zero_size_redraws", 0) + 1
            m = int(rng.poisson(m0))
    else:
        raise ValueError(f"unknown size_mode {size_mode!r}")

    effect_chol = cov_factor(model.effect_cov)
    noise_chol = cov_factor(model.noise_cov)
    tau = effect_chol @ rng.standard_normal(2)
    control = rng.standard_normal((m, 2)) @ noise_chol.T
    treatment = tau + rng.standard_normal((m, 2)) @ noise_chol.T
    exp = ExperimentData(
        experiment_id=experiment_id,
        arms=(
            ArmData(arm_index=1, units=control),
            ArmData(arm_index=2, units=treatment),
        ),
    )
    return exp, (float(tau[0]), float(tau[1]))


def _simulate_estimates(
    effect_chol: np.ndarray,
    noise_chol: np.ndarray,
    noise_cov: np.ndarray,
    m: int,
    num_folds: int,
    n: int,
    rules: tuple[SimRule, ...],
    psi: np.ndarray,
    rng: np.random.Generator,
) -> dict[str, np.ndarray]:
    """Fast-path draws for ``n`` experiments; returns (n, n_rules) arrays.

    Simulates true effects and per-arm fold-mean vectors, then evaluates
    for each rule the true earned reward, the plug-in estimate, and the
    k-fold cross-validation estimate.  Fold means carry ``noise_cov / m_p``
    covariance; leave-fold-out means recombine the remaining folds with
    their exact size weights, so decisions match the unit-level engine.
    """
    n_metrics = effect_chol.shape[0]
    if m < num_folds:
        raise DegenerateFoldError(
            f"fast path needs units_per_arm >= num_folds, got {m} < {num_folds}"
        )
    sizes = _fold_sizes(m, num_folds)

    tau = rng.standard_normal((n, n_metrics)) @ effect_chol.T
    eps = rng.standard_normal((n, 2, num_folds, n_metrics)) @ noise_chol.T
    eps /= np.sqrt(sizes)[None, None, :, None]
    fold_means = eps
    fold_means[:, 1] += tau[:, None, :]

    weights = sizes / m
    arm_means = np.einsum("napj,p->naj", fold_means, weights)
    effect_full = arm_means[:, 1] - arm_means[:, 0]
    # Leave-fold-out effect estimates: remove one fold's (weighted) share.
    arm_sums = arm_means * m
    loo = (arm_sums[:, :, None, :] - fold_means * sizes[None, None, :, None]) / (
        m - sizes
    )[None, None, :, None]
    effect_loo = loo[:, 1] - loo[:, 0]

    out_true = np.empty((n, len(rules)))
    out_naive = np.empty((n, len(rules)))
    out_cv = np.empty((n, len(rules)))
    for r, rule in enumerate(rules):
        blend = rule.blend
        if blend.shape != (n_metrics,):
            raise ValueError(
                f"rule blend has shape {blend.shape}, expected ({n_metrics},)"
            )
        score_full = effect_full @ blend
        score_loo = effect_loo @ blend
        if rule.gate == "none":
            launch_full = score_full > 0
            launch_loo = score_loo > 0
        else:
            crit = float(stats.norm.isf(rule.gate_alpha))
            gate_var = 2.0 * float(blend @ noise_cov @ blend)
            launch_full = score_full > crit * np.sqrt(gate_var / m)
            launch_loo = score_loo > crit * np.sqrt(gate_var / (m - sizes))[None, :]

        out_true[:, r] = np.where(launch_full, tau @ psi, 0.0)
        out_naive[:, r] = np.where(
            launch_full, arm_means[:, 1] @ psi, arm_means[:, 0] @ psi
        )
        fold_psi = fold_means @ psi  # (n, 2, P)
        picked = np.where(launch_loo, fold_psi[:, 1, :], fold_psi[:, 0, :])
        out_cv[:, r] = picked.mean(axis=1)
    return {"true": out_true, "naive": out_naive, "cv": out_cv}


def _model_at(model: EffectModel, sweep_field: str | None, value: float) -> EffectModel:
    if sweep_field is None:
        return model
    if sweep_field == "units_per_arm":
        return model.replace(units_per_arm=int(round(value)))
    if sweep_field == "num_experiments":
        return model.replace(num_experiments=int(round(value)))
    if sweep_field == "noise_sd_proxy":
        sd_y = float(np.sqrt(model.noise_cov[0, 0]))
        old_sd = float(np.sqrt(model.noise_cov[1, 1]))
        corr = float(model.noise_cov[0, 1] / (sd_y * old_sd)) if old_sd > 0 else 0.0
        noise_cov = np.array(
            [[sd_y**2, corr * sd_y * value], [corr * sd_y * value, value**2]]
        )
        return model.replace(noise_cov=noise_cov)
    raise ValueError(f"unknown sweep field {sweep_field!r}")


def _closed_forms(
    model: EffectModel, rule: SimRule, psi: np.ndarray
) -> dict[str, float] | None:
    """Exact expectations when the rule is the ungated positive-proxy rule.

    Available for two-metric models with the blend on the proxy axis and
    the reward a positive multiple of the north star; both estimators and
    the truth scale linearly in the reward coefficient.
    """
    if rule.gate != "none":
        return None
    if psi.shape != (2,) or rule.blend.shape != (2,):
        return None
    if psi[1] != 0.0 or psi[0] <= 0.0:
        return None
    if rule.blend[0] != 0.0 or rule.blend[1] <= 0.0:
        return None
    scale = float(psi[0])
    return {
        "true": scale * true_reward(model),
        "naive": scale * naive_expectation(model),
        "cv": scale * cv_expectation(model),
    }


def _sweep_chunk(args) -> tuple[dict[str, tuple[float, float]], int]:
    """Simulate one chunk of replications at one sweep point.

    Returns per-estimator (sum, sum of squares) over the chunk's
    per-replication aggregates, plus the zero-size redraw count.
    """
    (config, variant, point_idx, chunk_idx, chunk_reps, model) = args
    n_exps = model.num_experiments
    n = chunk_reps * n_exps
    psi = np.array([1.0, 0.0])
    effect_chol = cov_factor(model.effect_cov)
    noise_chol = cov_factor(model.noise_cov)
    rules = (config.rule,)
    redraws = 0

    if config.size_mode == "fixed":
        rng = substream(config.seed, "sweep", variant, point_idx, chunk_idx)
        values = _simulate_estimates(
            effect_chol, noise_chol, model.noise_cov, model.units_per_arm,
            model.num_folds, n, rules, psi, rng,
        )
    else:
        size_rng = substream(
            config.seed, "sweep-sizes", variant, point_idx, chunk_idx
        )
        sizes = size_rng.poisson(config.m0, size=n)
        while True:
            zero = sizes == 0
            n_zero = int(zero.sum())
            if n_zero == 0:
                break
            redraws += n_zero
            sizes[zero] = size_rng.poisson(config.m0, size=n_zero)
        values = {
            key: np.empty((n, 1)) for key in ("true", "naive", "cv")
        }
        for m in np.unique(sizes):
            rng = substream(
                config.seed, "sweep", variant, point_idx, chunk_idx, int(m)
            )
            idx = np.flatnonzero(sizes == m)
            got = _simulate_estimates(
                effect_chol, noise_chol, model.noise_cov, int(m),
                model.num_folds, len(idx), rules, psi, rng,
            )
            for key in values:
                values[key][idx] = got[key]

    reduced: dict[str, tuple[float, float]] = {}
    for key, arr in values.items():
        per_exp = arr[:, 0].reshape(chunk_reps, n_exps)
        per_rep = per_exp.sum(axis=1)
        if config.mode == "mean":
            per_rep = per_rep / n_exps
        reduced[key] = (float(per_rep.sum()), float((per_rep**2).sum()))
    return reduced, redraws


def run_bias_sweep(config: SimulationConfig, variant: str = "default") -> SimulationResult:
    """Monte Carlo estimates of true/naive/cv rewards over a sweep grid.

    At every grid point the configured estimators are averaged over
    ``num_replications`` independent replications of ``num_experiments``
    experiments; relative bias is reported against the closed-form truth
    where it exists.  Identical configs give bit-identical results at any
    parallelism degree.
    """
    if config.sweep is None:
        points: list[tuple[str | None, float]] = [(None, 0.0)]
    else:
        points = [(config.sweep.field, v) for v in config.sweep.grid]

    jobs = []
    point_models = []
    for point_idx, (sweep_field, value) in enumerate(points):
        model = _model_at(config.model, sweep_field, value)
        point_models.append(model)
        reps_left = config.num_replications
        chunk_idx = 0
        while reps_left > 0:
            chunk = min(CHUNK_REPLICATIONS, reps_left)
            jobs.append((config, variant, point_idx, chunk_idx, chunk, model))
            reps_left -= chunk
            chunk_idx += 1

    results = _ordered_parallel_map(_sweep_chunk, jobs)

    # Reduce in fixed (point, chunk) order regardless of execution order.
    acc: dict[int, dict[str, list[float]]] = {}
    redraws = 0
    for job, (reduced, job_redraws) in zip(jobs, results):
        point_idx = job[2]
        redraws += job_redraws
        slot = acc.setdefault(
            point_idx, {k: [0.0, 0.0] for k in ("true", "naive", "cv")}
        )
        for key, (s, s2) in reduced.items():
            slot[key][0] += s
            slot[key][1] += s2

    psi = np.array([1.0, 0.0])
    rows = []
    r = config.num_replications
    for point_idx, (sweep_field, value) in enumerate(points):
        model = point_models[point_idx]
        closed = _closed_forms(model, config.rule, psi)
        scale = model.num_experiments if config.mode == "cumulative" else 1
        truth = closed["true"] * scale if closed else None
        for estimator in ("true", "naive", "cv"):
            if estimator not in config.estimators:
                continue
            s, s2 = acc[point_idx][estimator]
            mean = s / r
            var = max(s2 / r - mean**2, 0.0) * (r / (r - 1)) if r > 1 else 0.0
            se = math.sqrt(var / r) if r > 1 else 0.0
            cf = closed[estimator] * scale if closed else None
            rel = (mean - truth) / truth if truth else None
            rows.append(
                SweepPointRow(
                    variant=variant,
                    sweep_field=sweep_field or "none",
                    sweep_value=float(value),
                    estimator=estimator,
                    mean=mean,
                    se=se,
                    closed_form=cf,
                    rel_bias=rel,
                    replications=r,
                    num_experiments=model.num_experiments,
                )
            )
    return SimulationResult(rows=tuple(rows), zero_size_redraws=redraws)


# ---------------------------------------------------------------------------
# Poisson rescaling identity check


@dataclass(frozen=True)
class RescalingCheckReport:
    """Outcome of the two-sided equality test between the rescaled
    leave-l-out estimator and the realized true reward of the rule."""

    m0: float
    leave_out: int
    replications: int
    rescaled_mean: float
    realized_mean: float
    difference: float
    se_combined: float
    passed: bool
    negative_control_difference: float | None = None
    negative_control_se: float | None = None
    negative_control_rejected: bool | None = None

    @property
    def overall_passed(self) -> bool:
        if self.negative_control_rejected is None:
            return self.passed
        return self.passed and self.negative_control_rejected


def _subset_reward_sums(
    x: np.ndarray,
    leave_out: int,
    rule_kind: str,
    constant_arm: int,
    fallback_arm: int,
) -> np.ndarray:
    """Raw leave-l-out fold-reward sums for a batch of equal-size experiments.

    ``x`` has shape (n, arms, m), reward = the single metric itself.
    Decisions on an emptied experiment fall back to ``fallback_arm`` so the
    estimator stays defined down to m == leave_out; constant rules ignore
    the data entirely.
    """
    n, n_arms, m = x.shape
    if leave_out not in (1, 2):
        raise ValueError("only leave_out in (1, 2) is supported here")
    if m < leave_out:
        return np.zeros(n)

    if rule_kind == "constant":
        decisions_value = x[:, constant_arm - 1, :]
        if leave_out == 1:
            return decisions_value.sum(axis=1)
        total = np.zeros(n)
        for j1 in range(m):
            for j2 in range(j1 + 1, m):
                total += 0.5 * (decisions_value[:, j1] + decisions_value[:, j2])
        return total
    if rule_kind != "argmax":
        raise ValueError(f"unknown rule kind {rule_kind!r}")

    if leave_out == 1:
        if m == 1:
            return x[:, fallback_arm - 1, 0]
        loo_means = (x.sum(axis=2, keepdims=True) - x) / (m - 1)
        chosen = np.argmax(loo_means, axis=1)
        picked = np.take_along_axis(x, chosen[:, None, :], axis=1)[:, 0, :]
        return picked.sum(axis=1)

    totals = np.zeros(n)
    sums = x.sum(axis=2)
    for j1 in range(m):
        for j2 in range(j1 + 1, m):
            fold_mean = 0.5 * (x[:, :, j1] + x[:, :, j2])
            if m == 2:
                chosen = np.full(n, fallback_arm - 1)
            else:
                rem = (sums - x[:, :, j1] - x[:, :, j2]) / (m - 2)
                chosen = np.argmax(rem, axis=1)
            totals += np.take_along_axis(fold_mean, chosen[:, None], axis=1)[:, 0]
    return totals


def check_poisson_rescaling(
    m0: float = 5.0,
    leave_out: int = 1,
    arm_means: tuple[float, ...] = (0.5, 0.6),
    rule_kind: str = "argmax",
    constant_arm: int = 1,
    replications: int = 1_000_000,
    seed: int = 0,
    fallback_arm: int = 1,
    negative_control: bool = True,
) -> RescalingCheckReport:
    """Empirical check that rescaled leave-l-out CV is unbiased under
    Poisson enrollment.

    Per-arm unit counts are drawn Poisson(m0); outcomes are Bernoulli with
    the given per-arm means.  One side is the mean of
    ``l!/m0**l * sum of fold rewards``; the other is the mean true reward
    of the arm the rule picks on the full data.  The check passes when the
    two means agree within four combined standard errors.  The negative
    control re-runs the comparison with the rescaling omitted and must be
    rejected by the same test.
    """
    if m0 <= 0:
        raise ValueError("m0 must be > 0")
    if replications < 2:
        raise ValueError("replications must be >= 2")
    means = np.asarray(arm_means, dtype=float)
    n_arms = len(means)
    if n_arms < 1:
        raise ValueError("need at least one arm")
    if not 1 <= fallback_arm <= n_arms:
        raise ValueError("fallback_arm out of range")
    if rule_kind == "constant" and not 1 <= constant_arm <= n_arms:
        raise ValueError("constant_arm out of range")

    size_rng = substream(seed, "rescaling-sizes", leave_out)
    sizes = size_rng.poisson(m0, size=replications)

    scale = math.factorial(leave_out) / m0**leave_out
    lhs_sum = lhs_sq = rhs_sum = rhs_sq = 0.0
    for m in sorted(np.unique(sizes)):
        idx_count = int((sizes == m).sum())
        if m == 0:
            rhs = np.full(idx_count, means[fallback_arm - 1])
            rhs_sum += float(rhs.sum())
            rhs_sq += float((rhs**2).sum())
            continue
        rng = substream(seed, "rescaling-data", leave_out, int(m))
        x = (rng.random((idx_count, n_arms, int(m))) < means[None, :, None]).astype(
            float
        )
        raw = _subset_reward_sums(x, leave_out, rule_kind, constant_arm, fallback_arm)
        lhs = raw * scale
        if rule_kind == "constant":
            chosen = np.full(idx_count, constant_arm - 1)
        else:
            chosen = np.argmax(x.mean(axis=2), axis=1)
        rhs = means[chosen]
        lhs_sum += float(lhs.sum())
        lhs_sq += float((lhs**2).sum())
        rhs_sum += float(rhs.sum())
        rhs_sq += float((rhs**2).sum())

    r = replications
    lhs_mean = lhs_sum / r
    rhs_mean = rhs_sum / r
    lhs_var = max(lhs_sq / r - lhs_mean**2, 0.0) * r / (r - 1)
    rhs_var = max(rhs_sq / r - rhs_mean**2, 0.0) * r / (r - 1)
    se = math.sqrt(lhs_var / r + rhs_var / r)
    diff = lhs_mean - rhs_mean
    passed = abs(diff) < 4.0 * se

    nc_diff = nc_se = nc_rejected = None
    if negative_control:
        # Same draws, scaling omitted: means and variances rescale exactly.
        nc_mean = lhs_mean / scale
        nc_var = lhs_var / scale**2
        nc_se = math.sqrt(nc_var / r + rhs_var / r)
        nc_diff = nc_mean - rhs_mean
        nc_rejected = not (abs(nc_diff) < 4.0 * nc_se)

    return RescalingCheckReport(
        m0=m0,
        leave_out=leave_out,
        replications=r,
        rescaled_mean=lhs_mean,
        realized_mean=rhs_mean,
        difference=diff,
        se_combined=se,
        passed=passed,
        negative_control_difference=nc_diff,
        negative_control_se=nc_se,
        negative_control_rejected=nc_rejected,
    )


# ---------------------------------------------------------------------------
# Rule-selection consistency check


@dataclass(frozen=True)
class SelectionCheckReport:
    """Empirical regret of CV-based rule selection as experiments accumulate."""

    n_grid: tuple[int, ...]
    regrets: tuple[float, ...]
    regret_ses: tuple[float, ...]
    accuracies: tuple[float, ...]
    true_rewards: dict[str, float]
    ratio_threshold: float
    passed: bool


def _factor_chol(
    sd_y: float, sd_proxy: float, corrs: tuple[float, ...]
) -> np.ndarray:
    """Lower Cholesky of a one-factor covariance: metric 0 drives each proxy
    through its correlation, residuals are independent."""
    j = 1 + len(corrs)
    chol = np.zeros((j, j))
    chol[0, 0] = sd_y
    for i, corr in enumerate(corrs, start=1):
        chol[i, 0] = corr * sd_proxy
        chol[i, i] = math.sqrt(max(1.0 - corr**2, 0.0)) * sd_proxy
    return chol


def joint_proxy_model(
    base: EffectModel, proxies: tuple[ProxySpec, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky factors of the joint (north star + proxies) model.

    Proxies share the base model's scale parameters and relate to the
    north star through their own correlations; cross-proxy covariance
    follows from the single shared factor.
    """
    effect_sd_y = float(np.sqrt(base.effect_cov[0, 0]))
    effect_sd_proxy = float(np.sqrt(base.effect_cov[1, 1]))
    noise_sd_y = float(np.sqrt(base.noise_cov[0, 0]))
    noise_sd_proxy = float(np.sqrt(base.noise_cov[1, 1]))
    effect_chol = _factor_chol(
        effect_sd_y, effect_sd_proxy, tuple(p.effect_corr for p in proxies)
    )
    noise_chol = _factor_chol(
        noise_sd_y, noise_sd_proxy, tuple(p.noise_corr for p in proxies)
    )
    return effect_chol, noise_chol


def bivariate_model_for_proxy(base: EffectModel, proxy: ProxySpec) -> EffectModel:
    """Two-metric marginal model (north star, one proxy) of the joint model."""
    return EffectModel.from_correlations(
        effect_sd_y=float(np.sqrt(base.effect_cov[0, 0])),
        effect_sd_proxy=float(np.sqrt(base.effect_cov[1, 1])),
        effect_corr=proxy.effect_corr,
        noise_sd_y=float(np.sqrt(base.noise_cov[0, 0])),
        noise_sd_proxy=float(np.sqrt(base.noise_cov[1, 1])),
        noise_corr=proxy.noise_corr,
        units_per_arm=base.units_per_arm,
        num_experiments=base.num_experiments,
        num_folds=base.num_folds,
    )


def _selection_chunk(args) -> tuple[float, float, int, int]:
    (base, proxies, n_exps, chunk_reps, seed, point_idx, chunk_idx, gammas) = args
    effect_chol, noise_chol = joint_proxy_model(base, proxies)
    n_metrics = 1 + len(proxies)
    noise_cov = noise_chol @ noise_chol.T
    psi = np.zeros(n_metrics)
    psi[0] = 1.0
    rules = tuple(
        SimRule(blend=np.eye(n_metrics)[1 + j]) for j in range(len(proxies))
    )
    rng = substream(seed, "selection", point_idx, chunk_idx)
    got = _simulate_estimates(
        effect_chol, noise_chol, noise_cov, base.units_per_arm, base.num_folds,
        chunk_reps * n_exps, rules, psi, rng,
    )
    cv = got["cv"].reshape(chunk_reps, n_exps, len(proxies)).sum(axis=1)
    picked = np.argmax(cv, axis=1)
    best = float(np.max(gammas))
    regrets = best - gammas[picked]
    correct = int((gammas[picked] == best).sum())
    return (
        float(regrets.sum()),
        float((regrets**2).sum()),
        correct,
        chunk_reps,
    )


def check_rule_selection(
    base: EffectModel = DEFAULT_MODEL,
    proxies: tuple[ProxySpec, ...] = DEFAULT_PROXIES,
    n_grid: tuple[int, ...] = (100, 200, 400),
    replications: int = 10_000,
    seed: int = 0,
    ratio_threshold: float = 0.7,
) -> SelectionCheckReport:
    """Empirical check that CV-based selection finds the best rule as the
    number of experiments grows.

    At each grid size N, the candidate with the highest cumulative CV
    estimate over N fresh experiments is selected; regret is the gap
    between the best closed-form expected reward and the selected rule's.
    Passes when regret is nonincreasing along the grid and every (N, 4N)
    pair in the grid satisfies regret(4N) <= threshold * regret(N).
    """
    if len(proxies) < 2:
        raise ValueError("need at least two candidate proxies")
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise ValueError("n_grid must be strictly increasing")
    gammas = np.array(
        [true_reward(bivariate_model_for_proxy(base, p)) for p in proxies]
    )

    jobs = []
    for point_idx, n_exps in enumerate(n_grid):
        reps_left = replications
        chunk_idx = 0
        while reps_left > 0:
            chunk = min(CHUNK_REPLICATIONS, reps_left)
            jobs.append(
                (base, proxies, int(n_exps), chunk, seed, point_idx, chunk_idx, gammas)
            )
            reps_left -= chunk
            chunk_idx += 1
    results = _ordered_parallel_map(_selection_chunk, jobs)

    sums = {i: [0.0, 0.0, 0, 0] for i in range(len(n_grid))}
    for job, (s, s2, correct, n) in zip(jobs, results):
        slot = sums[job[5]]
        slot[0] += s
        slot[1] += s2
        slot[2] += correct
        slot[3] += n

    regrets, ses, accuracies = [], [], []
    for i in range(len(n_grid)):
        s, s2, correct, r = sums[i]
        mean = s / r
        var = max(s2 / r - mean**2, 0.0) * (r / (r - 1)) if r > 1 else 0.0
        regrets.append(mean)
        ses.append(math.sqrt(var / r) if r > 1 else 0.0)
        accuracies.append(correct / r)

    nonincreasing = all(b <= a for a, b in zip(regrets, regrets[1:]))
    ratio_ok = True
    grid = [int(n) for n in n_grid]
    for i, n in enumerate(grid):
        if 4 * n in grid:
            j = grid.index(4 * n)
            if regrets[j] > ratio_threshold * regrets[i]:
                ratio_ok = False
    return SelectionCheckReport(
        n_grid=tuple(grid),
        regrets=tuple(regrets),
        regret_ses=tuple(ses),
        accuracies=tuple(accuracies),
        true_rewards={p.name: float(g) for p, g in zip(proxies, gammas)},
        ratio_threshold=ratio_threshold,
        passed=nonincreasing and ratio_ok,
    )
