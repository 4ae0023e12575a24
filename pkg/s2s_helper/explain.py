import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import comb

from s2s_helper import settings
from s2s_helper.errors import DomainError, EmptyWindowError
from s2s_helper.grid_core import as_date, to_ordinals
from s2s_helper.metrics import bootstrap_ci
from s2s_helper.pydantic_models.artifact_models import BinImpact, ExplanationReport
from s2s_helper.pydantic_models.config_models import TaskSpec, VariableSpec
from s2s_helper.seeding import derive_seed

logger = logging.getLogger(__name__)


def explanatory_lags(variables: Sequence[str], task: TaskSpec, manifest: Mapping[str, VariableSpec] | None = None) -> dict[str, int]:
    """
    Days before the target date at which each variable is observable at issuance. Manifest lags win;
    otherwise MEI-like indices use the longer default lag.
    """
    lags = {}
    for name in variables:
        spec = (manifest or {}).get(name)
        if spec is not None and spec.lag_days is not None:
            lags[name] = spec.lag_days
            continue
        family = "mei" if name.lower().startswith("mei") else "default"
        lags[name] = settings.EXPLANATORY_LAGS[family][task.horizon]
    return lags


def lag_explanatory(table: pd.DataFrame, lags: Mapping[str, int], dates=None) -> pd.DataFrame:
    """
    Value of every variable for each subject date t read at t - lag. Rows are the subject dates
    (default: the table's own dates); unavailable values are NaN.
    """
    index = pd.DatetimeIndex(table.index if dates is None else pd.to_datetime(list(dates)))
    lagged = {}
    for name in table.columns:
        column = table[name].copy()
        column.index = pd.DatetimeIndex(table.index) + pd.Timedelta(days=int(lags.get(name, 0)))
        lagged[name] = column.reindex(index)
    return pd.DataFrame(lagged, index=index)


class Binner:
    """
    Decile bins learned on the evaluation subjects for continuous variables (left-closed, boundaries from
    the linear quantile convention) and one bin per category for categorical variables.
    Bin ids are dense integers; transform applies the learned boundaries to new dates.
    """

    def __init__(self, kinds: Mapping[str, str], n_bins: int = settings.DECILE_BINS):
        self.kinds = dict(kinds)
        self.n_bins = n_bins
        self.edges_: dict[str, np.ndarray] = {}
        self.seen_: dict[str, np.ndarray] = {}
        self.minimum_: dict[str, float] = {}
        self.categories_: dict[str, np.ndarray] = {}

    def _raw_ids(self, name: str, values: np.ndarray) -> np.ndarray:
        return np.searchsorted(self.edges_[name], values, side="right")

    def fit(self, raw: pd.DataFrame) -> "Binner":
        for name in raw.columns:
            values = raw[name].to_numpy(dtype=np.float64)
            if self.kinds.get(name, "continuous") == "categorical":
                self.categories_[name] = np.unique(values)
                continue
            if values.size < self.n_bins:
                raise DomainError(f"decile binning of {name} needs at least {self.n_bins} subjects, got {values.size}")
            self.edges_[name] = np.quantile(values, np.arange(1, self.n_bins) / self.n_bins)
            self.seen_[name] = np.unique(self._raw_ids(name, values))
            self.minimum_[name] = float(values.min())
            if self.seen_[name].size == 1:
                logger.warning(f"Explanatory variable {name} is constant on the evaluation period, using a single bin")
        return self

    def transform(self, raw: pd.DataFrame) -> np.ndarray:
        bins = np.zeros((len(raw), len(raw.columns)), dtype=np.int64)
        for j, name in enumerate(raw.columns):
            values = raw[name].to_numpy(dtype=np.float64)
            if name in self.categories_:
                categories = self.categories_[name]
                idx = np.clip(np.searchsorted(categories, values), 0, categories.size - 1)
                known = categories[idx] == values
                if not known.all():
                    logger.warning(f"{int((~known).sum())} values of {name} fall in no learned category")
                bins[:, j] = np.where(known, idx, -1)
            else:
                seen = self.seen_[name]
                raw_ids = self._raw_ids(name, values)
                bins[:, j] = np.clip(np.searchsorted(seen, raw_ids, side="right") - 1, 0, seen.size - 1)
        return bins

    def fit_transform(self, raw: pd.DataFrame) -> np.ndarray:
        return self.fit(raw).transform(raw)

    def n_bins_of(self, name: str) -> int:
        if name in self.categories_:
            return self.categories_[name].size
        return self.seen_[name].size

    def lower_edge(self, name: str, bin_id: int) -> float | None:
        if name not in self.seen_:
            return None
        raw_id = int(self.seen_[name][bin_id])
        return self.minimum_[name] if raw_id == 0 else float(self.edges_[name][raw_id - 1])

    def category(self, name: str, bin_id: int) -> float | None:
        if name not in self.categories_:
            return None
        return float(self.categories_[name][bin_id])


def bin_variables(raw: pd.DataFrame, kinds: Mapping[str, str]) -> tuple[np.ndarray, Binner]:
    binner = Binner(kinds)
    return binner.fit_transform(raw), binner


@dataclass(frozen=True, eq=False)
class ExplanationTable:
    """
    One subject per forecast date: the outcome, and per variable the raw value and the bin id.
    """

    dates: np.ndarray
    outcome: np.ndarray
    variables: tuple[str, ...]
    raw: np.ndarray
    bins: np.ndarray
    binner: Binner | None = None

    @property
    def n_subjects(self) -> int:
        return self.outcome.size

    @classmethod
    def build(cls, dates, outcome, raw: pd.DataFrame, kinds: Mapping[str, str]) -> "ExplanationTable":
        bins, binner = bin_variables(raw, kinds)
        return cls(
            to_ordinals(dates),
            np.asarray(outcome, dtype=np.float64),
            tuple(raw.columns),
            raw.to_numpy(dtype=np.float64),
            bins,
            binner,
        )


def _subset_weights(n_variables: int) -> np.ndarray:
    # weight of a subset of size s that excludes the variable being credited
    return np.asarray([1.0 / (n_variables * comb(n_variables - 1, s)) for s in range(n_variables)])


def _compress(keys: np.ndarray, column: np.ndarray) -> tuple[np.ndarray, int]:
    combined = keys * (int(column.max()) + 2) + (column + 1)
    _, inverse = np.unique(combined, return_inverse=True)
    return inverse.reshape(-1), int(inverse.max()) + 1


def _cohort_values(keys: np.ndarray, n_keys: int, outcome: np.ndarray) -> np.ndarray:
    sums = np.bincount(keys, weights=outcome, minlength=n_keys)
    counts = np.bincount(keys, minlength=n_keys)
    return (sums / counts)[keys]


def _accumulate_subtree(bins: np.ndarray, outcome: np.ndarray, weights: np.ndarray, first: int) -> np.ndarray:
    """
    Contributions of every subset whose smallest variable is `first`.
    """
    n_subjects, n_variables = bins.shape
    phi = np.zeros((n_subjects, n_variables))
    stack = [(first + 1, np.asarray([first]), *_compress(np.zeros(n_subjects, dtype=np.int64), bins[:, first]))]
    while stack:
        following, members, keys, n_keys = stack.pop()
        values = _cohort_values(keys, n_keys, outcome)
        size = members.size
        inside = np.zeros(n_variables, dtype=bool)
        inside[members] = True
        phi[:, inside] += weights[size - 1] * values[:, None]
        if size < n_variables:
            phi[:, ~inside] -= weights[size] * values[:, None]
        for j in range(following, n_variables):
            stack.append((j + 1, np.append(members, j), *_compress(keys, bins[:, j])))
    return phi


@dataclass(frozen=True, eq=False)
class ShapleyResult:
    """
    Cohort Shapley values phi (subjects, variables).
    """

    variables: tuple[str, ...]
    values: np.ndarray

    def subject(self, i: int) -> np.ndarray:
        return self.values[i]

    def to_frame(self, dates: np.ndarray) -> pd.DataFrame:
        frame = pd.DataFrame(self.values, columns=list(self.variables))
        frame.insert(0, "date", [as_date(int(d)).isoformat() for d in dates])
        return frame


def cohort_shapley_values(bins: np.ndarray, outcome: np.ndarray, jobs: int = 1) -> np.ndarray:
    """
    Exact cohort Shapley values of every subject by enumeration of all variable subsets.

    The value of a subset S for subject i is the mean outcome over the subjects sharing i's bin
    on every variable of S (the grand mean for the empty set).
    """
    bins = np.asarray(bins, dtype=np.int64)
    outcome = np.asarray(outcome, dtype=np.float64)
    n_subjects, n_variables = bins.shape
    if n_variables > settings.MAX_SHAPLEY_VARIABLES:
        raise DomainError(
            f"exact cohort Shapley enumerates 2^V subsets; {n_variables} variables exceed the limit of "
            f"{settings.MAX_SHAPLEY_VARIABLES}, select a subset of the variables"
        )
    if n_subjects == 0:
        raise EmptyWindowError("cohort Shapley needs at least one subject")
    weights = _subset_weights(n_variables)
    # the empty set is left out of every variable's credit
    phi = -weights[0] * np.full((n_subjects, n_variables), outcome.mean())
    parts = Parallel(n_jobs=jobs, prefer="threads")(
        delayed(_accumulate_subtree)(bins, outcome, weights, first) for first in range(n_variables)
    )
    for part in parts:
        phi += part
    return phi


def cohort_shapley(table: ExplanationTable, subject: int | None = None, jobs: int = 1):
    """
    Cohort Shapley values of one subject (vector over variables) or of all subjects (ShapleyResult).
    """
    values = cohort_shapley_values(table.bins, table.outcome, jobs)
    if subject is not None:
        return values[subject]
    return ShapleyResult(table.variables, values)


def shapley_effects(result: ShapleyResult) -> tuple[dict[str, float], dict[str, float]]:
    """
    Per-variable mean squared Shapley value, raw and normalized to sum to 1.
    """
    effects = (result.values**2).mean(axis=0)
    total = effects.sum()
    normalized = effects / total if total > 0 else np.zeros_like(effects)
    return (
        {name: float(v) for name, v in zip(result.variables, effects)},
        {name: float(v) for name, v in zip(result.variables, normalized)},
    )


@dataclass
class ImpactSummary:
    bins: list[BinImpact]
    high_bins: dict[str, set[int]] = field(default_factory=dict)

    def for_variable(self, name: str) -> list[BinImpact]:
        return [b for b in self.bins if b.variable == name]


def _flags(probabilities: np.ndarray, lows: np.ndarray, highs: np.ndarray) -> list[str]:
    if probabilities.size == 1:
        return ["intermediate"]
    top = int(np.argmax(probabilities))
    bottom = int(np.argmin(probabilities))
    flags = []
    for p in probabilities:
        if lows[top] <= p <= highs[top]:
            flags.append("high")
        elif lows[bottom] <= p <= highs[bottom]:
            flags.append("low")
        else:
            flags.append("intermediate")
    return flags


def impact_probabilities(
    result: ShapleyResult,
    table: ExplanationTable,
    level: float = settings.CONFIDENCE_LEVEL,
    resamples: int = settings.BOOTSTRAP_RESAMPLES,
    seed: int = 0,
) -> ImpactSummary:
    """
    Per (variable, bin): fraction of subjects with a strictly positive Shapley value, its bootstrap
    interval over the bin's subjects, and the high/low/intermediate flag.
    """
    bins_out: list[BinImpact] = []
    high_bins: dict[str, set[int]] = {}
    for j, name in enumerate(result.variables):
        column = table.bins[:, j]
        n_bins = table.binner.n_bins_of(name) if table.binner is not None else int(column.max()) + 1
        ids, probabilities, lows, highs, sizes = [], [], [], [], []
        for b in range(n_bins):
            rows = column == b
            if not rows.any():
                logger.warning(f"Bin {b} of {name} holds no subject and is left out")
                continue
            positive = (result.values[rows, j] > 0).astype(np.float64)
            lo, hi = bootstrap_ci(positive, level, resamples, derive_seed(seed, "impact", name, b))
            ids.append(b)
            probabilities.append(float(positive.mean()))
            lows.append(lo)
            highs.append(hi)
            sizes.append(int(rows.sum()))
        if not ids:
            continue
        flags = _flags(np.asarray(probabilities), np.asarray(lows), np.asarray(highs))
        high_bins[name] = {b for b, flag in zip(ids, flags) if flag == "high"}
        for b, p, lo, hi, n, flag in zip(ids, probabilities, lows, highs, sizes, flags):
            bins_out.append(
                BinImpact(
                    variable=name, bin=b, n=n, probability=p, ci_low=lo, ci_high=hi, flag=flag,
                    lower_edge=table.binner.lower_edge(name, b) if table.binner is not None else None,
                    category=table.binner.category(name, b) if table.binner is not None else None,
                )
            )
    return ImpactSummary(bins_out, high_bins)


def high_impact_counts(summary: ImpactSummary, variables: Sequence[str], bins: np.ndarray) -> np.ndarray:
    """
    Number of variables whose bin is flagged high, per subject.
    """
    bins = np.asarray(bins, dtype=np.int64)
    counts = np.zeros(bins.shape[0], dtype=np.int64)
    for j, name in enumerate(variables):
        high = np.asarray(sorted(summary.high_bins.get(name, set())), dtype=np.int64)
        counts += np.isin(bins[:, j], high)
    return counts


def opportunistic_select(counts, k: int) -> np.ndarray:
    """
    "abc" where at least k variables sit in high-impact bins, otherwise "baseline".
    """
    return np.where(np.asarray(counts) >= k, "abc", "baseline")


def opportunistic_curve(abc_skill, baseline_skill, counts, n_variables: int) -> pd.Series:
    """
    Mean per-date skill of the opportunistic blend for every k in 0..V+1.
    """
    abc_skill = np.asarray(abc_skill, dtype=np.float64)
    baseline_skill = np.asarray(baseline_skill, dtype=np.float64)
    counts = np.asarray(counts)
    curve = {}
    for k in range(n_variables + 2):
        blended = np.where(counts >= k, abc_skill, baseline_skill)
        curve[k] = float(np.nanmean(blended)) if np.isfinite(blended).any() else float("nan")
    return pd.Series(curve, name="blended_skill").rename_axis("k")


def choose_k_star(abc_skill, baseline_skill, counts, n_variables: int) -> tuple[int, pd.Series]:
    """
    k maximizing the blended mean skill over 0..V+1; ties go to the smallest k.
    """
    curve = opportunistic_curve(abc_skill, baseline_skill, counts, n_variables)
    if curve.isna().all():
        raise EmptyWindowError("no date has a defined skill for the opportunistic blend")
    return int(curve.idxmax()), curve


def most_impacted_forecast(result: ShapleyResult, table: ExplanationTable, variable: str, high_bins: set[int]) -> date | None:
    """
    Date of the subject in the high bins of `variable` with the largest Shapley value; ties go to the earliest date.
    """
    j = result.variables.index(variable)
    candidates = np.flatnonzero(np.isin(table.bins[:, j], sorted(high_bins)))
    if candidates.size == 0:
        return None
    order = candidates[np.argsort(table.dates[candidates], kind="stable")]
    best = order[int(np.argmax(result.values[order, j]))]
    return as_date(int(table.dates[best]))


@dataclass
class OpportunisticResult:
    report: ExplanationReport
    shapley: pd.DataFrame
    choices: pd.DataFrame
    curve: pd.Series


def run_opportunistic_workflow(
    task: TaskSpec,
    abc_skill: pd.Series,
    baseline_skill: pd.Series,
    explanatory: pd.DataFrame,
    kinds: Mapping[str, str],
    evaluation_start=None,
    evaluation_end=None,
    level: float = settings.CONFIDENCE_LEVEL,
    resamples: int = settings.BOOTSTRAP_RESAMPLES,
    seed: int = 0,
    jobs: int = 1,
) -> OpportunisticResult:
    """
    Explain the per-date skill difference of ABC over a baseline with issuance-time explanatory variables,
    flag high-impact bins, pick k* on the evaluation period and apply the choice to later dates.

    Args:
    abc_skill, baseline_skill: pd.Series
        Per-date skills indexed by date
    explanatory: pd.DataFrame
        Lagged explanatory values indexed by subject date
    kinds: Mapping[str, str]
        "continuous" or "categorical" per variable
    evaluation_start, evaluation_end:
        Evaluation period (inclusive); defaults to every date with both skills
    """
    abc_skill = abc_skill.copy()
    baseline_skill = baseline_skill.copy()
    abc_skill.index = pd.DatetimeIndex(pd.to_datetime(list(abc_skill.index)))
    baseline_skill.index = pd.DatetimeIndex(pd.to_datetime(list(baseline_skill.index)))
    explanatory = explanatory.copy()
    explanatory.index = pd.DatetimeIndex(explanatory.index)

    frame = pd.concat({"abc": abc_skill, "baseline": baseline_skill}, axis=1).join(explanatory, how="inner")
    frame = frame.dropna(subset=list(explanatory.columns))
    start = pd.Timestamp(evaluation_start) if evaluation_start is not None else frame.index.min()
    end = pd.Timestamp(evaluation_end) if evaluation_end is not None else frame.index.max()
    in_period = (frame.index >= start) & (frame.index <= end)
    evaluation = frame[in_period].dropna(subset=["abc", "baseline"])
    if evaluation.empty:
        raise EmptyWindowError(f"no evaluation subjects between {start.date()} and {end.date()}")
    dropped = int(in_period.sum()) - len(evaluation)
    if dropped:
        logger.warning(f"{dropped} evaluation dates without both skills are left out")
    logger.info(f"Explaining {len(evaluation)} subjects with {len(explanatory.columns)} explanatory variables")

    raw = evaluation[list(explanatory.columns)]
    table = ExplanationTable.build(
        evaluation.index.date, (evaluation["abc"] - evaluation["baseline"]).to_numpy(), raw, kinds
    )
    result = cohort_shapley(table, jobs=jobs)
    effects, normalized = shapley_effects(result)
    summary = impact_probabilities(result, table, level, resamples, seed)
    counts = high_impact_counts(summary, table.variables, table.bins)
    k_star, curve = choose_k_star(evaluation["abc"], evaluation["baseline"], counts, len(table.variables))

    deployment = frame[frame.index > end]
    deployment_counts = high_impact_counts(
        summary, table.variables, table.binner.transform(deployment[list(explanatory.columns)])
    ) if len(deployment) else np.zeros(0, dtype=np.int64)
    choices = pd.DataFrame(
        {
            "date": [d.date().isoformat() for d in evaluation.index] + [d.date().isoformat() for d in deployment.index],
            "period": ["evaluation"] * len(evaluation) + ["deployment"] * len(deployment),
            "high_impact_count": np.concatenate([counts, deployment_counts]),
            "choice": np.concatenate(
                [opportunistic_select(counts, k_star), opportunistic_select(deployment_counts, k_star)]
            ),
        }
    )

    report = ExplanationReport(
        task=task,
        variables=list(table.variables),
        n_subjects=table.n_subjects,
        evaluation_start=evaluation.index.min().date(),
        evaluation_end=evaluation.index.max().date(),
        effects=effects,
        normalized_effects=normalized,
        bins=summary.bins,
        k_star=k_star,
        blended_skill=float(curve[k_star]),
        abc_skill=float(evaluation["abc"].mean()),
        baseline_skill=float(evaluation["baseline"].mean()),
        curve={int(k): float(v) for k, v in curve.items()},
        most_impacted={
            name: most_impacted_forecast(result, table, name, summary.high_bins.get(name, set()))
            for name in table.variables
        },
        deployment_dates=len(deployment),
    )
    logger.info(f"Opportunistic ABC deploys at k* = {k_star} with blended skill {report.blended_skill:.4f}")
    return OpportunisticResult(report, result.to_frame(table.dates), choices, curve)
