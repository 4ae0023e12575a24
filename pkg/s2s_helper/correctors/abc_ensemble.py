import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from s2s_helper import settings
from s2s_helper.correctors.climatology_pp import ClimatologyPlusPlus
from s2s_helper.correctors.dynamical_pp import DynamicalPlusPlus
from s2s_helper.correctors.persistence_pp import PerppCoefficients, PersistencePlusPlus
from s2s_helper.correctors.training import LeakageGuard
from s2s_helper.correctors.tuning import ProgressiveTuner
from s2s_helper.errors import MissingDataError
from s2s_helper.grid_core import Climatology, FieldSeries, ForecastArchive, as_date
from s2s_helper.metrics import EmpiricalDistribution, distributions
from s2s_helper.pydantic_models.artifact_models import TuningLedger
from s2s_helper.pydantic_models.config_models import (
    ClimppConfig,
    DynppConfig,
    TaskSpec,
    standard_climpp_grid,
    standard_dynpp_grid,
)

logger = logging.getLogger(__name__)


def abc_components(task: TaskSpec) -> tuple[str, ...]:
    # Climatology++ is left out of the weeks 1-2 ensemble
    if task.horizon == "12w":
        return ("dynpp", "perpp")
    return ("dynpp", "climpp", "perpp")


def abc_forecast(task: TaskSpec, components: Mapping[str, np.ndarray | None], strict: bool = True) -> np.ndarray:
    """
    Uniformly weighted mean of the component forecasts of the task.

    Args:
    task: TaskSpec
        Task of the component forecasts
    components: Mapping[str, np.ndarray | None]
        Forecasts keyed by "dynpp", "climpp" and "perpp", grid vectors or (dates, grid points) stacks
    strict: bool
        Raise MissingDataError for NaN component values instead of propagating them

    Returns:
    np.ndarray
        The ABC forecast, same shape as the components
    """
    names = abc_components(task)
    missing = [name for name in names if components.get(name) is None]
    if missing:
        raise MissingDataError(f"ABC components missing for {task.name}: {missing}", missing)
    stack = np.stack([np.asarray(components[name], dtype=np.float64) for name in names])
    if strict:
        incomplete = [name for name, values in zip(names, stack) if not np.isfinite(values).all()]
        if incomplete:
            raise MissingDataError(f"ABC components unavailable for {task.name}: {incomplete}", incomplete)
    return stack.mean(axis=0)


def _clip(values: np.ndarray, variable: str) -> np.ndarray:
    if variable == "precip":
        return np.maximum(values, 0.0)
    return values


def pooled_members(
    members: np.ndarray,
    dynpp_out: np.ndarray,
    perpp_out: np.ndarray,
    climpp_out: np.ndarray | None,
    ensemble_mean: np.ndarray | None = None,
    variable: str = "tmp2m",
) -> np.ndarray:
    """
    Dynamical++-corrected members, Persistence++-corrected members and the Climatology++ forecast,
    shape (2n + 1, grid points), or (2n, grid points) without Climatology++. Precipitation is clipped at 0.
    """
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if ensemble_mean is None:
        ensemble_mean = members.mean(axis=0)
    perturbation = members - ensemble_mean
    parts = [perturbation + dynpp_out, perturbation + perpp_out]
    if climpp_out is not None:
        parts.append(np.atleast_2d(np.asarray(climpp_out, dtype=np.float64)))
    return _clip(np.vstack(parts), variable)


def abc_probabilistic(
    members: np.ndarray,
    dynpp_out: np.ndarray,
    perpp_out: np.ndarray,
    climpp_out: np.ndarray | None,
    ensemble_mean: np.ndarray | None = None,
    variable: str = "tmp2m",
) -> list[EmpiricalDistribution]:
    return distributions(pooled_members(members, dynpp_out, perpp_out, climpp_out, ensemble_mean, variable))


def corrected_members(
    members: np.ndarray,
    deterministic_out: np.ndarray,
    ensemble_mean: np.ndarray | None = None,
    variable: str = "tmp2m",
) -> np.ndarray:
    """
    Raw members shifted by the correction deterministic_out - ensemble_mean of a baseline, shape (n, grid points).
    """
    members = np.atleast_2d(np.asarray(members, dtype=np.float64))
    if ensemble_mean is None:
        ensemble_mean = members.mean(axis=0)
    return _clip(members - ensemble_mean + deterministic_out, variable)


def baseline_probabilistic(
    members: np.ndarray,
    deterministic_out: np.ndarray,
    ensemble_mean: np.ndarray | None = None,
    variable: str = "tmp2m",
) -> list[EmpiricalDistribution]:
    return distributions(corrected_members(members, deterministic_out, ensemble_mean, variable))


def raw_member_stack(archive: ForecastArchive, task: TaskSpec, targets: np.ndarray) -> np.ndarray:
    """
    Members issued at t* - l* with lead l* for every target, shape (targets, member slots, grid points);
    absent members are NaN.
    """
    targets = np.asarray(targets, dtype=np.int64)
    out = np.full((targets.size, archive.members.size, archive.grid.size), np.nan)
    if not archive.has_lead(task.lead) or archive.issuances.size == 0:
        return out
    issuances = targets - task.lead
    idx = np.clip(np.searchsorted(archive.issuances, issuances), 0, archive.issuances.size - 1)
    found = archive.issuances[idx] == issuances
    out[found] = archive.values[idx[found], archive.lead_index(task.lead)]
    return out


def _member_means(stack: np.ndarray) -> np.ndarray:
    present = np.isfinite(stack)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(present, stack, 0.0).sum(axis=1) / present.sum(axis=1)


def pooled_member_stack(
    archive: ForecastArchive,
    task: TaskSpec,
    targets: np.ndarray,
    components: Mapping[str, np.ndarray],
) -> np.ndarray:
    """
    Pooled probabilistic ABC members for many targets, shape (targets, 2M + 1, grid points)
    with M the archive's member slots. Absent members stay NaN.
    """
    raw = raw_member_stack(archive, task, targets)
    perturbation = raw - _member_means(raw)[:, None]
    parts = [perturbation + components["dynpp"][:, None], perturbation + components["perpp"][:, None]]
    if "climpp" in abc_components(task):
        parts.append(components["climpp"][:, None])
    return _clip(np.concatenate(parts, axis=1), task.variable)


def corrected_member_stack(
    archive: ForecastArchive, task: TaskSpec, targets: np.ndarray, deterministic: np.ndarray
) -> np.ndarray:
    raw = raw_member_stack(archive, task, targets)
    return _clip(raw - _member_means(raw)[:, None] + deterministic[:, None], task.variable)


@dataclass
class AbcResult:
    targets: np.ndarray
    forecasts: np.ndarray
    components: dict[str, np.ndarray]
    ledgers: list[TuningLedger] = field(default_factory=list)
    perpp_fit: PerppCoefficients | None = None

    @property
    def complete(self) -> np.ndarray:
        return np.isfinite(self.forecasts).all(axis=1)


class AdaptiveBiasCorrection:
    """
    Runs Dynamical++ and Climatology++ through the progressive tuner and Persistence++ with
    one refit per target, then averages the components with equal weights.
    """

    name = "abc"

    def __init__(
        self,
        task: TaskSpec,
        archive: ForecastArchive,
        obs: FieldSeries,
        clim: Climatology,
        dynpp_grid: list[DynppConfig] | None = None,
        climpp_grid: list[ClimppConfig] | None = None,
        window_years: int = settings.TUNING_WINDOW_YEARS,
        guard: LeakageGuard | None = None,
        jobs: int = 1,
    ):
        self.task = task
        self.archive = archive
        self.obs = obs
        self.dynpp_grid = dynpp_grid or standard_dynpp_grid(task)
        self.climpp_grid = climpp_grid or standard_climpp_grid(task)
        self.window_years = window_years
        self.jobs = jobs
        self.dynpp = DynamicalPlusPlus(task, archive, obs, guard)
        self.climpp = ClimatologyPlusPlus(task, obs, guard)
        self.perpp = PersistencePlusPlus(task, archive, obs, clim, guard, jobs)
        self.guard = guard

    def tuner(self, model: str) -> ProgressiveTuner:
        if model == "dynpp":
            corrector, grid = self.dynpp, self.dynpp_grid
        else:
            corrector, grid = self.climpp, self.climpp_grid
        return ProgressiveTuner(model, corrector, grid, self.task, self.obs, self.window_years, self.guard, self.jobs)

    def run(self, targets) -> AbcResult:
        targets = np.asarray(targets, dtype=np.int64)
        components: dict[str, np.ndarray] = {}
        ledgers = []
        for model in abc_components(self.task):
            if model == "perpp":
                components[model] = self.perpp.forecast_many(targets)
                continue
            tuned = self.tuner(model).run(targets)
            components[model] = tuned.forecasts
            ledgers.append(tuned.ledger)
        forecasts = abc_forecast(self.task, components, strict=False)
        n_complete = int(np.isfinite(forecasts).all(axis=1).sum())
        logger.info(f"ABC produced {n_complete} of {targets.size} forecasts for {self.task.name}")
        return AbcResult(targets, forecasts, components, ledgers, self.perpp.last_fit)

    def forecast(self, t_star) -> np.ndarray:
        """
        ABC forecast for one target date. Raises MissingDataError when a component is unavailable.
        """
        t_star = as_date(t_star).toordinal()
        result = self.run(np.asarray([t_star]))
        return abc_forecast(self.task, {name: values[0] for name, values in result.components.items()})
