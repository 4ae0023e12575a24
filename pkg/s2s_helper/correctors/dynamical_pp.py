import logging

import numpy as np

from s2s_helper import settings
from s2s_helper.correctors.training import (
    LeakageGuard,
    newest_selected,
    observation_cutoff,
    window_matrix,
)
from s2s_helper.errors import EmptyWindowError, MissingDataError
from s2s_helper.grid_core import FieldSeries, ForecastArchive, as_date
from s2s_helper.pydantic_models.config_models import DynppConfig, TaskSpec

logger = logging.getLogger(__name__)


class DynamicalPlusPlus:
    """
    Debiases an ensemble of dynamical forecasts averaged over issuance dates and leads.

    For a target date t the ensembled forecast is the mean over the available cells
    d in [1, d*], l in the lead set of the ensemble mean issued at t - l* - d + 1 with lead l.
    The forecast for t* adds to it the mean of y_t - ensembled_t over the training dates
    within `span` days of year and `training_years` years of t*, observable at issuance.
    """

    name = "dynpp"

    def __init__(
        self,
        task: TaskSpec,
        archive: ForecastArchive,
        obs: FieldSeries,
        guard: LeakageGuard | None = None,
    ):
        self.task = task
        self.archive = archive
        self.obs = obs
        self.guard = guard
        self._residuals: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}
        self._windows: dict[tuple, object] = {}

    def ensemble_forecast(self, cfg: DynppConfig, dates) -> np.ndarray:
        """
        Ensembled forecasts for target dates (ordinals), shape (dates, grid points); NaN without any cell.
        """
        dates = np.asarray(dates, dtype=np.int64)
        grid_size = self.archive.grid.size
        if dates.size == 0:
            return np.zeros((0, grid_size))
        newest = dates - self.task.lead
        oldest = newest - cfg.issuance_count + 1
        start, stop = int(oldest.min()), int(newest.max()) + 1
        total = np.zeros((dates.size, grid_size))
        count = np.zeros((dates.size, grid_size))
        for lead in cfg.leads:
            if not self.archive.has_lead(lead):
                continue
            if cfg.issuance_count == 1:
                means = self.archive.ensemble_mean_at(newest, lead)
                present = np.isfinite(means)
                total += np.where(present, means, 0.0)
                count += present
                continue
            daily = self.archive.daily_ensemble_mean(lead, start, stop)
            present = np.isfinite(daily)
            sums = np.vstack([np.zeros((1, grid_size)), np.cumsum(np.where(present, daily, 0.0), axis=0)])
            counts = np.vstack([np.zeros((1, grid_size)), np.cumsum(present, axis=0)])
            lo, hi = oldest - start, newest - start + 1
            total += sums[hi] - sums[lo]
            count += counts[hi] - counts[lo]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(count > 0, total / np.maximum(count, 1), np.nan)

    def _residual_series(self, cfg: DynppConfig) -> tuple[np.ndarray, np.ndarray]:
        """
        Candidate training dates (complete observation and ensembled forecast) and their residuals y - ensembled.
        """
        key = (cfg.issuance_count, cfg.leads)
        if key not in self._residuals:
            fbar = self.ensemble_forecast(cfg, self.obs.ordinals)
            usable = self.obs.complete_rows() & np.isfinite(fbar).all(axis=1)
            self._residuals[key] = (self.obs.ordinals[usable], self.obs.values[usable] - fbar[usable])
        return self._residuals[key]

    def _window(self, cfg: DynppConfig, targets: np.ndarray, candidates: np.ndarray):
        key = (cfg.span, cfg.training_years, candidates.tobytes(), targets.tobytes())
        window = self._windows.get(key)
        if window is None:
            window = window_matrix(
                targets, candidates, cfg.span, cfg.training_years,
                self.task.lead + self.task.period_length + 1,
            )
            if len(self._windows) > 8:
                self._windows.clear()
            self._windows[key] = window
        return window

    def forecast_many(self, cfg: DynppConfig, targets) -> np.ndarray:
        """
        Forecasts for many target dates (ordinals); rows are NaN where the training window is empty
        or no ensemble cell exists at the target.
        """
        targets = np.asarray(targets, dtype=np.int64)
        candidates, residuals = self._residual_series(cfg)
        window = self._window(cfg, targets, candidates)
        n_selected = np.asarray(window.sum(axis=1)).reshape(-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            offsets = (window @ residuals) / n_selected[:, None]
        offsets[n_selected == 0] = np.nan
        if self.guard is not None:
            selected = n_selected > 0
            self.guard.record_observations(targets[selected], newest_selected(window, candidates)[selected])
            self.guard.record_issuances(targets, targets - self.task.lead)
        return self.ensemble_forecast(cfg, targets) + offsets

    def forecast(self, cfg: DynppConfig, t_star) -> np.ndarray:
        """
        Forecast for one target date. Raises EmptyWindowError for an empty training window
        and MissingDataError when no ensemble cell exists for t*.
        """
        t_star = as_date(t_star).toordinal()
        fbar = self.ensemble_forecast(cfg, np.asarray([t_star]))[0]
        if not np.isfinite(fbar).all():
            missing = [
                (as_date(t_star - self.task.lead - d + 1), lead)
                for d in range(1, cfg.issuance_count + 1)
                for lead in cfg.leads
            ]
            raise MissingDataError(
                f"no ensemble forecasts for {as_date(t_star)}; missing (issuance, lead) keys: {missing[:10]}",
                missing,
            )
        candidates, residuals = self._residual_series(cfg)
        window = window_matrix(
            np.asarray([t_star]), candidates, cfg.span, cfg.training_years,
            self.task.lead + self.task.period_length + 1,
        )
        selected = window.indices
        if selected.size == 0:
            raise EmptyWindowError(
                f"{cfg.label}: no training dates within {cfg.span} days of year of {as_date(t_star)} "
                f"before {as_date(observation_cutoff(t_star, self.task.lead, self.task.period_length))}"
            )
        if self.guard is not None:
            self.guard.record_observations(t_star, candidates[selected])
            self.guard.record_issuances(t_star, t_star - self.task.lead)
        logger.debug(f"{cfg.label}: {selected.size} training dates for {as_date(t_star)}")
        return fbar + residuals[selected].mean(axis=0)

    def default_config(self) -> DynppConfig:
        return DynppConfig(span=max(settings.DYNPP_SPANS), issuance_count=1, leads=(self.task.lead,))
