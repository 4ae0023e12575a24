import logging

import numpy as np

from s2s_helper.correctors.training import (
    LeakageGuard,
    newest_selected,
    observation_cutoff,
    window_matrix,
)
from s2s_helper.errors import EmptyWindowError
from s2s_helper.grid_core import FieldSeries, as_date
from s2s_helper.pydantic_models.config_models import ClimppConfig, TaskSpec

logger = logging.getLogger(__name__)


def _constant_minimizer(values: np.ndarray, loss: str) -> np.ndarray:
    # the median minimizes the summed geographic RMSE per grid point, the mean the summed MSE
    if loss == "RMSE":
        return np.median(values, axis=0)
    return values.mean(axis=0)


class ClimatologyPlusPlus:
    """
    Historical geographic median (RMSE loss) or mean (MSE loss) of the observations
    within `span` days of year and `training_years` years of t*, observable at issuance.
    """

    name = "climpp"

    def __init__(self, task: TaskSpec, obs: FieldSeries, guard: LeakageGuard | None = None):
        self.task = task
        self.obs = obs
        self.guard = guard
        complete = obs.complete_rows()
        self._candidates = obs.ordinals[complete]
        self._values = obs.values[complete]

    def _window(self, cfg: ClimppConfig, targets: np.ndarray):
        return window_matrix(
            targets, self._candidates, cfg.span, cfg.years_limit,
            self.task.lead + self.task.period_length + 1,
        )

    def forecast_many(self, cfg: ClimppConfig, targets) -> np.ndarray:
        targets = np.asarray(targets, dtype=np.int64)
        window = self._window(cfg, targets)
        out = np.full((targets.size, self.obs.grid.size), np.nan)
        if cfg.loss == "MSE":
            n_selected = np.asarray(window.sum(axis=1)).reshape(-1)
            with np.errstate(invalid="ignore", divide="ignore"):
                out = (window @ self._values) / n_selected[:, None]
            out[n_selected == 0] = np.nan
        else:
            for row in range(targets.size):
                selected = window.indices[window.indptr[row]:window.indptr[row + 1]]
                if selected.size:
                    out[row] = _constant_minimizer(self._values[selected], cfg.loss)
        if self.guard is not None:
            newest = newest_selected(window, self._candidates)
            self.guard.record_observations(targets[newest >= 0], newest[newest >= 0])
        return out

    def forecast(self, cfg: ClimppConfig, t_star) -> np.ndarray:
        """
        Forecast for one target date. Raises EmptyWindowError when no training date qualifies.
        """
        t_star = as_date(t_star).toordinal()
        selected = self._window(cfg, np.asarray([t_star])).indices
        if selected.size == 0:
            raise EmptyWindowError(
                f"{cfg.label}: no observations within {cfg.span} days of year of {as_date(t_star)} "
                f"before {as_date(observation_cutoff(t_star, self.task.lead, self.task.period_length))}"
            )
        if self.guard is not None:
            self.guard.record_observations(t_star, self._candidates[selected])
        return _constant_minimizer(self._values[selected], cfg.loss)
