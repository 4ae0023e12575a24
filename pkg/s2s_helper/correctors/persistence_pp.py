import logging
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed

from s2s_helper import settings
from s2s_helper.correctors.training import LeakageGuard, observation_cutoff
from s2s_helper.errors import EmptyWindowError, MissingDataError
from s2s_helper.grid_core import Climatology, FieldSeries, ForecastArchive, as_date
from s2s_helper.pydantic_models.artifact_models import PerppCoefficientsRecord
from s2s_helper.pydantic_models.config_models import TaskSpec

logger = logging.getLogger(__name__)

REGRESSORS = ("intercept", "climatology", "lag1_obs", "lag2_obs", "ensemble_forecast")
MIN_ROWS = len(REGRESSORS)


def least_squares(design: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, int]:
    """
    Minimum-norm least-squares coefficients and the numerical rank of the design.
    """
    beta, _, rank, _ = np.linalg.lstsq(design, target, rcond=None)
    return beta, int(rank)


@dataclass(frozen=True, eq=False)
class PerppCoefficients:
    """
    One least-squares fit per grid point; beta has shape (grid points, 5).
    """

    t_star: int
    beta: np.ndarray
    rank: np.ndarray
    n_rows: np.ndarray

    def to_record(self, grid) -> PerppCoefficientsRecord:
        keys = grid.keys()
        return PerppCoefficientsRecord(
            t_star=as_date(self.t_star),
            coefficients={k: [float(b) for b in row] for k, row in zip(keys, self.beta)},
            rank={k: int(r) for k, r in zip(keys, self.rank)},
            n_rows={k: int(n) for k, n in zip(keys, self.n_rows)},
        )


class PersistencePlusPlus:
    """
    Per grid point ordinary least squares on [1, c_t, y_{t-l*-L-1}, y_{t-2l*-L-1}, f_{t-l*-1}],
    where f_i is the ensemble mean issued at i averaged over the leads l* .. 29.
    Rank-deficient designs get the minimum-norm solution.
    """

    name = "perpp"

    def __init__(
        self,
        task: TaskSpec,
        archive: ForecastArchive,
        obs: FieldSeries,
        clim: Climatology,
        guard: LeakageGuard | None = None,
        jobs: int = 1,
    ):
        self.task = task
        self.archive = archive
        self.obs = obs
        self.clim = clim
        self.guard = guard
        self.jobs = jobs
        self.leads = tuple(
            lead for lead in archive.leads.tolist() if task.lead <= lead <= settings.MAX_LEAD
        )
        self._training = self._training_rows()
        self.last_fit: PerppCoefficients | None = None

    @property
    def lag1(self) -> int:
        return self.task.lead + self.task.period_length + 1

    @property
    def lag2(self) -> int:
        return 2 * self.task.lead + self.task.period_length + 1

    def ensemble_forecast(self, dates) -> np.ndarray:
        """
        Ensemble mean issued at t - l* - 1 averaged over the leads l* .. 29, for target dates t (ordinals).
        """
        dates = np.asarray(dates, dtype=np.int64)
        issuances = dates - self.task.lead - 1
        total = np.zeros((dates.size, self.archive.grid.size))
        count = np.zeros_like(total)
        for lead in self.leads:
            means = self.archive.ensemble_mean_at(issuances, lead)
            present = np.isfinite(means)
            total += np.where(present, means, 0.0)
            count += present
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(count > 0, total / np.maximum(count, 1), np.nan)

    def design(self, dates) -> np.ndarray:
        """
        Regressor rows for target dates (ordinals), shape (dates, grid points, 5); NaN where unavailable.
        """
        dates = np.asarray(dates, dtype=np.int64)
        return np.stack(
            [
                np.ones((dates.size, self.obs.grid.size)),
                self.clim.series(dates) if dates.size else np.zeros((0, self.obs.grid.size)),
                self.obs.rows_at(dates - self.lag1),
                self.obs.rows_at(dates - self.lag2),
                self.ensemble_forecast(dates),
            ],
            axis=-1,
        )

    def _training_rows(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        dates = self.obs.ordinals
        design = self.design(dates)
        target = self.obs.values
        usable = np.isfinite(design).all(axis=-1) & np.isfinite(target)
        return dates, design, np.where(usable, target, np.nan)

    def _solve(self, t_star: int) -> PerppCoefficients:
        dates, design, target = self._training
        stop = int(np.searchsorted(dates, observation_cutoff(t_star, self.task.lead, self.task.period_length), "right"))
        grid_size = self.obs.grid.size
        beta = np.full((grid_size, MIN_ROWS), np.nan)
        rank = np.zeros(grid_size, dtype=np.int64)
        n_rows = np.zeros(grid_size, dtype=np.int64)
        for g in range(grid_size):
            rows = np.isfinite(target[:stop, g])
            n_rows[g] = int(rows.sum())
            if n_rows[g] < MIN_ROWS:
                continue
            beta[g], rank[g] = least_squares(design[:stop, g][rows], target[:stop, g][rows])
        return PerppCoefficients(t_star=t_star, beta=beta, rank=rank, n_rows=n_rows)

    def fit(self, t_star) -> PerppCoefficients:
        """
        Fit on every date t <= t* - l* - L - 1 with all regressors available.
        Raises EmptyWindowError when a grid point has fewer than 5 training rows.
        """
        t_star = as_date(t_star).toordinal()
        coeffs = self._solve(t_star)
        short = np.flatnonzero(coeffs.n_rows < MIN_ROWS)
        if short.size:
            raise EmptyWindowError(
                f"Persistence++ needs {MIN_ROWS} training rows per grid point before "
                f"{as_date(observation_cutoff(t_star, self.task.lead, self.task.period_length))}, "
                f"grid point {self.obs.grid.points[short[0]]} has {coeffs.n_rows[short[0]]}"
            )
        deficient = int(np.count_nonzero(coeffs.rank < MIN_ROWS))
        if deficient:
            logger.warning(f"Persistence++ design is rank deficient at {deficient} grid points, using minimum-norm fit")
        if self.guard is not None:
            dates = self._training[0]
            newest = dates[: int(np.searchsorted(dates, observation_cutoff(t_star, self.task.lead, self.task.period_length), "right"))]
            if newest.size:
                self.guard.record_observations(t_star, newest[-1])
        return coeffs

    def predict(self, coeffs: PerppCoefficients, t_star) -> np.ndarray:
        """
        Dot product of the coefficients with the regressors at t*. Raises MissingDataError for an
        unavailable regressor.
        """
        t_star = as_date(t_star).toordinal()
        row = self.design(np.asarray([t_star]))[0]
        missing = [REGRESSORS[j] for j in range(MIN_ROWS) if not np.isfinite(row[:, j]).all()]
        if missing:
            raise MissingDataError(f"Persistence++ regressors unavailable for {as_date(t_star)}: {missing}", missing)
        self._record_inputs(np.asarray([t_star]))
        return np.einsum("gk,gk->g", row, coeffs.beta)

    def forecast(self, t_star) -> np.ndarray:
        return self.predict(self.fit(t_star), t_star)

    def _record_inputs(self, targets: np.ndarray) -> None:
        if self.guard is not None:
            self.guard.record_observations(targets, targets - self.lag1)
            self.guard.record_observations(targets, targets - self.lag2)
            self.guard.record_issuances(targets, targets - self.task.lead - 1)

    def forecast_many(self, targets) -> np.ndarray:
        """
        Progressive forecasts: one refit per target date. Rows are NaN when a fit or a regressor is unavailable.
        """
        targets = np.asarray(targets, dtype=np.int64)
        design = self.design(targets)
        fits = Parallel(n_jobs=self.jobs, prefer="threads")(delayed(self._solve)(int(t)) for t in targets)
        out = np.full((targets.size, self.obs.grid.size), np.nan)
        deficient = 0
        for i, coeffs in enumerate(fits):
            if (coeffs.n_rows < MIN_ROWS).any():
                continue
            deficient += int((coeffs.rank < MIN_ROWS).any())
            out[i] = np.einsum("gk,gk->g", design[i], coeffs.beta)
        if deficient:
            logger.warning(f"Persistence++ design was rank deficient for {deficient} target dates, used minimum-norm fits")
        computed = np.isfinite(out).all(axis=1)
        if self.guard is not None and computed.any():
            dates = self._training[0]
            cutoffs = observation_cutoff(targets[computed], self.task.lead, self.task.period_length)
            stops = np.searchsorted(dates, cutoffs, "right")
            self.guard.record_observations(targets[computed], np.where(stops > 0, dates[np.maximum(stops - 1, 0)], -1))
            self._record_inputs(targets[computed])
        self.last_fit = fits[-1] if fits else None
        return out
