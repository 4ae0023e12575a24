import logging
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from s2s_helper import settings
from s2s_helper.correctors.training import LeakageGuard, observation_cutoff
from s2s_helper.grid_core import FieldSeries, as_date
from s2s_helper.metrics import geographic_loss
from s2s_helper.pydantic_models.artifact_models import TuningEntry, TuningLedger
from s2s_helper.pydantic_models.config_models import ClimppConfig, DynppConfig, TaskSpec

logger = logging.getLogger(__name__)

Candidate = DynppConfig | ClimppConfig


def tuning_window(t_star, task: TaskSpec, window_years: int = settings.TUNING_WINDOW_YEARS):
    """
    First and last target date (ordinals) scored when tuning for t*: within window_years years
    before t* and observable at issuance.
    """
    first = np.ceil(np.asarray(t_star) - window_years * settings.DAYS_PER_YEAR).astype(np.int64)
    return first, observation_cutoff(t_star, task.lead, task.period_length)


def tune(
    candidates: Sequence[Candidate],
    history: pd.DataFrame,
    t_star,
    task: TaskSpec,
    model: Literal["dynpp", "climpp"] = "dynpp",
    window_years: int = settings.TUNING_WINDOW_YEARS,
) -> Candidate:
    """
    Pick the candidate with the smallest mean progressive geographic RMSE over the tuning window.

    history holds one row per (candidate label, past target date) with columns
    candidate, date and rmse. Ties go to the earlier candidate; without any scored
    candidate the first one is returned.
    """
    if not candidates:
        raise ValueError("tune needs at least one candidate")
    t_star = as_date(t_star).toordinal()
    first, last = tuning_window(t_star, task, window_years)
    ordinals = np.asarray([as_date(d).toordinal() for d in history["date"]], dtype=np.int64)
    inside = (ordinals >= first) & (ordinals <= last) & np.isfinite(history["rmse"].to_numpy(dtype=float))
    scores = history[inside].groupby("candidate")["rmse"].mean()
    best, best_score = None, np.inf
    for cfg in candidates:
        score = scores.get(cfg.label)
        if score is not None and score < best_score:
            best, best_score = cfg, score
    if best is None:
        logger.warning(f"No {model} candidate has a scored date before {as_date(t_star)}, using {candidates[0].label}")
        return candidates[0]
    return best


@dataclass
class TuningResult:
    targets: np.ndarray
    forecasts: np.ndarray
    selected: np.ndarray
    ledger: TuningLedger

    def selected_labels(self, candidates: Sequence[Candidate]) -> list[str]:
        return [candidates[i].label for i in self.selected]


class ProgressiveTuner:
    """
    Runs every candidate progressively over all observed dates and, for each target date,
    keeps the forecast of the candidate with the smallest mean geographic RMSE over the
    preceding tuning window.
    """

    def __init__(
        self,
        model: Literal["dynpp", "climpp"],
        corrector,
        candidates: Sequence[Candidate],
        task: TaskSpec,
        obs: FieldSeries,
        window_years: int = settings.TUNING_WINDOW_YEARS,
        guard: LeakageGuard | None = None,
        jobs: int = 1,
    ):
        if not candidates:
            raise ValueError("the tuner needs at least one candidate")
        self.model = model
        self.corrector = corrector
        self.candidates = list(candidates)
        self.task = task
        self.obs = obs
        self.window_years = window_years
        self.guard = guard
        self.jobs = jobs

    def _history_dates(self, targets: np.ndarray) -> np.ndarray:
        return np.union1d(self.obs.ordinals[self.obs.complete_rows()], targets)

    def history(self, targets) -> pd.DataFrame:
        """
        Progressive geographic RMSE of every candidate on every observed date (columns candidate, date, rmse).
        """
        targets = np.asarray(targets, dtype=np.int64)
        dates = self._history_dates(targets)
        _, errors = self._score(dates)
        frames = [
            pd.DataFrame({"candidate": cfg.label, "date": [as_date(int(d)) for d in dates], "rmse": errors[c]})
            for c, cfg in enumerate(self.candidates)
        ]
        return pd.concat(frames, ignore_index=True)

    def _score(self, dates: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        forecasts = Parallel(n_jobs=self.jobs, prefer="threads")(
            delayed(self.corrector.forecast_many)(cfg, dates) for cfg in self.candidates
        )
        truth = self.obs.rows_at(dates)
        errors = np.vstack([geographic_loss(f, truth, "RMSE").reshape(-1) for f in forecasts])
        return forecasts, errors

    def run(self, targets) -> TuningResult:
        targets = np.asarray(targets, dtype=np.int64)
        dates = self._history_dates(targets)
        forecasts, errors = self._score(dates)

        scored = np.isfinite(errors)
        sums = np.concatenate([np.zeros((len(self.candidates), 1)), np.cumsum(np.where(scored, errors, 0.0), axis=1)], axis=1)
        counts = np.concatenate([np.zeros((len(self.candidates), 1)), np.cumsum(scored, axis=1)], axis=1)
        first, last = tuning_window(targets, self.task, self.window_years)
        lo = np.searchsorted(dates, first, "left")
        hi = np.searchsorted(dates, last, "right")
        n_scored = counts[:, hi] - counts[:, lo]
        with np.errstate(invalid="ignore", divide="ignore"):
            means = np.where(n_scored > 0, (sums[:, hi] - sums[:, lo]) / np.maximum(n_scored, 1), np.inf)

        # argmin returns the first candidate on ties and when nothing is scored
        selected = np.argmin(means, axis=0)
        cold = ~np.isfinite(means).any(axis=0)
        if cold.any():
            logger.warning(
                f"Tuner cold start for {int(cold.sum())} of {targets.size} {self.model} target dates, "
                f"using {self.candidates[0].label}"
            )

        positions = np.searchsorted(dates, targets)
        stacked = np.stack([f[positions] for f in forecasts])
        chosen = stacked[selected, np.arange(targets.size)]

        if self.guard is not None:
            has_history = hi > lo
            self.guard.record_observations(targets[has_history], dates[np.maximum(hi - 1, 0)][has_history])

        entries = []
        labels = [cfg.label for cfg in self.candidates]
        for i, t in enumerate(targets):
            finite = np.isfinite(means[:, i])
            entries.append(
                TuningEntry(
                    target_date=as_date(int(t)),
                    selected=labels[selected[i]],
                    cold_start=bool(cold[i]),
                    scores={labels[c]: float(means[c, i]) for c in np.flatnonzero(finite)},
                )
            )
            logger.debug(f"{as_date(int(t))}: selected {labels[selected[i]]}")
        ledger = TuningLedger(model=self.model, candidates=labels, window_years=self.window_years, entries=entries)
        return TuningResult(targets=targets, forecasts=chosen, selected=selected, ledger=ledger)
