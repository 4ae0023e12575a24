import logging
import threading

import numpy as np
from scipy import sparse

from s2s_helper import settings
from s2s_helper.errors import LeakageError
from s2s_helper.grid_core import FieldSeries, as_date, day_diff_days, year_diff_days

logger = logging.getLogger(__name__)

# Target rows per block when building window matrices
_CHUNK = 512


def observation_cutoff(t_star, lead: int, period_length: int = settings.PERIOD_LENGTH):
    """
    Newest period-start date whose observation is complete one day before issuance.
    Works on ordinals (scalars or arrays).
    """
    return t_star - lead - period_length - 1


def issuance_cutoff(t_star, lead: int):
    return t_star - lead


def training_index(
    t_star,
    lead: int,
    period_length: int,
    obs: FieldSeries,
    available: np.ndarray | None = None,
) -> np.ndarray:
    """
    Ordinals of the dates t <= t* - l* - L - 1 with complete observations
    (and, if given, `available` True for the date).
    """
    t_star = as_date(t_star).toordinal() if not isinstance(t_star, (int, np.integer)) else int(t_star)
    keep = obs.complete_rows() & (obs.ordinals <= observation_cutoff(t_star, lead, period_length))
    if available is not None:
        keep &= np.asarray(available, dtype=bool)
    return obs.ordinals[keep]


def window_matrix(
    targets: np.ndarray,
    candidates: np.ndarray,
    span: int,
    max_years: float,
    cutoff_offset: int,
) -> sparse.csr_matrix:
    """
    Selection matrix W with W[i, j] = 1 when candidate date j lies in the training window of target i:
    candidate <= target - cutoff_offset, year_diff <= max_years and day_diff <= span.
    """
    targets = np.asarray(targets, dtype=np.int64)
    candidates = np.asarray(candidates, dtype=np.int64)
    blocks = []
    for start in range(0, max(targets.size, 1), _CHUNK):
        block = targets[start:start + _CHUNK]
        delta = block[:, None] - candidates[None, :]
        inside = (delta >= cutoff_offset) & (day_diff_days(delta) <= span)
        if np.isfinite(max_years):
            inside &= year_diff_days(delta) <= max_years
        blocks.append(sparse.csr_matrix(inside.astype(np.float64)))
    if not blocks:
        return sparse.csr_matrix((0, candidates.size))
    return sparse.vstack(blocks, format="csr")


def newest_selected(matrix: sparse.csr_matrix, candidates: np.ndarray) -> np.ndarray:
    """
    Newest candidate selected by every row of a window matrix over sorted candidates; -1 for empty rows.
    """
    counts = np.diff(matrix.indptr)
    newest = np.full(matrix.shape[0], -1, dtype=np.int64)
    rows = counts > 0
    last = matrix.indptr[1:][rows] - 1
    newest[rows] = np.asarray(candidates)[matrix.indices[last]]
    return newest


class LeakageGuard:
    """
    Audit of every observation date and issuance date read while forecasting a target date.

    Observations may be read up to t* - l* - L - 1 and forecasts up to issuance t* - l*.
    A violation raises LeakageError when strict, and is counted either way.
    """

    def __init__(self, lead: int, period_length: int = settings.PERIOD_LENGTH, strict: bool = True):
        self.lead = lead
        self.period_length = period_length
        self.strict = strict
        self.reads = 0
        self.violations = 0
        # smallest t* - t seen for each kind
        self.newest_observation_offset: int | None = None
        self.newest_issuance_offset: int | None = None
        self._lock = threading.Lock()

    def _record(self, kind: str, t_stars, dates, limit_offset: int) -> None:
        t_stars = np.atleast_1d(np.asarray(t_stars, dtype=np.int64))
        dates = np.atleast_1d(np.asarray(dates, dtype=np.int64))
        t_stars, dates = np.broadcast_arrays(t_stars, dates)
        valid = dates >= 0
        if not valid.any():
            return
        offsets = (t_stars - dates)[valid]
        bad = offsets < limit_offset
        with self._lock:
            self.reads += int(valid.sum())
            self.violations += int(bad.sum())
            attribute = f"newest_{kind}_offset"
            newest = int(offsets.min())
            current = getattr(self, attribute)
            setattr(self, attribute, newest if current is None else min(current, newest))
        if bad.any() and self.strict:
            idx = int(np.argmax(bad))
            t_star = as_date(int(t_stars[valid][idx]))
            read = as_date(int(dates[valid][idx]))
            raise LeakageError(
                f"{kind} dated {read} is not observable when forecasting {t_star} at lead {self.lead}"
            )

    def record_observations(self, t_stars, dates) -> None:
        """
        Record reads of observation period-start dates (ordinals; negative entries are ignored).
        """
        self._record("observation", t_stars, dates, self.lead + self.period_length + 1)

    def record_issuances(self, t_stars, issuances) -> None:
        self._record("issuance", t_stars, issuances, self.lead)

    def summary(self) -> dict[str, int | None]:
        return {
            "reads": self.reads,
            "violations": self.violations,
            "newest_observation_offset": self.newest_observation_offset,
            "newest_issuance_offset": self.newest_issuance_offset,
        }
