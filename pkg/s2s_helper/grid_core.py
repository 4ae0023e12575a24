import logging
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view

from s2s_helper import settings
from s2s_helper.errors import (
    DatasetFormatError,
    DomainError,
    EmptyWindowError,
    MissingDataError,
)

logger = logging.getLogger(__name__)

CalendarDate = date

# Slot of Feb 29 in the 366 month-day calendar
FEB29_SLOT = 59

ERA_CODES = {"forecast": 0, "reforecast": 1}
ERA_NAMES = {code: name for name, code in ERA_CODES.items()}
ABSENT = -1


def as_date(value) -> date:
    if isinstance(value, datetime):
        return value.date()
    if isinstance(value, date):
        return value
    if isinstance(value, (int, np.integer)):
        return date.fromordinal(int(value))
    return pd.Timestamp(value).date()


def to_ordinals(dates: Iterable) -> np.ndarray:
    return np.asarray([as_date(d).toordinal() for d in dates], dtype=np.int64)


def from_ordinals(ordinals: Iterable[int]) -> tuple[date, ...]:
    return tuple(date.fromordinal(int(o)) for o in ordinals)


_EPOCH = date(1970, 1, 1).toordinal()


def _ordinal_array(dates) -> np.ndarray:
    array = np.atleast_1d(np.asarray(dates))
    if array.dtype.kind in "iu":
        return array.astype(np.int64)
    return to_ordinals(array)


def month_day_slots(dates) -> np.ndarray:
    """
    Index of every date in the 366-slot month-day calendar (Jan 1 = 0, Feb 29 = 59, Dec 31 = 365).
    Accepts dates or proleptic-Gregorian ordinals.
    """
    days = (_ordinal_array(dates) - _EPOCH).astype("datetime64[D]")
    years = days.astype("datetime64[Y]")
    day_of_year = (days - years.astype("datetime64[D]")).astype(np.int64)
    year_numbers = years.astype(np.int64) + 1970
    leap = (year_numbers % 4 == 0) & ((year_numbers % 100 != 0) | (year_numbers % 400 == 0))
    return day_of_year + ((~leap) & (day_of_year >= FEB29_SLOT))


def noleap_slots(dates) -> np.ndarray:
    """
    Index of every date in the 365-slot month-day calendar; Feb 29 shares the slot of Feb 28.
    """
    slots = month_day_slots(dates)
    return np.where(slots >= FEB29_SLOT, slots - 1, slots)


def _offset_days(t_star, t) -> int:
    delta = as_date(t_star).toordinal() - as_date(t).toordinal()
    if delta < 0:
        raise DomainError(f"date {as_date(t)} lies after the target date {as_date(t_star)}")
    return delta


def day_diff_days(delta) -> np.ndarray:
    """
    Vectorized day_diff on whole-day offsets t* - t.
    """
    delta = np.asarray(delta, dtype=np.float64)
    return settings.HALF_YEAR - np.abs(np.floor(np.mod(delta, settings.DAYS_PER_YEAR)) - settings.HALF_YEAR)


def year_diff_days(delta) -> np.ndarray:
    delta = np.asarray(delta, dtype=np.float64)
    return np.floor(delta / settings.DAYS_PER_YEAR)


def day_diff(t_star, t) -> float:
    """
    Distance in days between the days of year of t and t*, in [0, 182.5].
    Raises DomainError if t lies after t*.
    """
    return float(day_diff_days(_offset_days(t_star, t)))


def year_diff(t_star, t) -> int:
    """
    Whole years between t and t*. Raises DomainError if t lies after t*.
    """
    return int(year_diff_days(_offset_days(t_star, t)))


@dataclass(frozen=True)
class Grid:
    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        points = tuple((float(lat), float(lon)) for lat, lon in self.points)
        if len(set(points)) != len(points):
            raise DomainError("grid points must be unique")
        object.__setattr__(self, "points", points)

    @property
    def size(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    @cached_property
    def lats(self) -> np.ndarray:
        return np.asarray([p[0] for p in self.points], dtype=np.float64)

    @cached_property
    def lons(self) -> np.ndarray:
        return np.asarray([p[1] for p in self.points], dtype=np.float64)

    @cached_property
    def _index(self) -> dict[tuple[float, float], int]:
        return {p: i for i, p in enumerate(self.points)}

    def index_of(self, lat: float, lon: float) -> int:
        try:
            return self._index[(float(lat), float(lon))]
        except KeyError:
            raise MissingDataError(f"grid point ({lat}, {lon}) is not part of the grid", [(lat, lon)])

    def keys(self) -> list[str]:
        """
        "lat,lon" labels used as JSON keys.
        """
        return [f"{lat!r},{lon!r}" for lat, lon in self.points]

    @classmethod
    def regular(
        cls,
        rows: int,
        cols: int,
        lats: tuple[float, float] = settings.SYNTH_GRID_LATS,
        lons: tuple[float, float] = settings.SYNTH_GRID_LONS,
    ) -> "Grid":
        lat_values = np.linspace(lats[0], lats[1], rows) if rows > 1 else np.array([np.mean(lats)])
        lon_values = np.linspace(lons[0], lons[1], cols) if cols > 1 else np.array([np.mean(lons)])
        return cls(tuple((round(float(a), 4), round(float(o), 4)) for a in lat_values for o in lon_values))


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class FieldSeries:
    """
    Dense date-by-grid array of one variable. Missing cells are flagged in `mask` and hold NaN.
    """

    grid: Grid
    dates: tuple[date, ...]
    values: np.ndarray
    mask: np.ndarray | None = None
    variable: str = "tmp2m"
    units: str = ""

    def __post_init__(self):
        dates = tuple(as_date(d) for d in self.dates)
        values = np.array(self.values, dtype=np.float64).reshape(len(dates), self.grid.size)
        mask = ~np.isfinite(values)
        if self.mask is not None:
            mask |= np.asarray(self.mask, dtype=bool).reshape(values.shape)
        values[mask] = np.nan
        ordinals = np.asarray([d.toordinal() for d in dates], dtype=np.int64)
        if np.any(np.diff(ordinals) <= 0):
            raise DomainError("dates of a field series must be strictly increasing")
        object.__setattr__(self, "dates", dates)
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "mask", _readonly(mask))
        object.__setattr__(self, "ordinals", _readonly(ordinals))

    def __len__(self) -> int:
        return len(self.dates)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def index_of(self, t) -> int:
        ordinal = as_date(t).toordinal()
        idx = int(np.searchsorted(self.ordinals, ordinal))
        if idx == len(self.ordinals) or self.ordinals[idx] != ordinal:
            raise MissingDataError(f"no {self.variable} values for {as_date(t)}", [as_date(t)])
        return idx

    def row(self, t) -> np.ndarray:
        return self.values[self.index_of(t)]

    def rows_at(self, ordinals) -> np.ndarray:
        """
        Rows for the given ordinals; dates absent from the series give NaN rows.
        """
        ordinals = np.asarray(ordinals, dtype=np.int64)
        out = np.full((ordinals.size, self.grid.size), np.nan)
        if len(self.ordinals) == 0:
            return out
        idx = np.clip(np.searchsorted(self.ordinals, ordinals), 0, len(self.ordinals) - 1)
        found = self.ordinals[idx] == ordinals
        out[found] = self.values[idx[found]]
        return out

    def complete_rows(self) -> np.ndarray:
        return ~self.mask.any(axis=1)

    def between(self, start=None, end=None) -> "FieldSeries":
        keep = np.ones(len(self.dates), dtype=bool)
        if start is not None:
            keep &= self.ordinals >= as_date(start).toordinal()
        if end is not None:
            keep &= self.ordinals <= as_date(end).toordinal()
        return self.select(keep)

    def select(self, keep: np.ndarray) -> "FieldSeries":
        keep = np.asarray(keep, dtype=bool)
        return FieldSeries(
            grid=self.grid,
            dates=tuple(d for d, k in zip(self.dates, keep) if k),
            values=self.values[keep],
            mask=self.mask[keep],
            variable=self.variable,
            units=self.units,
        )

    def with_values(self, values: np.ndarray) -> "FieldSeries":
        return FieldSeries(self.grid, self.dates, values, variable=self.variable, units=self.units)

    def to_frame(self, value_column: str = "value") -> pd.DataFrame:
        n_dates, n_points = self.values.shape
        return pd.DataFrame(
            {
                "date": np.repeat(np.asarray(self.dates, dtype=object), n_points),
                "lat": np.tile(self.grid.lats, n_dates),
                "lon": np.tile(self.grid.lons, n_dates),
                value_column: self.values.reshape(-1),
            }
        )

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        grid: Grid | None = None,
        variable: str = "tmp2m",
        units: str = "",
        value_column: str = "value",
    ) -> "FieldSeries":
        """
        Build a series from long rows (date, lat, lon, value) in any order. Absent cells are masked.
        """
        if grid is None:
            grid = Grid(tuple(dict.fromkeys(zip(frame["lat"].astype(float), frame["lon"].astype(float)))))
        ordinals = to_ordinals(frame["date"])
        unique = np.unique(ordinals)
        values = np.full((unique.size, grid.size), np.nan)
        if len(frame):
            points = [grid.index_of(lat, lon) for lat, lon in zip(frame["lat"], frame["lon"])]
            values[np.searchsorted(unique, ordinals), points] = frame[value_column].to_numpy(dtype=np.float64)
        return cls(grid, from_ordinals(unique), values, variable=variable, units=units)

    def equals(self, other: "FieldSeries") -> bool:
        return (
            self.grid == other.grid
            and self.dates == other.dates
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class ForecastArchive:
    """
    Ensemble forecasts keyed by (issuance, lead, member), stored densely.

    values has shape (issuances, leads, members, grid points). era holds one code per
    (issuance, lead, member): -1 for an absent entry, 0 for forecast and 1 for reforecast.
    """

    grid: Grid
    issuances: np.ndarray
    leads: np.ndarray
    members: np.ndarray
    values: np.ndarray
    era: np.ndarray
    variable: str = "tmp2m"
    units: str = ""
    _means: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        issuances = np.asarray(self.issuances, dtype=np.int64)
        leads = np.asarray(self.leads, dtype=np.int64)
        members = np.asarray(self.members, dtype=np.int64)
        shape = (issuances.size, leads.size, members.size, self.grid.size)
        values = np.array(self.values, dtype=np.float64).reshape(shape)
        era = np.array(self.era, dtype=np.int8).reshape(shape[:3])
        for name, keys in (("issuance", issuances), ("lead", leads), ("member", members)):
            if np.any(np.diff(keys) <= 0):
                raise DomainError(f"{name} keys must be unique and increasing")
        if leads.size and leads.min() < 0:
            raise DomainError("leads must be non-negative")
        values[era == ABSENT] = np.nan
        object.__setattr__(self, "issuances", _readonly(issuances))
        object.__setattr__(self, "leads", _readonly(leads))
        object.__setattr__(self, "members", _readonly(members))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "era", _readonly(era))

    @property
    def n_entries(self) -> int:
        return int(np.count_nonzero(self.era != ABSENT))

    @property
    def issuance_dates(self) -> tuple[date, ...]:
        return from_ordinals(self.issuances)

    def lead_index(self, lead: int) -> int:
        idx = int(np.searchsorted(self.leads, lead))
        if idx == self.leads.size or self.leads[idx] != lead:
            raise MissingDataError(f"lead {lead} is not part of the archive", [("*", lead)])
        return idx

    def has_lead(self, lead: int) -> bool:
        return bool(np.any(self.leads == lead))

    def ensemble_mean(self, era: str | None = None) -> np.ndarray:
        """
        Ensemble means of shape (issuances, leads, grid points) over the members present
        (restricted to one era if given); NaN where no member exists.
        """
        key = era or "any"
        if key not in self._means:
            present = self.era != ABSENT if era is None else self.era == ERA_CODES[era]
            weights = present[..., None] & np.isfinite(self.values)
            total = np.where(weights, self.values, 0.0).sum(axis=2)
            count = weights.sum(axis=2)
            with np.errstate(invalid="ignore", divide="ignore"):
                means = np.where(count > 0, total / np.maximum(count, 1), np.nan)
            self._means[key] = _readonly(means)
        return self._means[key]

    def ensemble_mean_at(self, issuances, lead: int, era: str | None = None) -> np.ndarray:
        """
        Ensemble means for the given issuance ordinals at one lead; NaN rows for absent entries.
        """
        issuances = np.asarray(issuances, dtype=np.int64).reshape(-1)
        out = np.full((issuances.size, self.grid.size), np.nan)
        if not self.has_lead(lead) or self.issuances.size == 0:
            return out
        means = self.ensemble_mean(era)[:, self.lead_index(lead)]
        idx = np.clip(np.searchsorted(self.issuances, issuances), 0, self.issuances.size - 1)
        found = self.issuances[idx] == issuances
        out[found] = means[idx[found]]
        return out

    def daily_ensemble_mean(self, lead: int, start: int, stop: int, era: str | None = None) -> np.ndarray:
        """
        Ensemble means at one lead on the dense daily issuance axis [start, stop).
        """
        return self.ensemble_mean_at(np.arange(start, stop, dtype=np.int64), lead, era)

    def members_at(self, issuance, lead: int, era: str | None = None) -> np.ndarray:
        """
        Member forecasts (present members only) of one issuance and lead, shape (members, grid points).
        """
        ordinal = as_date(issuance).toordinal() if not isinstance(issuance, (int, np.integer)) else int(issuance)
        idx = int(np.searchsorted(self.issuances, ordinal))
        if idx == self.issuances.size or self.issuances[idx] != ordinal or not self.has_lead(lead):
            raise MissingDataError(
                f"no forecasts issued {date.fromordinal(ordinal)} at lead {lead}",
                [(date.fromordinal(ordinal), lead)],
            )
        codes = self.era[idx, self.lead_index(lead)]
        present = codes != ABSENT if era is None else codes == ERA_CODES[era]
        return self.values[idx, self.lead_index(lead)][present]

    def lead_series(self, lead: int, era: str | None = None) -> FieldSeries:
        """
        Ensemble-mean forecasts of one lead indexed by target date (issuance + lead).
        """
        means = self.ensemble_mean(era)[:, self.lead_index(lead)]
        keep = np.isfinite(means).any(axis=1)
        return FieldSeries(
            self.grid,
            from_ordinals(self.issuances[keep] + lead),
            means[keep],
            variable=self.variable,
            units=self.units,
        )

    def to_frame(self) -> pd.DataFrame:
        i_idx, l_idx, m_idx = np.nonzero(self.era != ABSENT)
        n_points = self.grid.size
        issuances = np.repeat(self.issuances[i_idx], n_points)
        leads = np.repeat(self.leads[l_idx], n_points)
        return pd.DataFrame(
            {
                "issuance_date": from_ordinals(issuances),
                "target_date": from_ordinals(issuances + leads),
                "lead_days": leads,
                "member": np.repeat(self.members[m_idx], n_points),
                "lat": np.tile(self.grid.lats, i_idx.size),
                "lon": np.tile(self.grid.lons, i_idx.size),
                "value": self.values[i_idx, l_idx, m_idx].reshape(-1),
                "era": np.repeat([ERA_NAMES[int(c)] for c in self.era[i_idx, l_idx, m_idx]], n_points),
            }
        )

    @classmethod
    def from_entries(
        cls,
        grid: Grid,
        issuances: np.ndarray,
        leads: np.ndarray,
        members: np.ndarray,
        points: np.ndarray,
        values: np.ndarray,
        eras: np.ndarray,
        variable: str = "tmp2m",
        units: str = "",
    ) -> "ForecastArchive":
        """
        Place flat (issuance, lead, member, grid point) entries into the dense layout.
        Grid points never given for a present entry hold NaN.
        """
        issuance_keys, i_idx = np.unique(np.asarray(issuances, dtype=np.int64), return_inverse=True)
        lead_keys, l_idx = np.unique(np.asarray(leads, dtype=np.int64), return_inverse=True)
        member_keys, m_idx = np.unique(np.asarray(members, dtype=np.int64), return_inverse=True)
        shape = (issuance_keys.size, lead_keys.size, member_keys.size)
        flat = np.ravel_multi_index((i_idx, l_idx, m_idx), shape) if i_idx.size else np.zeros(0, dtype=np.int64)
        cells = flat * grid.size + np.asarray(points, dtype=np.int64)
        if np.unique(cells).size != cells.size:
            raise DatasetFormatError("duplicate (issuance, lead, member, grid point) entries")
        dense = np.full(int(np.prod(shape)) * grid.size, np.nan)
        dense[cells] = np.asarray(values, dtype=np.float64)
        era = np.full(int(np.prod(shape)), ABSENT, dtype=np.int8)
        era[flat] = np.asarray(eras, dtype=np.int8)
        return cls(
            grid, issuance_keys, lead_keys, member_keys,
            dense.reshape(shape + (grid.size,)), era.reshape(shape),
            variable=variable, units=units,
        )

    @classmethod
    def from_targets(
        cls,
        grid: Grid,
        targets: np.ndarray,
        lead: int,
        values: np.ndarray,
        members: Sequence[int] = (settings.DETERMINISTIC_MEMBER,),
        era: str = "forecast",
        variable: str = "tmp2m",
        units: str = "",
    ) -> "ForecastArchive":
        """
        Single-lead archive of corrected forecasts. values has shape (targets, members, grid points).
        A member with a NaN cell is absent; targets without any complete member are left out.
        """
        targets = np.asarray(targets, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64).reshape(targets.size, len(members), grid.size)
        complete = np.isfinite(values).all(axis=2)
        keep = complete.any(axis=1)
        era_codes = np.where(complete[keep], ERA_CODES[era], ABSENT).astype(np.int8)[:, None]
        return cls(
            grid, targets[keep] - lead, np.asarray([lead]), np.asarray(members),
            values[keep][:, None], era_codes, variable=variable, units=units,
        )

    def equals(self, other: "ForecastArchive") -> bool:
        return (
            self.grid == other.grid
            and np.array_equal(self.issuances, other.issuances)
            and np.array_equal(self.leads, other.leads)
            and np.array_equal(self.members, other.members)
            and np.array_equal(self.era, other.era)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


def month_day_lookup(table: np.ndarray, dates) -> tuple[np.ndarray, bool]:
    """
    Rows of a 366-slot month-day table for the dates. Feb 29 cells that are NaN take the Feb 28 value.

    Returns the rows and whether any cell fell back to Feb 28.
    """
    slots = month_day_slots(dates)
    values = table[slots]
    feb29 = slots == FEB29_SLOT
    if not feb29.any():
        return values, False
    missing = feb29[:, None] & np.isnan(values)
    if not missing.any():
        return values, False
    values = np.where(missing, table[FEB29_SLOT - 1][None, :], values)
    return values, True


@dataclass(frozen=True, eq=False)
class Climatology:
    """
    Mean observation per (month, day, grid point) over a base period, in the 366-slot calendar.
    """

    grid: Grid
    table: np.ndarray
    base_period: tuple[int, int]
    _warned: bool = field(default=False, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "table", _readonly(np.array(self.table, dtype=np.float64).reshape(366, self.grid.size)))

    def series(self, dates) -> np.ndarray:
        values, fell_back = month_day_lookup(self.table, dates)
        if fell_back and not self._warned:
            object.__setattr__(self, "_warned", True)
            logger.warning("Climatology has no Feb 29 entry for some grid points, falling back to Feb 28")
        return values

    def lookup(self, t) -> np.ndarray:
        return self.series([as_date(t)])[0]


def _base_period_mask(series: FieldSeries, base_period: tuple[int, int]) -> np.ndarray:
    years = np.asarray([d.year for d in series.dates])
    return (years >= base_period[0]) & (years <= base_period[1])


def _required_slots(base_period: tuple[int, int]) -> np.ndarray:
    start = date(base_period[0], 1, 1).toordinal()
    stop = date(base_period[1], 12, 31).toordinal()
    return np.unique(month_day_slots(np.arange(start, stop + 1)))


def build_climatology(obs: FieldSeries, base_period: tuple[int, int]) -> Climatology:
    """
    Mean of the observations per (month, day, grid point) over the years of base_period.
    Feb 29 is averaged over leap years only; masked cells are skipped.
    """
    keep = _base_period_mask(obs, base_period)
    if not keep.any():
        raise EmptyWindowError(f"no observations in the base period {base_period[0]}-{base_period[1]}")
    frame = pd.DataFrame(obs.values[keep])
    frame["slot"] = month_day_slots(obs.ordinals[keep])
    table = frame.groupby("slot").mean().reindex(range(366))
    missing = [int(s) for s in _required_slots(base_period) if table.loc[s].isna().all()]
    if missing:
        names = ", ".join(_slot_name(s) for s in missing[:5])
        raise EmptyWindowError(f"base period has no observations for month-day {names}")
    logger.info(f"Built climatology over {base_period[0]}-{base_period[1]} from {int(keep.sum())} dates")
    return Climatology(obs.grid, table.to_numpy(), tuple(base_period))


def _slot_name(slot: int) -> str:
    return (date(2000, 1, 1) + timedelta(days=int(slot))).strftime("%m-%d")


def aggregate_period(daily: FieldSeries, mode: str, period_length: int = settings.PERIOD_LENGTH) -> FieldSeries:
    """
    Sum or mean of the daily values over [t, t + L - 1] for every start date t of the daily series.
    Windows touching a missing or masked day, or running past the last day, are masked.
    """
    if mode not in ("mean", "sum"):
        raise DomainError(f"unknown aggregation mode {mode!r}")
    if period_length < 1:
        raise DomainError("period length must be at least one day")
    if len(daily) == 0:
        return daily
    start = int(daily.ordinals[0])
    n_days = int(daily.ordinals[-1]) - start + 1
    dense = np.full((n_days + period_length - 1, daily.grid.size), np.nan)
    dense[daily.ordinals - start] = daily.values
    windows = sliding_window_view(dense, period_length, axis=0)[: n_days]
    totals = windows.sum(axis=-1)[daily.ordinals - start]
    values = totals if mode == "sum" else totals / period_length
    return FieldSeries(daily.grid, daily.dates, values, variable=daily.variable, units=daily.units)
