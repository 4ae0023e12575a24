import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel

from s2s_helper import settings
from s2s_helper.errors import DatasetFormatError
from s2s_helper.grid_core import (
    ERA_CODES,
    FieldSeries,
    ForecastArchive,
    Grid,
    from_ordinals,
)
from s2s_helper.pydantic_models.config_models import VariableSpec

logger = logging.getLogger(__name__)

OBSERVATION_COLUMNS = ["date", "lat", "lon", "value"]
FORECAST_COLUMNS = ["issuance_date", "target_date", "lead_days", "member", "lat", "lon", "value", "era"]

Schema = Literal["observation", "forecast"]


def _line(position: int) -> int:
    # header is line 1
    return int(position) + 2


def _read_rows(path: Path, columns: list[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    except pd.errors.EmptyDataError:
        raise DatasetFormatError(f"{path}: file is empty, expected header {','.join(columns)}")
    except pd.errors.ParserError as error:
        raise DatasetFormatError(f"{path}: malformed row ({error})")
    if list(frame.columns) != columns:
        raise DatasetFormatError(
            f"{path}: header {','.join(map(str, frame.columns))} does not match {','.join(columns)}"
        )
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        raise DatasetFormatError(f"{path}: line {_line(np.argmax(short))} has too few fields")
    return frame


def _parse_dates(frame: pd.DataFrame, column: str, path: Path) -> np.ndarray:
    parsed = pd.to_datetime(frame[column], format="%Y-%m-%d", errors="coerce")
    bad = parsed.isna().to_numpy()
    if bad.any():
        idx = int(np.argmax(bad))
        raise DatasetFormatError(f"{path}: line {_line(idx)} has an invalid {column} {frame[column].iloc[idx]!r}")
    return np.asarray([d.toordinal() for d in parsed.dt.date], dtype=np.int64)


def _parse_floats(frame: pd.DataFrame, column: str, path: Path, allow_empty: bool = False) -> np.ndarray:
    raw = frame[column].str.strip()
    empty = raw.isin(["", "nan", "NaN"]).to_numpy() if allow_empty else np.zeros(len(raw), dtype=bool)
    bad = pd.to_numeric(raw.where(~empty, "0"), errors="coerce").isna().to_numpy()
    if bad.any():
        idx = int(np.argmax(bad))
        raise DatasetFormatError(f"{path}: line {_line(idx)} has an invalid {column} {frame[column].iloc[idx]!r}")
    values = np.full(len(raw), np.nan)
    # numpy parses decimal strings with correct rounding
    values[~empty] = raw[~empty].to_numpy(dtype=str).astype(np.float64)
    return values


def _parse_ints(frame: pd.DataFrame, column: str, path: Path, minimum: int) -> np.ndarray:
    raw = frame[column].str.strip()
    bad = ~raw.str.fullmatch(r"-?\d+").to_numpy(dtype=bool)
    if not bad.any():
        values = raw.to_numpy(dtype=str).astype(np.int64)
        bad = values < minimum
    if bad.any():
        idx = int(np.argmax(bad))
        raise DatasetFormatError(f"{path}: line {_line(idx)} has an invalid {column} {frame[column].iloc[idx]!r}")
    return values


def _check_duplicates(frame: pd.DataFrame, keys: list[str], path: Path) -> None:
    duplicated = frame.duplicated(subset=keys).to_numpy()
    if duplicated.any():
        idx = int(np.argmax(duplicated))
        key = ", ".join(f"{k}={frame[k].iloc[idx]}" for k in keys)
        raise DatasetFormatError(f"{path}: line {_line(idx)} duplicates the key ({key})")


def _grid_of(lats: np.ndarray, lons: np.ndarray) -> tuple[Grid, np.ndarray]:
    pairs = pd.MultiIndex.from_arrays([lats, lons])
    codes, uniques = pd.factorize(pairs, sort=False)
    return Grid(tuple(uniques)), codes


def load_dataset(
    path: str | Path, schema: Schema, variable: str = "tmp2m"
) -> FieldSeries | ForecastArchive:
    """
    Load an observation CSV (date,lat,lon,value) into a FieldSeries or a forecast CSV
    (issuance_date,target_date,lead_days,member,lat,lon,value,era) into a ForecastArchive.

    Grid points keep the order of their first appearance. Empty values mark missing cells.
    Raises DatasetFormatError naming the file line of the first malformed or duplicate row.
    """
    path = Path(path)
    units = settings.VARIABLE_UNITS.get(variable, "")
    if schema == "observation":
        frame = _read_rows(path, OBSERVATION_COLUMNS)
        ordinals = _parse_dates(frame, "date", path)
        lats = _parse_floats(frame, "lat", path)
        lons = _parse_floats(frame, "lon", path)
        values = _parse_floats(frame, "value", path, allow_empty=True)
        _check_duplicates(frame, ["date", "lat", "lon"], path)
        grid, points = _grid_of(lats, lons)
        dates = np.unique(ordinals)
        dense = np.full((dates.size, grid.size), np.nan)
        dense[np.searchsorted(dates, ordinals), points] = values
        series = FieldSeries(grid, from_ordinals(dates), dense, variable=variable, units=units)
        logger.info(f"Loaded {len(series)} dates x {grid.size} grid points of {variable} from {path}")
        return series

    if schema == "forecast":
        frame = _read_rows(path, FORECAST_COLUMNS)
        issuances = _parse_dates(frame, "issuance_date", path)
        targets = _parse_dates(frame, "target_date", path)
        leads = _parse_ints(frame, "lead_days", path, minimum=0)
        members = _parse_ints(frame, "member", path, minimum=settings.DETERMINISTIC_MEMBER)
        lats = _parse_floats(frame, "lat", path)
        lons = _parse_floats(frame, "lon", path)
        values = _parse_floats(frame, "value", path, allow_empty=True)
        eras = frame["era"].str.strip()
        bad_era = ~eras.isin(list(ERA_CODES)).to_numpy()
        if bad_era.any():
            idx = int(np.argmax(bad_era))
            raise DatasetFormatError(f"{path}: line {_line(idx)} has an invalid era {frame['era'].iloc[idx]!r}")
        bad_target = targets != issuances + leads
        if bad_target.any():
            idx = int(np.argmax(bad_target))
            raise DatasetFormatError(f"{path}: line {_line(idx)} has target_date != issuance_date + lead_days")
        _check_duplicates(frame, ["issuance_date", "lead_days", "member", "lat", "lon"], path)
        grid, points = _grid_of(lats, lons)
        archive = ForecastArchive.from_entries(
            grid, issuances, leads, members, points, values,
            eras.map(ERA_CODES).to_numpy(dtype=np.int8), variable=variable, units=units,
        )
        logger.info(
            f"Loaded {archive.n_entries} forecast entries ({archive.issuances.size} issuances, "
            f"{archive.leads.size} leads, {archive.members.size} members) of {variable} from {path}"
        )
        return archive

    raise DatasetFormatError(f"unknown dataset schema {schema!r}")


def _format_floats(values: np.ndarray) -> np.ndarray:
    # shortest repr round-trips every finite double
    text = np.asarray(values, dtype=np.float64).astype(str)
    text[~np.isfinite(values)] = ""
    return text


def atomic_write_text(path: str | Path, text: str) -> None:
    """
    Write text to path through a temporary file in the same directory and a rename.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, temporary = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="\n") as file:
            file.write(text)
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise


def store_frame(frame: pd.DataFrame, path: str | Path) -> None:
    frame = frame.copy()
    for column in frame.columns:
        if frame[column].dtype.kind == "f":
            frame[column] = _format_floats(frame[column].to_numpy())
    atomic_write_text(path, frame.to_csv(index=False, lineterminator="\n"))


def store_json(model: BaseModel, path: str | Path) -> None:
    atomic_write_text(path, model.model_dump_json(indent=2) + "\n")


def store_dataset(series: FieldSeries | ForecastArchive, path: str | Path, value_column: str = "value") -> None:
    """
    Write a FieldSeries with the observation schema or a ForecastArchive with the forecast schema.
    Masked cells are written with an empty value.
    """
    if isinstance(series, FieldSeries):
        frame = series.to_frame(value_column=value_column)
        frame["date"] = [d.isoformat() for d in frame["date"]]
    else:
        frame = series.to_frame()
        frame["issuance_date"] = [d.isoformat() for d in frame["issuance_date"]]
        frame["target_date"] = [d.isoformat() for d in frame["target_date"]]
    store_frame(frame, path)
    logger.info(f"Wrote {len(frame)} rows to {path}")


def load_explanatory(path: str | Path) -> pd.DataFrame:
    """
    Load an explanatory-variable table (date,var1,var2,...) indexed by date.
    """
    path = Path(path)
    frame = pd.read_csv(path, encoding="utf-8")
    if frame.columns[0] != "date":
        raise DatasetFormatError(f"{path}: first column must be date")
    frame["date"] = pd.to_datetime(frame["date"], format="%Y-%m-%d", errors="coerce")
    bad = frame["date"].isna().to_numpy()
    if bad.any():
        raise DatasetFormatError(f"{path}: line {_line(np.argmax(bad))} has an invalid date")
    if frame["date"].duplicated().any():
        idx = int(np.argmax(frame["date"].duplicated().to_numpy()))
        raise DatasetFormatError(f"{path}: line {_line(idx)} duplicates a date")
    return frame.set_index("date").sort_index().astype(np.float64)


def load_manifest(path: str | Path) -> dict[str, VariableSpec]:
    """
    Load the explanatory-variable manifest: name -> {"kind": continuous|categorical, "lag_days": n}.
    A bare kind string is accepted in place of the object.
    """
    with open(path, "r", encoding="utf-8") as file:
        data = json.load(file)
    return {
        name: VariableSpec(kind=spec) if isinstance(spec, str) else VariableSpec.model_validate(spec)
        for name, spec in data.items()
    }
