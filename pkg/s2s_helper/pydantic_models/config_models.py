import json
from datetime import date
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from s2s_helper import settings

Variable = Literal["tmp2m", "precip"]
Horizon = Literal["12w", "34w", "56w"]
Loss = Literal["RMSE", "MSE"]
ModelName = Literal["dynpp", "climpp", "perpp", "abc", "qm", "loess", "opdebias", "mmm"]
MetricName = Literal["skill", "spatial", "bias", "fraction", "crps", "bss"]


class TaskSpec(BaseModel):
    """
    A forecasting task: a target variable at a horizon, forecast at lead l* for periods of L days.
    """

    model_config = ConfigDict(frozen=True)

    variable: Variable = Field(description="Target variable")
    horizon: Horizon = Field(description="Forecast horizon")
    lead: int = Field(description="Lead l* in days between issuance and the period start")
    period_length: int = Field(
        default=settings.PERIOD_LENGTH, description="Period length L in days"
    )

    @model_validator(mode="before")
    @classmethod
    def fill_lead(cls, data):
        if isinstance(data, str):
            return parse_task(data).model_dump()
        if isinstance(data, dict) and "lead" not in data and "horizon" in data:
            data = {**data, "lead": settings.HORIZON_LEADS[data["horizon"]]}
        return data

    @model_validator(mode="after")
    def check_lead(self):
        if self.period_length != settings.PERIOD_LENGTH:
            raise ValueError(f"period length must be {settings.PERIOD_LENGTH}")
        if self.lead != settings.HORIZON_LEADS[self.horizon]:
            raise ValueError(
                f"horizon {self.horizon} requires lead {settings.HORIZON_LEADS[self.horizon]}"
            )
        return self

    @property
    def name(self) -> str:
        return f"{self.variable}_{self.horizon}"

    @property
    def is_precipitation(self) -> bool:
        return self.variable == "precip"


def parse_task(text: str) -> TaskSpec:
    """
    Parse a task string like "tmp2m_34w" or "precip_56w" into a TaskSpec.
    """
    variable, _, horizon = text.strip().partition("_")
    if variable not in settings.VARIABLE_AGGREGATION or horizon not in settings.HORIZON_LEADS:
        raise ValueError(
            f"unknown task {text!r}, expected {{tmp2m,precip}}_{{12w,34w,56w}}"
        )
    return TaskSpec(
        variable=variable, horizon=horizon, lead=settings.HORIZON_LEADS[horizon]
    )


class DynppConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    span: int = Field(ge=0, description="Days included on each side of the target day of year")
    issuance_count: int = Field(ge=1, description="Number d* of averaged issuance dates")
    leads: tuple[int, ...] = Field(description="Lead set used for ensembling")
    training_years: int = Field(default=settings.DYNPP_TRAINING_YEARS, ge=0)

    @field_validator("leads")
    @classmethod
    def check_leads(cls, leads: tuple[int, ...]) -> tuple[int, ...]:
        if not leads:
            raise ValueError("lead set must not be empty")
        if min(leads) < 0 or max(leads) > settings.MAX_LEAD:
            raise ValueError(f"leads must lie in [0, {settings.MAX_LEAD}]")
        return tuple(sorted(set(leads)))

    @property
    def label(self) -> str:
        if len(self.leads) > 1 and self.leads == tuple(range(self.leads[0], self.leads[-1] + 1)):
            leads = f"{self.leads[0]}-{self.leads[-1]}"
        else:
            leads = "+".join(str(lead) for lead in self.leads)
        return f"dynpp_s{self.span}_d{self.issuance_count}_l{leads}"


class ClimppConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    span: int = Field(ge=0, description="Days included on each side of the target day of year")
    training_years: int | Literal["all"] = Field(default="all")
    loss: Loss = Field(default="RMSE")

    @property
    def years_limit(self) -> float:
        return float("inf") if self.training_years == "all" else float(self.training_years)

    @property
    def label(self) -> str:
        return f"climpp_s{self.span}_y{self.training_years}_{self.loss.lower()}"


def standard_dynpp_grid(task: TaskSpec) -> list[DynppConfig]:
    """
    Dynamical++ candidates for a task. The cold-start default (widest span, d* = 1, leads {l*}) comes first.
    """
    spans = sorted(settings.DYNPP_SPANS, reverse=True)
    lead_sets = settings.DYNPP_LEAD_SETS[task.horizon]
    default_leads = (task.lead,)
    lead_sets = [default_leads] + [leads for leads in lead_sets if leads != default_leads]
    return [
        DynppConfig(span=span, issuance_count=count, leads=leads)
        for leads in lead_sets
        for count in settings.DYNPP_ISSUANCE_COUNTS
        for span in spans
    ]


def standard_climpp_grid(task: TaskSpec) -> list[ClimppConfig]:
    """
    Climatology++ candidates for a task, widest span first.
    """
    spans = sorted(settings.CLIMPP_SPANS, reverse=True)
    if task.is_precipitation:
        return [ClimppConfig(span=span, training_years="all", loss="MSE") for span in spans]
    return [
        ClimppConfig(span=span, training_years=years, loss="RMSE")
        for years in settings.CLIMPP_TEMPERATURE_YEARS
        for span in spans
    ]


def check_standard_grid(
    task: TaskSpec, dynpp: list[DynppConfig] | None, climpp: list[ClimppConfig] | None
) -> None:
    """
    Raise ValueError if a candidate lies outside the published hyperparameter grids.
    """
    for cfg in dynpp or []:
        if cfg.span not in settings.DYNPP_SPANS:
            raise ValueError(f"{cfg.label}: span must be one of {settings.DYNPP_SPANS}")
        if cfg.issuance_count not in settings.DYNPP_ISSUANCE_COUNTS:
            raise ValueError(
                f"{cfg.label}: issuance count must be one of {settings.DYNPP_ISSUANCE_COUNTS}"
            )
        if cfg.leads not in settings.DYNPP_LEAD_SETS[task.horizon]:
            raise ValueError(f"{cfg.label}: lead set not allowed for horizon {task.horizon}")
    for cfg in climpp or []:
        if cfg.span not in settings.CLIMPP_SPANS:
            raise ValueError(f"{cfg.label}: span must be one of {settings.CLIMPP_SPANS}")
        if task.is_precipitation and (cfg.loss != "MSE" or cfg.training_years != "all"):
            raise ValueError(f"{cfg.label}: precipitation requires MSE loss and all years")
        if not task.is_precipitation and (
            cfg.loss != "RMSE" or cfg.training_years not in settings.CLIMPP_TEMPERATURE_YEARS
        ):
            raise ValueError(f"{cfg.label}: temperature requires RMSE loss and years in {{all, 29}}")


class ReforecastProtocol(BaseModel):
    """
    Matching rule of an operational mean-debiasing protocol.

    Day-window mode (ECMWF): dates from the last lookback_years years within day_window days of the target day of year.
    Exact month-day mode (CFSv2, SubX): dates with the target month and day whose year lies in hindcast_years.
    """

    model_config = ConfigDict(frozen=True)

    lookback_years: int | None = Field(default=None, ge=1)
    day_window: int | None = Field(default=None, ge=0)
    hindcast_years: tuple[int, int] | None = Field(default=None)
    era: Literal["reforecast", "forecast", "any"] = Field(default="reforecast")
    issuance_count: int = Field(default=1, ge=1, description="Issuances averaged into the raw forecast")
    issuance_stride: int = Field(default=1, ge=1, description="Days between averaged issuances")

    @model_validator(mode="after")
    def check_mode(self):
        window_mode = self.lookback_years is not None or self.day_window is not None
        if window_mode and (self.lookback_years is None or self.day_window is None):
            raise ValueError("day-window mode needs both lookback_years and day_window")
        if window_mode == (self.hindcast_years is not None):
            raise ValueError("exactly one of day-window mode and exact month-day mode must be set")
        if self.hindcast_years is not None and self.hindcast_years[0] > self.hindcast_years[1]:
            raise ValueError("hindcast_years must be (first, last)")
        return self

    @property
    def exact_month_day(self) -> bool:
        return self.hindcast_years is not None

    @classmethod
    def ecmwf(cls) -> "ReforecastProtocol":
        return cls(lookback_years=settings.ECMWF_LOOKBACK_YEARS, day_window=settings.ECMWF_DAY_WINDOW)

    @classmethod
    def cfsv2(cls) -> "ReforecastProtocol":
        return cls(hindcast_years=settings.CFSV2_HINDCAST_YEARS)


class ScenarioConfig(BaseModel):
    """
    Synthetic scenario: seasonal cycle plus autocorrelated anomalies, with ensemble forecasts carrying a known bias.
    """

    variable: Variable = Field(default="tmp2m")
    grid_rows: int = Field(default=4, ge=1)
    grid_cols: int = Field(default=4, ge=1)
    start_year: int = Field(default=2011)
    end_year: int = Field(default=2020)
    forecast_start_year: int | None = Field(
        default=None, description="Issuances from this year on are forecasts, earlier ones reforecasts"
    )
    climatology_years: int = Field(default=settings.CLIMATOLOGY_YEARS, ge=1, description="Leading years used as base period")
    seed: int = Field(default=0)
    seasonal_mean: float = Field(default=12.0)
    seasonal_amplitude: float = Field(default=10.0, ge=0)
    anomaly_scale: float = Field(default=2.0, ge=0, description="Stationary sd of the daily anomaly")
    ar_coefficient: float = Field(default=settings.SYNTH_AR_COEFFICIENT, ge=0, lt=1)
    noise_scale: float = Field(default=1.0, ge=0, description="Observation noise sigma")
    bias_constant: float = Field(default=0.0)
    bias_seasonal: float = Field(default=0.0)
    bias_regional: float = Field(default=0.0, description="Offset added over the northern half")
    wet_factor: float = Field(default=1.0, gt=0, description="Multiplicative factor over the northern half")
    members: int = Field(default=4, ge=1)
    reforecast_members: int = Field(default=3, ge=1)
    member_spread: float = Field(default=0.5, ge=0)
    skill: float = Field(default=0.8, ge=0, le=1, description="Correlation rho of forecast and true anomaly")
    leads: tuple[int, ...] = Field(default=tuple(range(0, settings.MAX_LEAD + 1)))
    issuance_interval: int = Field(default=1, ge=1, description="Days between two issuances")

    @model_validator(mode="after")
    def check_years(self):
        if self.end_year < self.start_year:
            raise ValueError("end_year must not precede start_year")
        if self.climatology_years > self.end_year - self.start_year + 1:
            raise ValueError("climatology_years exceeds the scenario length")
        return self

    @property
    def base_period(self) -> tuple[int, int]:
        return (self.start_year, self.start_year + self.climatology_years - 1)

    @property
    def first_forecast_year(self) -> int:
        if self.forecast_start_year is not None:
            return self.forecast_start_year
        return self.start_year + self.climatology_years


class VariableSpec(BaseModel):
    kind: Literal["continuous", "categorical"] = Field(description="Binning rule of the variable")
    lag_days: int | None = Field(
        default=None, ge=0, description="Days before the target date the value is read; None uses the horizon default"
    )


class RunConfig(BaseModel):
    """
    One reproducible run. Read from JSON; command-line flags override fields.
    """

    task: TaskSpec = Field(default_factory=lambda: parse_task("tmp2m_34w"))
    model: ModelName = Field(default="abc")
    observations: Path | None = Field(default=None)
    forecasts: Path | None = Field(default=None)
    model_forecasts: list[Path] = Field(default_factory=list, description="Archives combined by mmm")
    abc_forecasts: Path | None = Field(default=None)
    baseline_forecasts: Path | None = Field(default=None)
    explanatory: Path | None = Field(default=None)
    explanatory_manifest: Path | None = Field(default=None)
    climatology_years: tuple[int, int] | None = Field(default=None)
    eval_start: date | None = Field(default=None)
    eval_end: date | None = Field(default=None)
    dynpp_grid: list[DynppConfig] | None = Field(default=None)
    climpp_grid: list[ClimppConfig] | None = Field(default=None)
    allow_custom_grid: bool = Field(default=False)
    tuning_years: int = Field(default=settings.TUNING_WINDOW_YEARS, ge=1)
    protocol: ReforecastProtocol = Field(default_factory=ReforecastProtocol.ecmwf)
    probabilistic: bool = Field(default=False)
    metrics: list[MetricName] = Field(
        default_factory=lambda: ["skill", "spatial", "bias", "fraction", "crps", "bss"]
    )
    out: Path = Field(default=Path("out"))
    seed: int = Field(default=0)
    jobs: int = Field(default=1, ge=1)
    bootstrap_resamples: int = Field(default=settings.BOOTSTRAP_RESAMPLES, ge=1)
    confidence_level: float = Field(default=settings.CONFIDENCE_LEVEL, gt=0, lt=1)
    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)

    @model_validator(mode="after")
    def check_grids(self):
        if not self.allow_custom_grid:
            check_standard_grid(self.task, self.dynpp_grid, self.climpp_grid)
        if self.eval_start and self.eval_end and self.eval_end < self.eval_start:
            raise ValueError("eval_end must not precede eval_start")
        return self


def read_json_to_run_config(json_path: str | Path) -> RunConfig:
    """
    Read the JSON file containing the run configuration and return the validated RunConfig.
    Relative paths in the file are resolved against the directory of the JSON file.
    """
    json_path = Path(json_path)
    with open(json_path, "r", encoding="utf-8") as file:
        data = json.load(file)

    base = json_path.parent
    for key in ("observations", "forecasts", "abc_forecasts", "baseline_forecasts",
                "explanatory", "explanatory_manifest", "out"):
        if data.get(key):
            data[key] = str(_resolve(base, data[key]))
    if data.get("model_forecasts"):
        data["model_forecasts"] = [str(_resolve(base, p)) for p in data["model_forecasts"]]

    return RunConfig.model_validate(data)


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else base / path
