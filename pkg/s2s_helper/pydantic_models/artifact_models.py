from datetime import date
from typing import Literal

from pydantic import BaseModel, Field

from s2s_helper.pydantic_models.config_models import (
    ClimppConfig,
    DynppConfig,
    ReforecastProtocol,
    TaskSpec,
)


class SkillSummary(BaseModel):
    """
    Progressive-validation summary of per-date skills.
    Undefined skills are stored as None and excluded from every mean.
    """

    per_date: dict[date, float | None] = Field(description="Skill per target date")
    mean: float = Field(description="Mean over defined per-date skills")
    n_dates: int = Field(description="Number of dates with a defined skill")
    n_undefined: int = Field(default=0)
    seasons: dict[str, float] = Field(default_factory=dict, description="Mean skill per DJF/MAM/JJA/SON")
    ci_low: float | None = Field(default=None)
    ci_high: float | None = Field(default=None)
    level: float | None = Field(default=None, description="Confidence level of the bootstrap interval")
    crps: float | None = Field(default=None, description="Mean CRPS when ensembles were evaluated")
    bss: float | None = Field(default=None, description="Brier skill score when ensembles were evaluated")


class ProbabilisticSummary(BaseModel):
    """
    Ensemble scores over the evaluated dates that carry the full ensemble.
    """

    n_dates: int = Field(description="Dates scored")
    n_members: int = Field(description="Ensemble members per date")
    crps: float | None = Field(default=None, description="Mean CRPS over dates and grid points")
    bss: float | None = Field(default=None, description="Brier skill score; None when the reference score is zero")


class TuningEntry(BaseModel):
    target_date: date
    selected: str = Field(description="Label of the selected configuration")
    cold_start: bool = Field(default=False, description="No candidate had a scored past date")
    scores: dict[str, float] = Field(
        default_factory=dict, description="Mean progressive geographic RMSE per scored candidate"
    )


class TuningLedger(BaseModel):
    model: Literal["dynpp", "climpp"]
    candidates: list[str]
    window_years: int
    entries: list[TuningEntry] = Field(default_factory=list)


class PerppCoefficientsRecord(BaseModel):
    """
    Persistence++ coefficients of one fit, keyed by grid point.
    """

    t_star: date
    regressors: list[str] = Field(
        default=["intercept", "climatology", "lag1_obs", "lag2_obs", "ensemble_forecast"]
    )
    coefficients: dict[str, list[float]] = Field(description='"lat,lon" -> 5 coefficients')
    rank: dict[str, int] = Field(default_factory=dict)
    n_rows: dict[str, int] = Field(default_factory=dict)


class LoessCorrectionRecord(BaseModel):
    mode: Literal["additive", "multiplicative"]
    cutoff: date
    correction: dict[str, list[float]] = Field(description='"lat,lon" -> 365 month-day corrections')


class QuantileMapRecord(BaseModel):
    cutoff: date
    samples: dict[str, int] = Field(description='"lat,lon" -> training pairs summed over month-days')


class CorrectionArtifact(BaseModel):
    """
    Everything needed to audit one `correct` run.
    """

    task: TaskSpec
    model: str
    n_targets: int
    n_forecasts: int
    first_target: date | None = None
    last_target: date | None = None
    probabilistic: bool = False
    dynpp_grid: list[DynppConfig] = Field(default_factory=list)
    climpp_grid: list[ClimppConfig] = Field(default_factory=list)
    protocol: ReforecastProtocol | None = None
    tuning: list[TuningLedger] = Field(default_factory=list)
    perpp: PerppCoefficientsRecord | None = None
    loess: LoessCorrectionRecord | None = None
    quantile_map: QuantileMapRecord | None = None
    leakage: dict[str, int | None] = Field(default_factory=dict, description="LeakageGuard counters")


class BinImpact(BaseModel):
    variable: str
    bin: int
    n: int = Field(description="Subjects in the bin")
    probability: float = Field(description="Fraction of subjects with a positive Shapley value")
    ci_low: float
    ci_high: float
    flag: Literal["high", "low", "intermediate"]
    lower_edge: float | None = Field(default=None, description="Left-closed bin boundary, continuous only")
    category: float | None = Field(default=None, description="Bin value, categorical only")


class ExplanationReport(BaseModel):
    task: TaskSpec
    variables: list[str]
    n_subjects: int
    evaluation_start: date
    evaluation_end: date
    effects: dict[str, float]
    normalized_effects: dict[str, float]
    bins: list[BinImpact]
    k_star: int
    blended_skill: float
    abc_skill: float
    baseline_skill: float
    curve: dict[int, float] = Field(description="Mean blended skill per k")
    most_impacted: dict[str, date | None] = Field(
        default_factory=dict, description="Date most impacted by each variable in its high bins"
    )
    deployment_dates: int = Field(default=0, description="Dates after the evaluation period with a choice")
