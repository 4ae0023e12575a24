# Settings for the s2s_helper project
#
# For simplicity, this file contains only constants that are shared by several
# modules. Per-run choices (paths, task, grids, seed) live in the JSON run
# configuration, see s2s_helper/pydantic_models/config_models.py

# Calendar arithmetic
# Days per year used by the year_diff / day_diff window rules
DAYS_PER_YEAR = 365.242199
HALF_YEAR = 365 / 2

# Length in days of every target period (two-week averages or totals)
PERIOD_LENGTH = 14

# Leads available in the dynamical archives, in days
MAX_LEAD = 29

# Lead l* for every horizon
HORIZON_LEADS = {"12w": 1, "34w": 15, "56w": 29}

# Aggregation of daily values into target periods
VARIABLE_AGGREGATION = {"tmp2m": "mean", "precip": "sum"}
VARIABLE_UNITS = {"tmp2m": "degC", "precip": "mm"}

# Dynamical++
DYNPP_TRAINING_YEARS = 12
DYNPP_SPANS = (0, 14, 28, 35)
DYNPP_ISSUANCE_COUNTS = (1, 7, 14, 28, 42)
# Lead sets per horizon; ranges are inclusive
DYNPP_LEAD_SETS = {
    "12w": ((1,), tuple(range(1, 9)), tuple(range(0, 30))),
    "34w": ((15,), tuple(range(15, 23)), tuple(range(0, 30)), (29,)),
    "56w": ((29,),),
}

# Climatology++
CLIMPP_SPANS = (0, 1, 7, 10)
CLIMPP_TEMPERATURE_YEARS = ("all", 29)

# Progressive tuning looks back this many years of target dates
TUNING_WINDOW_YEARS = 3

# Operational debiasing protocols
ECMWF_LOOKBACK_YEARS = 20
ECMWF_DAY_WINDOW = 6
CFSV2_HINDCAST_YEARS = (1999, 2010)
MULTIMODEL_LOOKBACK_DAYS = 6

# Quantile mapping clips the quantile rank to this band
QM_RANK_BOUNDS = (0.10, 0.90)

# LOESS debiasing
LOESS_FRACTION = 0.1
LOESS_DAYS = 365
LOESS_EPSILON = 1e-6
LOESS_MAX_RATIO = 10.0

# Years of observations averaged into the climatology when no base period is given
CLIMATOLOGY_YEARS = 5

# Verification
CONFIDENCE_LEVEL = 0.95
BOOTSTRAP_RESAMPLES = 1000
# Second tercile of the climatological distribution
BSS_QUANTILE = 2 / 3
SKILL_THRESHOLDS = tuple(round(-1.0 + 0.05 * i, 2) for i in range(41))
SEASONS = {
    12: "DJF", 1: "DJF", 2: "DJF",
    3: "MAM", 4: "MAM", 5: "MAM",
    6: "JJA", 7: "JJA", 8: "JJA",
    9: "SON", 10: "SON", 11: "SON",
}

# Opportunistic workflow
DECILE_BINS = 10
MAX_SHAPLEY_VARIABLES = 20
# Observability lags of explanatory variables, in days before the target date
EXPLANATORY_LAGS = {
    "mei": {"12w": 31, "34w": 45, "56w": 59},
    "default": {"12w": 16, "34w": 30, "56w": 44},
}

# Synthetic scenarios
SYNTH_AR_COEFFICIENT = 0.7
SYNTH_GRID_LATS = (25.0, 50.0)
SYNTH_GRID_LONS = (-125.0, -67.0)

# Forecast CSV member id for deterministic outputs
DETERMINISTIC_MEMBER = -1

# Logging
LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
