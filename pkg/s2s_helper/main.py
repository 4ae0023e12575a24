import argparse
import logging
import os
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from s2s_helper import settings
from s2s_helper.baselines.loess import LoessDebiasing
from s2s_helper.baselines.operational import OperationalDebiasing, build_multimodel_archive
from s2s_helper.baselines.quantile_mapping import QuantileMapping
from s2s_helper.correctors.abc_ensemble import (
    AdaptiveBiasCorrection,
    corrected_member_stack,
    pooled_member_stack,
)
from s2s_helper.correctors.climatology_pp import ClimatologyPlusPlus
from s2s_helper.correctors.dynamical_pp import DynamicalPlusPlus
from s2s_helper.correctors.persistence_pp import PersistencePlusPlus
from s2s_helper.correctors.training import LeakageGuard
from s2s_helper.correctors.tuning import ProgressiveTuner
from s2s_helper.dataset_io import (
    load_dataset,
    load_explanatory,
    load_manifest,
    store_dataset,
    store_frame,
    store_json,
)
from s2s_helper.errors import ConfigError, EmptyWindowError, S2SHelperError
from s2s_helper.explain import explanatory_lags, lag_explanatory, run_opportunistic_workflow
from s2s_helper.grid_core import ERA_CODES, FieldSeries, ForecastArchive, as_date, build_climatology
from s2s_helper.metrics import (
    bias_map,
    brier_skill_score,
    fraction_above_curve,
    grid_frame,
    mean_skill,
    probabilistic_scores,
    skill_series,
    spatial_skill,
    tercile_thresholds,
)
from s2s_helper.pydantic_models.artifact_models import CorrectionArtifact, ProbabilisticSummary
from s2s_helper.pydantic_models.config_models import (
    RunConfig,
    standard_climpp_grid,
    standard_dynpp_grid,
    read_json_to_run_config,
)
from s2s_helper.scenario_generator import generate_scenario, save_generated_scenario
from s2s_helper.seeding import derive_seed

logger = logging.getLogger(__name__)

LOCK_NAME = ".s2s-helper.lock"


def setup_logging(level: int = logging.INFO) -> None:
    # Set up logger and logger format
    logging.basicConfig(level=level, format=settings.LOG_FORMAT, force=True)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--out", type=Path, help="Output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--task", help="{tmp2m,precip}_{12w,34w,56w}")
    common.add_argument("--model", choices=["dynpp", "climpp", "perpp", "abc", "qm", "loess", "opdebias", "mmm"])
    common.add_argument("--observations", type=Path)
    common.add_argument("--forecasts", type=Path)
    common.add_argument("--eval-start", dest="eval_start")
    common.add_argument("--eval-end", dest="eval_end")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", action="store_true")
    verbosity.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="s2s-helper", description="Bias correction and verification of subseasonal forecasts"
    )
    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("generate", parents=[common], help="Write a synthetic scenario")

    correct = commands.add_parser("correct", parents=[common], help="Progressive corrected forecasts")
    correct.add_argument("--probabilistic", action="store_true", default=None)
    correct.add_argument("--allow-custom-grid", dest="allow_custom_grid", action="store_true", default=None)
    correct.add_argument("--model-forecasts", dest="model_forecasts", type=Path, nargs="+")

    evaluate = commands.add_parser("evaluate", parents=[common], help="Skill and probabilistic scores")
    evaluate.add_argument("--metrics", nargs="+", choices=["skill", "spatial", "bias", "fraction", "crps", "bss"])

    explain = commands.add_parser("explain", parents=[common], help="Opportunistic ABC workflow")
    explain.add_argument("--abc-forecasts", dest="abc_forecasts", type=Path)
    explain.add_argument("--baseline-forecasts", dest="baseline_forecasts", type=Path)
    explain.add_argument("--explanatory", type=Path)
    explain.add_argument("--manifest", dest="explanatory_manifest", type=Path)
    return parser


_OVERRIDES = (
    "out", "seed", "jobs", "task", "model", "observations", "forecasts", "eval_start", "eval_end",
    "probabilistic", "allow_custom_grid", "model_forecasts", "metrics", "abc_forecasts",
    "baseline_forecasts", "explanatory", "explanatory_manifest",
)


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """
    Read the JSON configuration (if given) and apply the command-line overrides; flags win.
    """
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"configuration {args.config} does not exist")
        cfg = read_json_to_run_config(args.config)
    else:
        cfg = RunConfig()
    data = cfg.model_dump()
    for key in _OVERRIDES:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    return RunConfig.model_validate(data)


def _required_inputs(command: str, cfg: RunConfig) -> dict[str, Path | None]:
    if command == "correct":
        inputs = {"observations": cfg.observations}
        if cfg.model == "mmm":
            if not cfg.model_forecasts:
                raise ConfigError("model mmm needs model_forecasts")
            inputs.update({f"model_forecasts[{i}]": p for i, p in enumerate(cfg.model_forecasts)})
        else:
            inputs["forecasts"] = cfg.forecasts
        return inputs
    if command == "evaluate":
        return {"observations": cfg.observations, "forecasts": cfg.forecasts}
    if command == "explain":
        inputs = {
            "observations": cfg.observations,
            "abc_forecasts": cfg.abc_forecasts,
            "baseline_forecasts": cfg.baseline_forecasts,
            "explanatory": cfg.explanatory,
        }
        if cfg.explanatory_manifest is not None:
            inputs["explanatory_manifest"] = cfg.explanatory_manifest
        return inputs
    return {}


def check_inputs(command: str, cfg: RunConfig) -> None:
    for name, path in _required_inputs(command, cfg).items():
        if path is None:
            raise ConfigError(f"{command} needs {name}")
        if not Path(path).exists():
            raise FileNotFoundError(f"{name} {path} does not exist")


@contextmanager
def output_lock(out_dir: Path):
    """
    One process per output directory: the lock file is created exclusively and removed on exit.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        handle = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise S2SHelperError(f"{out_dir} is locked by another run, remove {lock} if it is stale")
    try:
        os.write(handle, str(os.getpid()).encode())
        os.close(handle)
        yield
    finally:
        lock.unlink(missing_ok=True)


@contextmanager
def staged_outputs(out_dir: Path):
    """
    Outputs are written into a staging directory and moved into out_dir only when the command succeeds.
    """
    staging = Path(tempfile.mkdtemp(prefix=".staging-", dir=out_dir))
    try:
        yield staging
        for path in sorted(staging.iterdir()):
            os.replace(path, out_dir / path.name)
    finally:
        shutil.rmtree(staging, ignore_errors=True)


def _base_period(cfg: RunConfig, obs: FieldSeries) -> tuple[int, int]:
    if cfg.climatology_years is not None:
        return cfg.climatology_years
    first, last = obs.dates[0].year, obs.dates[-1].year
    return first, min(first + settings.CLIMATOLOGY_YEARS - 1, last)


def _load_observations(cfg: RunConfig) -> FieldSeries:
    return load_dataset(cfg.observations, "observation", cfg.task.variable)


def _load_archive(path: Path, cfg: RunConfig, obs: FieldSeries) -> ForecastArchive:
    archive = load_dataset(path, "forecast", cfg.task.variable)
    if archive.grid != obs.grid:
        raise ConfigError(f"{path} and {cfg.observations} do not share the same grid points in the same order")
    return archive


def _in_range(ordinals: np.ndarray, cfg: RunConfig) -> np.ndarray:
    keep = np.ones(ordinals.size, dtype=bool)
    if cfg.eval_start is not None:
        keep &= ordinals >= cfg.eval_start.toordinal()
    if cfg.eval_end is not None:
        keep &= ordinals <= cfg.eval_end.toordinal()
    return ordinals[keep]


def correction_targets(archive: ForecastArchive, cfg: RunConfig) -> np.ndarray:
    """
    Target dates issued in the forecast era at lead l*, restricted to the evaluation range.
    """
    lead = cfg.task.lead
    if not archive.has_lead(lead):
        raise ConfigError(f"the forecasts have no lead {lead} required by {cfg.task.name}")
    issued = (archive.era[:, archive.lead_index(lead)] == ERA_CODES["forecast"]).any(axis=1)
    return _in_range(archive.issuances[issued] + lead, cfg)


def cmd_generate(cfg: RunConfig, out_dir: Path) -> list[Path]:
    scenario_cfg = cfg.scenario.model_copy(update={"seed": cfg.seed, "variable": cfg.task.variable})
    return save_generated_scenario(generate_scenario(scenario_cfg), out_dir)


def cmd_correct(cfg: RunConfig, out_dir: Path) -> list[Path]:
    task = cfg.task
    obs = _load_observations(cfg)
    if cfg.model == "mmm":
        models = [_load_archive(path, cfg, obs) for path in cfg.model_forecasts]
        archive = build_multimodel_archive(models)
    else:
        archive = _load_archive(cfg.forecasts, cfg, obs)
    targets = correction_targets(archive, cfg)
    if targets.size == 0:
        raise ConfigError("no target dates to correct in the evaluation range")
    guard = LeakageGuard(task.lead, task.period_length, strict=True)
    dynpp_grid = cfg.dynpp_grid or standard_dynpp_grid(task)
    climpp_grid = cfg.climpp_grid or standard_climpp_grid(task)
    artifact = CorrectionArtifact(
        task=task, model=cfg.model, n_targets=int(targets.size), n_forecasts=0,
        first_target=as_date(int(targets[0])), last_target=as_date(int(targets[-1])),
        probabilistic=cfg.probabilistic,
    )
    logger.info(f"Correcting {targets.size} target dates of {task.name} with {cfg.model}")

    components = None
    if cfg.model == "abc":
        clim = build_climatology(obs, _base_period(cfg, obs))
        abc = AdaptiveBiasCorrection(
            task, archive, obs, clim, dynpp_grid, climpp_grid, cfg.tuning_years, guard, cfg.jobs
        )
        result = abc.run(targets)
        forecasts, components = result.forecasts, result.components
        artifact.dynpp_grid, artifact.climpp_grid, artifact.tuning = dynpp_grid, climpp_grid, result.ledgers
        if result.perpp_fit is not None:
            artifact.perpp = result.perpp_fit.to_record(obs.grid)
    elif cfg.model in ("dynpp", "climpp"):
        if cfg.model == "dynpp":
            corrector, grid = DynamicalPlusPlus(task, archive, obs, guard), dynpp_grid
            artifact.dynpp_grid = grid
        else:
            corrector, grid = ClimatologyPlusPlus(task, obs, guard), climpp_grid
            artifact.climpp_grid = grid
        tuned = ProgressiveTuner(cfg.model, corrector, grid, task, obs, cfg.tuning_years, guard, cfg.jobs).run(targets)
        forecasts = tuned.forecasts
        artifact.tuning = [tuned.ledger]
    elif cfg.model == "perpp":
        clim = build_climatology(obs, _base_period(cfg, obs))
        perpp = PersistencePlusPlus(task, archive, obs, clim, guard, cfg.jobs)
        forecasts = perpp.forecast_many(targets)
        if perpp.last_fit is not None:
            artifact.perpp = perpp.last_fit.to_record(obs.grid)
    elif cfg.model == "qm":
        qm = QuantileMapping(task, archive, obs, guard)
        forecasts = qm.forecast_many(targets)
        if qm.last_model is not None:
            artifact.quantile_map = qm.last_model.to_record()
    elif cfg.model == "loess":
        loess = LoessDebiasing(task, archive, obs, guard)
        forecasts = loess.forecast_many(targets)
        if loess.last_fit is not None:
            artifact.loess = loess.last_fit.to_record()
    elif cfg.model == "opdebias":
        forecasts = OperationalDebiasing(task, archive, obs, cfg.protocol, guard).forecast_many(targets)
        artifact.protocol = cfg.protocol
    else:
        forecasts = archive.ensemble_mean_at(targets - task.lead, task.lead)
        guard.record_issuances(targets, targets - task.lead)

    written = []
    corrected = ForecastArchive.from_targets(
        obs.grid, targets, task.lead, forecasts[:, None], variable=task.variable, units=obs.units
    )
    artifact.n_forecasts = int(corrected.issuances.size)
    path = out_dir / "forecasts.csv"
    store_dataset(corrected, path)
    written.append(path)

    if cfg.probabilistic:
        if components is not None:
            complete = np.isfinite(forecasts).all(axis=1)
            members = pooled_member_stack(archive, task, targets, components)
            members[~complete] = np.nan
        else:
            members = corrected_member_stack(archive, task, targets, forecasts)
        ensemble = ForecastArchive.from_targets(
            obs.grid, targets, task.lead, members, members=tuple(range(members.shape[1])),
            variable=task.variable, units=obs.units,
        )
        path = out_dir / "forecast_members.csv"
        store_dataset(ensemble, path)
        written.append(path)

    artifact.leakage = guard.summary()
    path = out_dir / "correction.json"
    store_json(artifact, path)
    written.append(path)
    logger.info(f"{artifact.n_forecasts} of {targets.size} target dates corrected, leakage audit {guard.summary()}")
    return written


def _member_stack(archive: ForecastArchive, lead: int, dates: np.ndarray) -> np.ndarray:
    values = archive.values[:, archive.lead_index(lead)]
    idx = np.searchsorted(archive.issuances, dates - lead)
    return values[idx]


def cmd_evaluate(cfg: RunConfig, out_dir: Path) -> list[Path]:
    task = cfg.task
    obs = _load_observations(cfg)
    archive = _load_archive(cfg.forecasts, cfg, obs)
    base_period = _base_period(cfg, obs)
    clim = build_climatology(obs, base_period)
    series = archive.lead_series(task.lead)
    series = series.select(np.isin(series.ordinals, _in_range(series.ordinals, cfg)))
    written = []
    summary = None
    spatial = None

    if "skill" in cfg.metrics:
        skills = skill_series(series, obs, clim)
        frame = skills.reset_index()
        frame["date"] = [d.isoformat() for d in frame["date"]]
        path = out_dir / "skill.csv"
        store_frame(frame, path)
        written.append(path)
        summary = mean_skill(skills, cfg.confidence_level, cfg.bootstrap_resamples, derive_seed(cfg.seed, task.name, "skill"))
        logger.info(f"Mean skill {summary.mean:.4f} over {summary.n_dates} dates")

    if "spatial" in cfg.metrics or "fraction" in cfg.metrics:
        spatial = spatial_skill(series, obs, clim)
    if "spatial" in cfg.metrics:
        path = out_dir / "spatial_skill.csv"
        store_frame(grid_frame(obs.grid, spatial, "spatial_skill"), path)
        written.append(path)
    if "fraction" in cfg.metrics:
        path = out_dir / "fraction_above.csv"
        store_frame(fraction_above_curve(spatial), path)
        written.append(path)
    if "bias" in cfg.metrics:
        path = out_dir / "bias_map.csv"
        store_frame(grid_frame(obs.grid, bias_map(series, obs), "bias"), path)
        written.append(path)

    if {"crps", "bss"} & set(cfg.metrics):
        if archive.members.size < 2:
            logger.warning("Forecasts are deterministic, CRPS and BSS are skipped")
        else:
            dates = np.intersect1d(series.ordinals, obs.ordinals[obs.complete_rows()])
            members = _member_stack(archive, task.lead, dates)
            members = members[:, np.isfinite(members).any(axis=(0, 2))]
            complete = np.isfinite(members).all(axis=(1, 2))
            if not complete.all():
                logger.warning(f"{int((~complete).sum())} dates without the full ensemble are left out of CRPS and BSS")
            dates, members = dates[complete], members[complete]
            y = obs.rows_at(dates)
            thresholds = tercile_thresholds(obs, base_period).series(dates)
            known = np.isfinite(thresholds).all(axis=1)
            dates, members, y, thresholds = dates[known], members[known], y[known], thresholds[known]
            scores = probabilistic_scores(members, y, thresholds, [as_date(int(d)).isoformat() for d in dates])
            path = out_dir / "probabilistic.csv"
            store_frame(scores, path)
            written.append(path)

            ensemble = ProbabilisticSummary(n_dates=int(dates.size), n_members=int(members.shape[1]))
            if "crps" in cfg.metrics and dates.size:
                ensemble.crps = float(scores["crps"].mean())
            if "bss" in cfg.metrics:
                try:
                    ensemble.bss = brier_skill_score(members, y, thresholds)
                except EmptyWindowError as e:
                    logger.warning(f"BSS undefined: {e}")
            logger.info(f"Ensemble scores over {ensemble.n_dates} dates: CRPS {ensemble.crps}, BSS {ensemble.bss}")
            path = out_dir / "probabilistic_summary.json"
            store_json(ensemble, path)
            written.append(path)
            if summary is not None:
                summary.crps, summary.bss = ensemble.crps, ensemble.bss

    if summary is not None:
        path = out_dir / "summary.json"
        store_json(summary, path)
        written.append(path)
    return written


def cmd_explain(cfg: RunConfig, out_dir: Path) -> list[Path]:
    task = cfg.task
    obs = _load_observations(cfg)
    clim = build_climatology(obs, _base_period(cfg, obs))
    skills = {}
    for name, path in (("abc", cfg.abc_forecasts), ("baseline", cfg.baseline_forecasts)):
        skills[name] = skill_series(_load_archive(path, cfg, obs).lead_series(task.lead), obs, clim)

    table = load_explanatory(cfg.explanatory)
    if cfg.explanatory_manifest is not None:
        manifest = load_manifest(cfg.explanatory_manifest)
    else:
        logger.warning("No explanatory manifest given, treating every variable as continuous")
        manifest = {}
    unknown = sorted(set(manifest) - set(table.columns))
    if unknown:
        raise ConfigError(f"manifest names variables missing from {cfg.explanatory}: {unknown}")
    kinds = {name: manifest[name].kind if name in manifest else "continuous" for name in table.columns}
    dates = sorted(set(skills["abc"].index) | set(skills["baseline"].index))
    lagged = lag_explanatory(table, explanatory_lags(list(table.columns), task, manifest), dates)

    result = run_opportunistic_workflow(
        task, skills["abc"], skills["baseline"], lagged, kinds,
        cfg.eval_start, cfg.eval_end, cfg.confidence_level, cfg.bootstrap_resamples, cfg.seed, cfg.jobs,
    )
    written = []
    path = out_dir / "explanation.json"
    store_json(result.report, path)
    written.append(path)
    path = out_dir / "shapley_values.csv"
    store_frame(result.shapley, path)
    written.append(path)
    path = out_dir / "choices.csv"
    store_frame(result.choices, path)
    written.append(path)
    path = out_dir / "opportunistic_curve.csv"
    store_frame(result.curve.reset_index(), path)
    written.append(path)
    return written


COMMANDS = {
    "generate": cmd_generate,
    "correct": cmd_correct,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO)

    try:
        cfg = load_run_config(args)
        check_inputs(args.command, cfg)
    except (ConfigError, ValidationError, FileNotFoundError, ValueError) as e:
        print(f"s2s-helper {args.command}: {e}", file=sys.stderr)
        return 2

    try:
        with output_lock(cfg.out):
            with staged_outputs(cfg.out) as staging:
                written = COMMANDS[args.command](cfg, staging)
    except (ConfigError, FileNotFoundError) as e:
        print(f"s2s-helper {args.command}: {e}", file=sys.stderr)
        return 2
    except S2SHelperError as e:
        print(f"s2s-helper {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"s2s-helper {args.command}: {e}", file=sys.stderr)
        return 1

    logger.info(f"{args.command} wrote {len(written)} files to {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
