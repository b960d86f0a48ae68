"""Command-line surface: config loading, subcommands, exit codes.

Commands stay thin; everything they do is a call into the library plus
formatting.  Exit codes: 0 success, 1 pipeline failure, 2 usage/config/
parse error, 3 unit-not-found from an external locator.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import yaml

from . import bench, llm, runlog
from .bench import MeterSet
from .catalog import Catalog, load_catalog, load_seed_catalog
from .diagnose import (
    AblationMode,
    BaselineInvalid,
    Commands,
    PipelineConfig,
    RunContext,
    run_app,
)
from .flame import MalformedLine, parse_collapsed, top_hotspots
from .metrics import Metric, MissingMetric
from .runlog import ChecksumError
from .targetmap import (
    CommandLocator,
    Granularity,
    IndexEntry,
    SymbolIndex,
    UnitNotFound,
)
from .verify import MatchMode

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PIPELINE = 1
EXIT_USAGE = 2
EXIT_UNIT_NOT_FOUND = 3

MEASUREMENT_SCHEMA_VERSION = 1

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")


class ConfigError(ValueError):
    """Configuration problem, reported with the offending field path."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass
class RunConfig:
    """Everything a run needs, loaded and validated from one YAML file."""

    workdir: str
    catalog: Catalog
    index: SymbolIndex | None
    commands: Commands
    backend_config: llm.BackendConfig
    pipeline: PipelineConfig
    meters: MeterSet
    golden: bytes | None
    match_mode: MatchMode
    report_dir: str
    warmups: int
    runs: int
    timeout: float
    lock_path: str
    anchor: str
    hotspot_k: int


# --- config parsing helpers ---


def _require_mapping(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(path, f"expected a mapping, got {type(value).__name__}")
    return value


def _reject_unknown(mapping: dict, allowed: set, path: str) -> None:
    for key in mapping:
        if key not in allowed:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(where, "unknown field")


def _get_str(mapping: dict, key: str, path: str, required: bool = False) -> str | None:
    if key not in mapping or mapping[key] is None:
        if required:
            raise ConfigError(f"{path}{key}", "required field is missing")
        return None
    value = mapping[key]
    if not isinstance(value, str) or not value:
        raise ConfigError(f"{path}{key}", "expected a non-empty string")
    return value


def _get_int(mapping: dict, key: str, path: str, default: int) -> int:
    if key not in mapping or mapping[key] is None:
        return default
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}{key}", "expected an integer")
    return value


def _get_number(mapping: dict, key: str, path: str, default: float) -> float:
    if key not in mapping or mapping[key] is None:
        return default
    value = mapping[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}{key}", "expected a number")
    return float(value)


def _existing_path(base: Path, raw: str, path: str) -> Path:
    resolved = (base / raw).resolve()
    if not resolved.exists():
        raise ConfigError(path, f"referenced path {resolved} does not exist")
    return resolved


def _interpolate_api_key(raw: str) -> str:
    match = _ENV_REF.fullmatch(raw)
    if not match:
        return raw
    name = match.group(1)
    value = os.environ.get(name)
    if value is None:
        raise ConfigError("backend.api_key", f"environment variable {name} is not set")
    return value


def _parse_commands(doc: dict, base: Path) -> Commands:
    raw = _require_mapping(doc.get("commands"), "commands")
    _reject_unknown(raw, {"build", "test", "run", "profiler", "ast", "locator"}, "commands")
    locator_cmd = _get_str(raw, "locator", "commands.", required=False)
    return Commands(
        build=_get_str(raw, "build", "commands.", required=True),
        test=_get_str(raw, "test", "commands.", required=True),
        run=_get_str(raw, "run", "commands.", required=True),
        profiler=_get_str(raw, "profiler", "commands."),
        ast=_get_str(raw, "ast", "commands."),
        locator=CommandLocator(locator_cmd) if locator_cmd else None,
    )


def _parse_backend(doc: dict, base: Path) -> llm.BackendConfig:
    raw = _require_mapping(doc.get("backend"), "backend")
    _reject_unknown(
        raw, {"kind", "transcript", "endpoint", "model", "api_key", "temperature"}, "backend"
    )
    kind = _get_str(raw, "kind", "backend.", required=True)
    temperature = _get_number(raw, "temperature", "backend.", llm.DEFAULT_TEMPERATURE)
    if kind == "scripted":
        transcript = _get_str(raw, "transcript", "backend.", required=True)
        transcript_path = _existing_path(base, transcript, "backend.transcript")
        kwargs = {"transcript": str(transcript_path)}
    elif kind == "remote_chat":
        api_key = _get_str(raw, "api_key", "backend.")
        kwargs = {
            "endpoint": _get_str(raw, "endpoint", "backend.", required=True),
            "model": _get_str(raw, "model", "backend.", required=True),
            "api_key": _interpolate_api_key(api_key) if api_key else None,
        }
    else:
        raise ConfigError("backend.kind", f"unknown backend kind {kind!r}")
    try:
        return llm.BackendConfig(kind=kind, temperature=temperature, **kwargs)
    except ValueError as exc:
        raise ConfigError("backend", str(exc)) from None


def _parse_pipeline(doc: dict) -> PipelineConfig:
    raw = doc.get("pipeline") or {}
    raw = _require_mapping(raw, "pipeline")
    allowed = {
        "k",
        "max_iterations",
        "max_attempts",
        "ablation",
        "granularity",
        "objective",
        "temperature",
        "loc_limit",
        "improvement_threshold",
    }
    _reject_unknown(raw, allowed, "pipeline")

    kwargs: dict = {
        "k": _get_int(raw, "k", "pipeline.", 1),
        "max_iterations": _get_int(raw, "max_iterations", "pipeline.", 1),
        "max_attempts": _get_int(raw, "max_attempts", "pipeline.", 3),
        "loc_limit": _get_int(raw, "loc_limit", "pipeline.", 1000),
        "temperature": _get_number(raw, "temperature", "pipeline.", llm.DEFAULT_TEMPERATURE),
        "improvement_threshold": _get_number(raw, "improvement_threshold", "pipeline.", 0.10),
    }
    ablation = _get_str(raw, "ablation", "pipeline.")
    if ablation is not None:
        try:
            kwargs["ablation"] = AblationMode(ablation)
        except ValueError:
            choices = ", ".join(m.value for m in AblationMode)
            raise ConfigError("pipeline.ablation", f"must be one of: {choices}") from None
    granularity = _get_str(raw, "granularity", "pipeline.")
    if granularity is not None:
        try:
            kwargs["granularity"] = Granularity(granularity)
        except ValueError:
            choices = ", ".join(g.value for g in Granularity)
            raise ConfigError("pipeline.granularity", f"must be one of: {choices}") from None
    if raw.get("objective") is not None:
        objective_raw = _require_mapping(raw["objective"], "pipeline.objective")
        objective = {}
        for name, weight in objective_raw.items():
            try:
                metric = Metric(name)
            except ValueError:
                choices = ", ".join(m.value for m in Metric)
                raise ConfigError(
                    f"pipeline.objective.{name}", f"unknown metric; choose from: {choices}"
                ) from None
            if isinstance(weight, bool) or not isinstance(weight, (int, float)) or weight <= 0:
                raise ConfigError(f"pipeline.objective.{name}", "weight must be a positive number")
            objective[metric] = float(weight)
        kwargs["objective"] = objective
    try:
        return PipelineConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError("pipeline", str(exc)) from None


def _parse_index(doc: dict, workdir: Path) -> SymbolIndex | None:
    raw = doc.get("index")
    if raw is None:
        return None
    if not isinstance(raw, list) or not raw:
        raise ConfigError("index", "expected a non-empty list of entries")
    entries = []
    for i, item in enumerate(raw):
        path = f"index[{i}]"
        item = _require_mapping(item, path)
        _reject_unknown(item, {"key", "file", "unit", "granularity"}, path)
        file_rel = _get_str(item, "file", f"{path}.", required=True)
        file_path = _existing_path(workdir, file_rel, f"{path}.file")
        granularity = None
        raw_gran = _get_str(item, "granularity", f"{path}.")
        if raw_gran is not None:
            try:
                granularity = Granularity(raw_gran)
            except ValueError:
                raise ConfigError(f"{path}.granularity", f"unknown granularity {raw_gran!r}") from None
        entries.append(
            IndexEntry(
                key=_get_str(item, "key", f"{path}.", required=True),
                file=str(file_path),
                unit=_get_str(item, "unit", f"{path}.", required=True),
                granularity=granularity,
            )
        )
    return SymbolIndex(entries=tuple(entries))


def _parse_meters(doc: dict) -> MeterSet:
    raw = doc.get("meters")
    if raw is None:
        return MeterSet()
    raw = _require_mapping(raw, "meters")
    _reject_unknown(raw, {"cycles", "energy", "throughput_pattern", "throughput_unit"}, "meters")
    pattern = _get_str(raw, "throughput_pattern", "meters.")
    unit = _get_str(raw, "throughput_unit", "meters.")
    if (pattern is None) != (unit is None):
        raise ConfigError(
            "meters.throughput_unit", "throughput_pattern and throughput_unit go together"
        )
    if pattern is not None:
        try:
            re.compile(pattern)
        except re.error as exc:
            raise ConfigError("meters.throughput_pattern", f"invalid regex: {exc}") from None
    return MeterSet(
        cycle_counter=_get_str(raw, "cycles", "meters."),
        energy_meter=_get_str(raw, "energy", "meters."),
        throughput_pattern=pattern,
        throughput_unit=unit,
    )


_TOP_LEVEL_KEYS = {
    "workdir",
    "catalog",
    "index",
    "commands",
    "backend",
    "pipeline",
    "measurement",
    "meters",
    "golden_output",
    "match_mode",
    "report_dir",
    "anchor",
    "hotspot_k",
}


def _apply_override(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = {}
            node[key] = child
        if not isinstance(child, dict):
            raise ConfigError(dotted, "cannot override inside a non-mapping field")
        node = child
    node[keys[-1]] = value


def load_run_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Parse and validate a run configuration file.

    Paths inside the file resolve relative to the file itself, except
    index entries, which resolve relative to the working tree they name.
    ``overrides`` maps dotted field paths (as the optimize flags produce)
    onto raw values applied before validation.
    """
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError("config", f"{path} does not exist")
    try:
        doc = yaml.safe_load(config_path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from None
    doc = _require_mapping(doc, "config")
    for dotted, value in (overrides or {}).items():
        _apply_override(doc, dotted, value)
    _reject_unknown(doc, _TOP_LEVEL_KEYS, "")

    base = config_path.parent
    workdir_raw = _get_str(doc, "workdir", "", required=True)
    workdir = _existing_path(base, workdir_raw, "workdir")
    if not workdir.is_dir():
        raise ConfigError("workdir", f"{workdir} is not a directory")

    catalog_raw = _get_str(doc, "catalog", "")
    if catalog_raw is None:
        catalog = load_seed_catalog()
    else:
        catalog_path = _existing_path(base, catalog_raw, "catalog")
        try:
            catalog = load_catalog(catalog_path.read_bytes())
        except ValueError as exc:
            raise ConfigError("catalog", str(exc)) from None

    measurement = _require_mapping(doc.get("measurement") or {}, "measurement")
    _reject_unknown(measurement, {"warmups", "runs", "timeout", "lock_path"}, "measurement")
    warmups = _get_int(measurement, "warmups", "measurement.", bench.DEFAULT_WARMUPS)
    runs = _get_int(measurement, "runs", "measurement.", bench.DEFAULT_RUNS)
    if warmups < 0:
        raise ConfigError("measurement.warmups", "must be >= 0")
    if runs < 1:
        raise ConfigError("measurement.runs", "must be >= 1")
    timeout = _get_number(measurement, "timeout", "measurement.", bench.DEFAULT_RUN_TIMEOUT_S)
    if timeout <= 0:
        raise ConfigError("measurement.timeout", "must be > 0")
    lock_path = _get_str(measurement, "lock_path", "measurement.") or bench.DEFAULT_LOCK_PATH

    golden = None
    golden_raw = _get_str(doc, "golden_output", "")
    if golden_raw is not None:
        golden = _existing_path(base, golden_raw, "golden_output").read_bytes()
    match_raw = _get_str(doc, "match_mode", "")
    if match_raw is None:
        match_mode = MatchMode.EXACT
    else:
        try:
            match_mode = MatchMode(match_raw)
        except ValueError:
            choices = ", ".join(m.value for m in MatchMode)
            raise ConfigError("match_mode", f"must be one of: {choices}") from None

    anchor = _get_str(doc, "anchor", "") or "*"
    hotspot_k = _get_int(doc, "hotspot_k", "", 10)
    if hotspot_k < 1:
        raise ConfigError("hotspot_k", "must be >= 1")

    report_raw = _get_str(doc, "report_dir", "") or "perfloop-run"
    report_dir = str((base / report_raw).resolve())

    return RunConfig(
        workdir=str(workdir),
        catalog=catalog,
        index=_parse_index(doc, workdir),
        commands=_parse_commands(doc, base),
        backend_config=_parse_backend(doc, base),
        pipeline=_parse_pipeline(doc),
        meters=_parse_meters(doc),
        golden=golden,
        match_mode=match_mode,
        report_dir=report_dir,
        warmups=warmups,
        runs=runs,
        timeout=timeout,
        lock_path=lock_path,
        anchor=anchor,
        hotspot_k=hotspot_k,
    )


def build_run_context(config: RunConfig) -> RunContext:
    return RunContext(
        config=config.pipeline,
        backend=llm.make_backend(config.backend_config),
        meters=config.meters,
        commands=config.commands,
        workdir=config.workdir,
        catalog=config.catalog,
        golden=config.golden,
        match_mode=config.match_mode,
        validate_timeout=config.timeout,
        measure_timeout=config.timeout,
        warmups=config.warmups,
        runs=config.runs,
        lock_path=config.lock_path,
        anchor=config.anchor,
    )


# --- subcommands ---


def _load_config_arg(args) -> RunConfig:
    if not args.config:
        raise ConfigError("config", "this command needs --config pointing at a run file")
    return load_run_config(args.config, getattr(args, "_overrides", None))


def cmd_hotspots(args) -> int:
    path = Path(args.flamegraph)
    if not path.is_file():
        raise ConfigError("flamegraph", f"{path} does not exist")
    graph = parse_collapsed(path.read_text())
    spots = top_hotspots(graph, args.anchor, args.k)
    if not spots:
        print("no matching samples")
        return EXIT_OK
    for i, spot in enumerate(spots, start=1):
        print(f"{i}. {spot.frame}  {spot.cumulative_count}  {spot.share * 100:.1f}%")
    return EXIT_OK


def cmd_measure(args) -> int:
    config = _load_config_arg(args)
    profile = bench.measure(
        config.commands.run,
        config.meters,
        warmups=config.warmups,
        runs=config.runs,
        timeout=config.timeout,
        cwd=config.workdir,
        lock_path=config.lock_path,
    )
    payload = runlog.profile_payload(profile)
    for key in sorted(payload):
        if key != "runs":
            print(f"{key}: {payload[key]}")
    for metric, raw in sorted(payload["runs"].items()):
        print(f"runs[{metric}]: {raw}")
    document = {"schema_version": MEASUREMENT_SCHEMA_VERSION, "profile": payload}
    Path(args.output).write_text(json.dumps(document, sort_keys=True, indent=2) + "\n")
    print(f"wrote {args.output}")
    return EXIT_OK


_OPTIMIZE_OVERRIDES = (
    ("k", "pipeline.k"),
    ("iterations", "pipeline.max_iterations"),
    ("attempts", "pipeline.max_attempts"),
    ("ablation", "pipeline.ablation"),
    ("granularity", "pipeline.granularity"),
    ("backend", "backend.kind"),
    ("transcript", "backend.transcript"),
)


def cmd_optimize(args) -> int:
    overrides = {}
    for attr, dotted in _OPTIMIZE_OVERRIDES:
        value = getattr(args, attr)
        if value is not None:
            if attr == "transcript":
                value = str(Path(value).resolve())
            overrides[dotted] = value
    args._overrides = overrides
    config = _load_config_arg(args)
    if config.index is None:
        raise ConfigError("index", "optimize needs a symbol index")
    if not config.commands.profiler:
        raise ConfigError("commands.profiler", "optimize needs a profiler command")

    context = build_run_context(config)
    outcomes = run_app(context, config.index, hotspot_k=config.hotspot_k)
    summary_path = runlog.write_run_directory(
        config.report_dir, outcomes, config.workdir, config.pipeline.improvement_threshold
    )
    sys.stdout.write(summary_path.read_text())
    print(f"run artifacts: {config.report_dir}")
    return EXIT_OK


def cmd_catalog_validate(args) -> int:
    path = Path(args.path)
    if not path.is_file():
        raise ConfigError("catalog", f"{path} does not exist")
    catalog = load_catalog(path.read_bytes())
    themes = {pattern.theme for pattern in catalog.patterns}
    print(
        f"OK: version {catalog.version}, {len(catalog.patterns)} patterns, "
        f"{len(themes)} themes"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    summary = runlog.regenerate_summary(args.run_dir)
    sys.stdout.write(summary)
    return EXIT_OK


# --- dispatch ---


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="perfloop",
        description="Profile-guided, feedback-looped code optimization pipeline.",
    )
    parser.add_argument("--config", help="run configuration YAML")
    parser.add_argument("--verbose", action="store_true", help="chatty logging")
    sub = parser.add_subparsers(dest="command", required=True)

    hotspots = sub.add_parser("hotspots", help="rank leaf frames of a collapsed flame graph")
    hotspots.add_argument("flamegraph", help="collapsed-format stack file")
    hotspots.add_argument("--anchor", default="*", help="substring filter ('*' for all)")
    hotspots.add_argument("--k", type=int, default=10, help="how many frames to show")
    hotspots.set_defaults(func=cmd_hotspots)

    measure = sub.add_parser("measure", help="measure the configured run command")
    measure.add_argument("--output", default="measurement.json", help="structured result file")
    measure.set_defaults(func=cmd_measure)

    optimize = sub.add_parser("optimize", help="run the full optimization pipeline")
    optimize.add_argument("--k", type=int, help="advisor hypotheses per prompt")
    optimize.add_argument("--iterations", type=int, help="evaluator feedback loops")
    optimize.add_argument("--attempts", type=int, help="repair attempts per iteration")
    optimize.add_argument("--ablation", choices=[m.value for m in AblationMode])
    optimize.add_argument("--granularity", choices=[g.value for g in Granularity])
    optimize.add_argument("--backend", choices=["scripted", "remote_chat"])
    optimize.add_argument("--transcript", help="scripted-backend transcript file")
    optimize.set_defaults(func=cmd_optimize)

    catalog = sub.add_parser("catalog", help="pattern catalog utilities")
    catalog_sub = catalog.add_subparsers(dest="catalog_command", required=True)
    validate = catalog_sub.add_parser("validate", help="schema-check a catalog file")
    validate.add_argument("path")
    validate.set_defaults(func=cmd_catalog_validate)

    report = sub.add_parser("report", help="regenerate the summary from a run directory")
    report.add_argument("run_dir")
    report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except BaselineInvalid as exc:
        print(f"error: baseline is invalid: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except ChecksumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except UnitNotFound as exc:
        print(f"error: unit not found: {exc}", file=sys.stderr)
        return EXIT_UNIT_NOT_FOUND
    except (FileNotFoundError, MissingMetric) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, MalformedLine, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        llm.BackendUnavailable,
        llm.TranscriptExhausted,
        llm.TranscriptMismatch,
        bench.RunFailed,
        bench.MeterProbeFailed,
        bench.MeasurementLocked,
        bench.ProfilerFailed,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PIPELINE


if __name__ == "__main__":
    sys.exit(main())
