"""Per-target optimization cycle and whole-application driver.

One cycle: optionally ask the advisor to rank catalog patterns, prompt the
generator for a rewrite (with repair attempts on validation failure),
measure passing variants against the baseline, feed evaluator comparisons
into further iterations, and select the best variant by objective score.
The baseline is retained whenever nothing passes or nothing beats it.

Candidates are built and measured in scratch copies of the tree; only the
application driver writes accepted patches back.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import bench, llm, verify
from .bench import MeasurementProfile, MeterSet
from .catalog import Catalog, Pattern, prefilter_patterns
from .flame import FlameGraph, serialize_collapsed, top_hotspots
from .metrics import (
    DEFAULT_IMPROVEMENT_THRESHOLD,
    DEFAULT_OBJECTIVE,
    GainReport,
    Metric,
    build_gain_report,
)
from .targetmap import (
    Granularity,
    StalePatch,
    SymbolIndex,
    Target,
    UnitNotFound,
    apply_patch,
    extract_target,
    loc_diff,
    resolve_targets,
)
from .verify import MatchMode, ValidationResult

log = logging.getLogger(__name__)

ORIGINAL_RETAINED = "original_retained"

# Hotspot lines shown in prompts.
PROMPT_HOTSPOT_COUNT = 5


class AblationMode(Enum):
    """Inclusive ladder: each mode keeps everything the previous one has."""

    BASE = "base"
    PLUS_EVALUATOR = "plus_evaluator"
    PLUS_CONTEXT = "plus_context"
    PLUS_ADVISOR = "plus_advisor"

    @property
    def _rank(self) -> int:
        return list(AblationMode).index(self)

    @property
    def with_evaluator(self) -> bool:
        return self._rank >= 1

    @property
    def with_context(self) -> bool:
        return self._rank >= 2

    @property
    def with_advisor(self) -> bool:
        return self._rank >= 3


class BaselineInvalid(RuntimeError):
    """The unmodified tree fails its own build or tests; nothing to compare
    candidates against."""


# Failures in later stages degrade to a retained-original outcome instead
# of aborting a run that already has a valid baseline.
_STAGE_ERRORS = (
    llm.BackendUnavailable,
    llm.TranscriptError,
    llm.TranscriptExhausted,
    llm.TranscriptMismatch,
    llm.UnparseableReply,
    bench.ProfilerFailed,
    bench.MeterProbeFailed,
    bench.MeasurementLocked,
    bench.RunFailed,
    verify.CommandTimeout,
)


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 1
    max_iterations: int = 1
    max_attempts: int = 3
    ablation: AblationMode = AblationMode.BASE
    granularity: Granularity = Granularity.FUNCTION_LEVEL
    objective: dict[Metric, float] = field(default_factory=lambda: dict(DEFAULT_OBJECTIVE))
    temperature: float = llm.DEFAULT_TEMPERATURE
    loc_limit: int = 1000
    improvement_threshold: float = DEFAULT_IMPROVEMENT_THRESHOLD

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_iterations < 1:
            raise ValueError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.max_attempts < 1:
            raise ValueError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.loc_limit < 1:
            raise ValueError(f"loc_limit must be >= 1, got {self.loc_limit}")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.improvement_threshold < 0:
            raise ValueError("improvement_threshold must be >= 0")
        if not self.objective:
            raise ValueError("objective must weight at least one metric")


@dataclass(frozen=True)
class Commands:
    """Shell command strings for one application under optimization.

    ``profiler`` is a template with ``{cmd}`` and ``{out}`` placeholders.
    ``ast`` gets the source file path appended as its last argument and
    must print a syntax-tree rendering on stdout.  ``locator`` is an
    object with the locate() contract, not a string.
    """

    build: str
    test: str
    run: str
    profiler: str | None = None
    ast: str | None = None
    locator: object | None = None


@dataclass
class RunContext:
    """Everything a cycle needs beyond the target itself."""

    config: PipelineConfig
    backend: object
    meters: MeterSet
    commands: Commands
    workdir: str
    catalog: Catalog
    golden: bytes | None = None
    match_mode: MatchMode = MatchMode.EXACT
    validate_timeout: float = verify.DEFAULT_TIMEOUT_S
    measure_timeout: float = bench.DEFAULT_RUN_TIMEOUT_S
    warmups: int = bench.DEFAULT_WARMUPS
    runs: int = bench.DEFAULT_RUNS
    lock_path: str = bench.DEFAULT_LOCK_PATH
    anchor: str = "*"


@dataclass(frozen=True)
class CandidateVariant:
    code: str
    iteration: int
    attempt: int
    validation: ValidationResult
    profile: MeasurementProfile | None = None
    gains: GainReport | None = None

    def __post_init__(self) -> None:
        if self.profile is not None and not self.validation.passed:
            raise ValueError("profile present on a variant that failed validation")
        if self.gains is not None and self.profile is None:
            raise ValueError("gains present without a profile")


@dataclass(frozen=True)
class TranscriptEntry:
    role_tag: str
    prompt: str
    response: str


@dataclass(frozen=True)
class OptimizationOutcome:
    target: Target
    baseline_profile: MeasurementProfile
    variants: tuple[CandidateVariant, ...]
    selected: CandidateVariant | str
    transcript_log: tuple[TranscriptEntry, ...]
    notes: tuple[str, ...] = ()
    # Collapsed-stack text keyed by a short label; kept out of the
    # checksummed serialization, written alongside it for audit.
    flamegraphs: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if isinstance(self.selected, str):
            if self.selected != ORIGINAL_RETAINED:
                raise ValueError(f"unknown selection marker {self.selected!r}")
        elif not self.selected.validation.passed:
            raise ValueError("selected variant did not pass validation")

    @property
    def selected_variant(self) -> CandidateVariant | None:
        return None if isinstance(self.selected, str) else self.selected


def summarize_hotspots(graph: FlameGraph | None, anchor: str = "*") -> str | None:
    """Short ranked hotspot text for prompts, or None when there is no data."""
    if graph is None:
        return None
    spots = top_hotspots(graph, anchor, PROMPT_HOTSPOT_COUNT)
    if not spots:
        return None
    lines = ["Top hotspots (share of filtered samples):"]
    for i, spot in enumerate(spots, start=1):
        lines.append(
            f"{i}. {spot.frame}  {spot.cumulative_count} samples  {spot.share * 100:.1f}%"
        )
    return "\n".join(lines)


def _ast_text(ast_cmd: str | None, file: str, timeout: float) -> str | None:
    if not ast_cmd:
        return None
    try:
        proc = subprocess.run(
            f"{ast_cmd} {file}",
            shell=True,
            capture_output=True,
            text=True,
            timeout=timeout,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    if proc.returncode != 0 or not proc.stdout.strip():
        return None
    return proc.stdout


def _measure(ctx: RunContext, cwd: str) -> MeasurementProfile:
    return bench.measure(
        ctx.commands.run,
        ctx.meters,
        warmups=ctx.warmups,
        runs=ctx.runs,
        timeout=ctx.measure_timeout,
        cwd=cwd,
        lock_path=ctx.lock_path,
    )


def _validate(ctx: RunContext, tree: str) -> ValidationResult:
    return verify.validate(
        tree,
        ctx.commands.build,
        ctx.commands.test,
        timeout=ctx.validate_timeout,
        run_cmd=ctx.commands.run,
        golden=ctx.golden,
        match_mode=ctx.match_mode,
    )


class _Cycle:
    """Mutable state accumulated while optimizing one target."""

    def __init__(self, target: Target, ctx: RunContext):
        self.target = target
        self.ctx = ctx
        self.notes: list[str] = []
        self.transcript: list[TranscriptEntry] = []
        self.variants: list[CandidateVariant] = []
        self.flamegraphs: dict[str, str] = {}

    def complete(self, messages, role_tag: str) -> str:
        reply = llm.complete(self.ctx.backend, messages, self.ctx.config.temperature, role_tag)
        self.transcript.append(
            TranscriptEntry(role_tag, llm.render_messages(messages), reply)
        )
        return reply

    def advise(self, flame_text: str | None) -> list[Pattern]:
        ctx = self.ctx
        candidates = prefilter_patterns(ctx.catalog, set(ctx.config.objective))
        if not candidates:
            self.notes.append("prefilter matched no patterns; advisor saw the full catalog")
            candidates = list(ctx.catalog.patterns)
        messages = llm.build_advisor_prompt(
            self.target.snippet, flame_text, candidates, k=ctx.config.k
        )
        reply = self.complete(messages, "advisor")
        hypotheses = llm.parse_hypotheses(reply, ctx.catalog, ctx.config.k)
        return [ctx.catalog.by_id(h.pattern_id) for h in hypotheses]

    def try_candidate(
        self,
        code: str,
        iteration: int,
        attempt: int,
        baseline_profile: MeasurementProfile,
    ) -> tuple[CandidateVariant, FlameGraph | None]:
        """Patch a scratch copy of the tree, validate it, measure on success.

        The persistent tree is never modified.  Measurement or profiling
        errors propagate; validation failures come back as a failed variant.
        """
        ctx = self.ctx
        rel = os.path.relpath(self.target.file, ctx.workdir)
        if rel.startswith(".."):
            raise ValueError(
                f"target file {self.target.file} lies outside workdir {ctx.workdir}"
            )
        scratch = tempfile.mkdtemp(prefix="perfloop-candidate-")
        try:
            tree = os.path.join(scratch, "tree")
            shutil.copytree(ctx.workdir, tree, symlinks=True)
            scratch_file = Path(tree) / rel
            try:
                patched = apply_patch(scratch_file.read_text(), self.target, code)
            except StalePatch as exc:
                result = ValidationResult(False, False, None, f"patch no longer applies: {exc}")
                return CandidateVariant(code, iteration, attempt, result), None
            scratch_file.write_text(patched)

            try:
                result = _validate(ctx, tree)
            except verify.CommandTimeout as exc:
                compiled = exc.phase != "build"
                result = ValidationResult(
                    compiled, False, None, f"{exc.phase} timed out\n{exc.detail}".strip()
                )
            if not result.passed:
                return CandidateVariant(code, iteration, attempt, result), None

            profile = _measure(ctx, tree)
            gains = build_gain_report(
                baseline_profile.metric_values(),
                profile.metric_values(),
                loc_diff(self.target.snippet, code),
                weights=ctx.config.objective,
                threshold=ctx.config.improvement_threshold,
            )
            variant = CandidateVariant(code, iteration, attempt, result, profile, gains)

            variant_graph = None
            if ctx.config.ablation.with_context and ctx.commands.profiler:
                variant_graph = bench.profile_flamegraph(
                    ctx.commands.run,
                    ctx.commands.profiler,
                    cwd=tree,
                    timeout=ctx.measure_timeout,
                )
            return variant, variant_graph
        finally:
            shutil.rmtree(scratch, ignore_errors=True)


def run_cycle(
    target: Target,
    ctx: RunContext,
    baseline_profile: MeasurementProfile | None = None,
    baseline_flamegraph: FlameGraph | None = None,
    skip_baseline_validation: bool = False,
) -> OptimizationOutcome:
    """Optimize one target; return every variant tried plus the selection.

    The unmodified tree must build and test cleanly first (``BaselineInvalid``
    otherwise).  Once a baseline measurement exists, failures in any later
    stage are noted on an outcome that retains the original instead of
    raising.  A variant is selected only when it passed validation and its
    objective score strictly beats 1.0; the best score wins, earliest
    variant on ties.
    """
    config = ctx.config
    mode = config.ablation

    if not skip_baseline_validation:
        baseline_result = _validate(ctx, ctx.workdir)
        if not baseline_result.passed:
            raise BaselineInvalid(baseline_result.detail or "baseline build or tests failed")

    if baseline_profile is None:
        baseline_profile = _measure(ctx, ctx.workdir)

    cycle = _Cycle(target, ctx)

    def finish(selected) -> OptimizationOutcome:
        return OptimizationOutcome(
            target=target,
            baseline_profile=baseline_profile,
            variants=tuple(cycle.variants),
            selected=selected,
            transcript_log=tuple(cycle.transcript),
            notes=tuple(cycle.notes),
            flamegraphs=cycle.flamegraphs,
        )

    try:
        if mode.with_context and baseline_flamegraph is None and ctx.commands.profiler:
            baseline_flamegraph = bench.profile_flamegraph(
                ctx.commands.run,
                ctx.commands.profiler,
                cwd=ctx.workdir,
                timeout=ctx.measure_timeout,
            )
        flame_text = None
        ast_text = None
        if mode.with_context:
            if baseline_flamegraph is not None:
                cycle.flamegraphs["baseline"] = serialize_collapsed(baseline_flamegraph)
            flame_text = summarize_hotspots(baseline_flamegraph, ctx.anchor)
            ast_text = _ast_text(ctx.commands.ast, target.file, ctx.validate_timeout)
            if ctx.commands.ast and ast_text is None:
                cycle.notes.append("syntax tree command produced no output; section omitted")

        patterns = cycle.advise(flame_text) if mode.with_advisor else None

        memory = llm.GeneratorMemory()
        current_code = target.snippet
        feedback: str | None = None
        variant_hotspot_text: str | None = None
        # The weakest mode never loops, whatever the configured ceiling.
        effective_iterations = 1 if mode is AblationMode.BASE else config.max_iterations

        for iteration in range(1, effective_iterations + 1):
            error_detail: str | None = None
            passing: CandidateVariant | None = None
            for attempt in range(1, config.max_attempts + 1):
                messages = llm.build_generator_prompt(
                    current_code,
                    ast_text=ast_text,
                    flamegraph_text=flame_text,
                    patterns=patterns,
                    feedback=feedback,
                    error=error_detail,
                    memory=memory,
                )
                reply = cycle.complete(messages, "generator")
                memory.append(tuple(messages), reply)
                try:
                    code = llm.extract_code(reply)
                except llm.NoCodeBlock as exc:
                    result = ValidationResult(False, False, None, str(exc))
                    cycle.variants.append(CandidateVariant("", iteration, attempt, result))
                    error_detail = str(exc)
                    continue
                variant, variant_graph = cycle.try_candidate(
                    code, iteration, attempt, baseline_profile
                )
                cycle.variants.append(variant)
                if variant.validation.passed:
                    passing = variant
                    if variant_graph is not None:
                        cycle.flamegraphs[f"iteration-{iteration}"] = serialize_collapsed(
                            variant_graph
                        )
                        variant_hotspot_text = summarize_hotspots(variant_graph, ctx.anchor)
                    break
                error_detail = variant.validation.detail or "build or tests failed"

            if passing is None:
                # No correct rewrite this round; more feedback loops would
                # have nothing to react to.
                break

            current_code = passing.code
            if iteration < effective_iterations and mode.with_evaluator:
                eval_messages = llm.build_evaluator_prompt(
                    target.snippet,
                    passing.code,
                    baseline_profile.metric_values(),
                    passing.profile.metric_values(),
                    original_hotspots=flame_text,
                    new_hotspots=variant_hotspot_text,
                )
                feedback = cycle.complete(eval_messages, "evaluator")

        scored = [v for v in cycle.variants if v.gains is not None]
        if scored:
            best = max(scored, key=lambda v: v.gains.objective_score)
            if best.gains.objective_score > 1.0:
                return finish(best)
        return finish(ORIGINAL_RETAINED)
    except _STAGE_ERRORS as exc:
        cycle.notes.append(f"{type(exc).__name__}: {exc}")
        log.warning("target %s: stage failed (%s); retaining original", target.unit, exc)
        return finish(ORIGINAL_RETAINED)


def run_app(
    ctx: RunContext,
    index: SymbolIndex,
    hotspot_k: int = 10,
) -> list[OptimizationOutcome]:
    """Profile a whole application and optimize its hotspots in rank order.

    Hotspots are ranked once, up front.  Accepted patches land in the
    persistent tree immediately and the baseline is re-measured, so each
    later target competes against the tree as already improved.  A target
    that fails mid-cycle is logged and skipped; an empty profile yields an
    empty list.
    """
    if not ctx.commands.profiler:
        raise ValueError("run_app requires a profiler command")

    baseline_result = _validate(ctx, ctx.workdir)
    if not baseline_result.passed:
        raise BaselineInvalid(baseline_result.detail or "baseline build or tests failed")

    graph = bench.profile_flamegraph(
        ctx.commands.run, ctx.commands.profiler, cwd=ctx.workdir, timeout=ctx.measure_timeout
    )
    hotspots = top_hotspots(graph, ctx.anchor, hotspot_k)
    if not hotspots:
        log.info("profile contains no samples; nothing to optimize")
        return []

    targets = resolve_targets(
        hotspots,
        index,
        ctx.config.granularity,
        loc_limit=ctx.config.loc_limit,
        locator=ctx.commands.locator,
    )

    baseline_profile = _measure(ctx, ctx.workdir)
    outcomes: list[OptimizationOutcome] = []
    for stale in targets:
        # Earlier accepted patches may have shifted spans in this file, so
        # re-locate the unit against the current contents.
        try:
            source = Path(stale.file).read_text()
            target = extract_target(
                stale.file, source, stale.unit, stale.granularity, locator=ctx.commands.locator
            )
        except UnitNotFound:
            log.warning("unit %s vanished after earlier patches; skipping", stale.unit)
            continue

        try:
            outcome = run_cycle(
                target,
                ctx,
                baseline_profile=baseline_profile,
                baseline_flamegraph=graph,
                skip_baseline_validation=True,
            )
        except Exception:
            log.exception("target %s failed; continuing with remaining targets", target.unit)
            continue
        outcomes.append(outcome)

        chosen = outcome.selected_variant
        if chosen is not None:
            patched = apply_patch(source, target, chosen.code)
            Path(target.file).write_text(patched)
            log.info(
                "accepted rewrite of %s (objective score %.3f)",
                target.unit,
                chosen.gains.objective_score,
            )
            baseline_profile = _measure(ctx, ctx.workdir)
    return outcomes
