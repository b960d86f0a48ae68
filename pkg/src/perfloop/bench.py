"""Measurement harness: warm-up/measured-run discipline, pluggable meters,
and profiler-driven flame graph collection.

Latency is wall clock around the composed command, peak memory comes from
the kernel's child resource accounting, and cycles/energy flow through
external wrapper commands so hosts without those counters degrade to absent
metrics instead of fake zeros.  A host-wide lock keeps concurrent
measurements from corrupting each other.
"""

from __future__ import annotations

import logging
import os
import re
import signal
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import filelock

from .flame import FlameGraph, parse_collapsed
from .metrics import Metric
from .verify import DETAIL_TAIL_BYTES, CommandTimeout

log = logging.getLogger(__name__)

DEFAULT_WARMUPS = 2
DEFAULT_RUNS = 5
DEFAULT_RUN_TIMEOUT_S = 300.0
METER_PROBE_TIMEOUT_S = 30.0

DEFAULT_LOCK_PATH = os.path.join(tempfile.gettempdir(), "perfloop-measure.lock")


class RunFailed(RuntimeError):
    """A warm-up or measured run exited nonzero; no profile is produced."""

    def __init__(self, exit_code: int, detail: str):
        self.exit_code = exit_code
        self.detail = detail
        super().__init__(f"run command exited {exit_code}")


class MeterProbeFailed(RuntimeError):
    """A configured external meter did not answer its probe."""


class MeasurementLocked(RuntimeError):
    """Another measurement holds the host lock; concurrent measuring is an
    error, not interference."""


class ProfilerFailed(RuntimeError):
    """The profiler command failed or produced no collapsed output."""


def _default_rss_kb(rusage) -> float:
    # Linux reports ru_maxrss in kilobytes.
    return float(rusage.ru_maxrss)


@dataclass(frozen=True)
class MeterSet:
    """Measurement instruments for one host.

    ``timer`` and ``rss_reader`` are injectable for deterministic replay
    tests; the external meter commands follow the wrap-and-append contract
    (probe with ``--probe``, wrap the target, print one number as the last
    stdout line).
    """

    timer: Callable[[], float] = time.perf_counter
    rss_reader: Callable[[object], float] = _default_rss_kb
    cycle_counter: str | None = None
    energy_meter: str | None = None
    throughput_pattern: str | None = None
    throughput_unit: str | None = None

    def external_meters(self) -> list[tuple[Metric, str]]:
        """Configured wrapper commands, innermost first."""
        meters = []
        if self.cycle_counter:
            meters.append((Metric.CPU_CYCLES, self.cycle_counter))
        if self.energy_meter:
            meters.append((Metric.ENERGY, self.energy_meter))
        return meters


@dataclass(frozen=True)
class MeasurementProfile:
    latency_ms: float
    peak_rss_kb: float
    cpu_cycles: float | None = None
    throughput: float | None = None
    throughput_unit: str | None = None
    energy_joules: float | None = None
    runs: dict[Metric, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        means = {
            Metric.LATENCY: self.latency_ms,
            Metric.MEMORY: self.peak_rss_kb,
            Metric.CPU_CYCLES: self.cpu_cycles,
            Metric.THROUGHPUT: self.throughput,
            Metric.ENERGY: self.energy_joules,
        }
        for metric, mean in means.items():
            raw = self.runs.get(metric)
            if mean is None:
                if raw is not None:
                    raise ValueError(f"{metric.value}: raw runs present but mean absent")
                continue
            if not raw:
                raise ValueError(f"{metric.value}: mean present but raw runs absent")
            expected = sum(raw) / len(raw)
            if abs(mean - expected) > 1e-9 * max(1.0, abs(expected)):
                raise ValueError(f"{metric.value}: mean {mean} is not the mean of {raw}")
        if (self.throughput is None) != (self.throughput_unit is None):
            raise ValueError("throughput value and unit must be present together")

    @classmethod
    def from_runs(
        cls, runs: dict[Metric, tuple[float, ...]], throughput_unit: str | None = None
    ) -> "MeasurementProfile":
        def mean(metric: Metric) -> float | None:
            raw = runs.get(metric)
            return sum(raw) / len(raw) if raw else None

        return cls(
            latency_ms=mean(Metric.LATENCY),
            peak_rss_kb=mean(Metric.MEMORY),
            cpu_cycles=mean(Metric.CPU_CYCLES),
            throughput=mean(Metric.THROUGHPUT),
            throughput_unit=throughput_unit if Metric.THROUGHPUT in runs else None,
            energy_joules=mean(Metric.ENERGY),
            runs=dict(runs),
        )

    def metric_values(self) -> dict[Metric, float]:
        values = {Metric.LATENCY: self.latency_ms, Metric.MEMORY: self.peak_rss_kb}
        if self.cpu_cycles is not None:
            values[Metric.CPU_CYCLES] = self.cpu_cycles
        if self.throughput is not None:
            values[Metric.THROUGHPUT] = self.throughput
        if self.energy_joules is not None:
            values[Metric.ENERGY] = self.energy_joules
        return values


@dataclass
class _RunSample:
    latency_ms: float
    rss_kb: float
    stdout: str
    meter_values: dict[Metric, float]


def _probe_meters(meters: MeterSet) -> None:
    for metric, command in meters.external_meters():
        try:
            proc = subprocess.run(
                f"{command} --probe",
                shell=True,
                capture_output=True,
                timeout=METER_PROBE_TIMEOUT_S,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise MeterProbeFailed(f"{metric.value} meter {command!r}: {exc}") from exc
        if proc.returncode != 0:
            raise MeterProbeFailed(
                f"{metric.value} meter {command!r} probe exited {proc.returncode}"
            )


def _compose_command(run_cmd: str, meters: MeterSet) -> str:
    composed = run_cmd
    for _, command in meters.external_meters():
        composed = f"{command} {composed}"
    return composed


def _execute_once(
    cmd: str, cwd: str | None, timeout: float, meters: MeterSet, phase: str
) -> _RunSample:
    """One timed execution; blocks in wait4 so the kernel's rusage covers the
    whole child tree.  A watchdog kills the process group on timeout."""
    with tempfile.TemporaryFile() as out_file, tempfile.TemporaryFile() as err_file:
        start = meters.timer()
        proc = subprocess.Popen(
            cmd,
            shell=True,
            cwd=cwd,
            stdout=out_file,
            stderr=err_file,
            start_new_session=True,
        )
        timed_out = threading.Event()

        def kill() -> None:
            timed_out.set()
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass

        watchdog = threading.Timer(timeout, kill)
        watchdog.start()
        try:
            _, status, rusage = os.wait4(proc.pid, 0)
        finally:
            watchdog.cancel()
        elapsed_ms = (meters.timer() - start) * 1000.0
        # wait4 already reaped the child; record the code so Popen cleanup
        # does not wait again.
        proc.returncode = os.waitstatus_to_exitcode(status) if not timed_out.is_set() else -9

        out_file.seek(0)
        stdout = out_file.read().decode("utf-8", errors="replace")
        err_file.seek(0)
        stderr_tail = err_file.read()[-DETAIL_TAIL_BYTES:].decode("utf-8", errors="replace")

    if timed_out.is_set():
        raise CommandTimeout(phase, stderr_tail)
    if proc.returncode != 0:
        raise RunFailed(proc.returncode, stderr_tail or stdout[-DETAIL_TAIL_BYTES:])

    meter_values: dict[Metric, float] = {}
    lines = stdout.splitlines()
    # Wrappers append one number each; the outermost wrote last.
    for metric, _ in reversed(meters.external_meters()):
        if lines:
            tail = lines.pop()
            try:
                meter_values[metric] = float(tail.strip())
            except ValueError:
                log.warning("%s meter line %r is not a number; dropping metric", metric.value, tail)
    program_stdout = "\n".join(lines)
    return _RunSample(
        latency_ms=elapsed_ms,
        rss_kb=meters.rss_reader(rusage),
        stdout=program_stdout,
        meter_values=meter_values,
    )


def measure(
    run_cmd: str,
    meters: MeterSet,
    warmups: int = DEFAULT_WARMUPS,
    runs: int = DEFAULT_RUNS,
    timeout: float = DEFAULT_RUN_TIMEOUT_S,
    cwd: str | None = None,
    lock_path: str = DEFAULT_LOCK_PATH,
) -> MeasurementProfile:
    """Measure ``run_cmd``: ``warmups`` discarded runs, then ``runs`` timed
    ones, averaged.

    Configured meters are probed first.  Any run exiting nonzero aborts with
    ``RunFailed`` (warm-ups included: a crashing candidate has no profile).
    A metric that fails to materialize in one measured run is dropped from
    the whole profile rather than averaged over a subset.
    """
    if warmups < 0:
        raise ValueError(f"warmups must be >= 0, got {warmups}")
    if runs < 1:
        raise ValueError(f"runs must be >= 1, got {runs}")
    if not run_cmd:
        raise ValueError("run_cmd must be non-empty")
    _probe_meters(meters)
    composed = _compose_command(run_cmd, meters)
    throughput_re = re.compile(meters.throughput_pattern) if meters.throughput_pattern else None

    lock = filelock.FileLock(lock_path)
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        raise MeasurementLocked(f"another measurement holds {lock_path}") from None
    try:
        for _ in range(warmups):
            _execute_once(composed, cwd, timeout, meters, "warmup")
        samples = [_execute_once(composed, cwd, timeout, meters, "run") for _ in range(runs)]
    finally:
        lock.release()

    collected: dict[Metric, list[float]] = {
        Metric.LATENCY: [s.latency_ms for s in samples],
        Metric.MEMORY: [s.rss_kb for s in samples],
    }
    for metric, _ in meters.external_meters():
        values = [s.meter_values[metric] for s in samples if metric in s.meter_values]
        if len(values) == len(samples):
            collected[metric] = values
        else:
            log.warning("%s absent in %d/%d runs; dropping metric",
                        metric.value, len(samples) - len(values), len(samples))
    if throughput_re is not None:
        parsed: list[float] = []
        for sample in samples:
            match = throughput_re.search(sample.stdout)
            if match is None:
                break
            try:
                parsed.append(float(match.group(1)))
            except (IndexError, ValueError) as exc:
                raise ValueError(
                    f"throughput pattern must capture one number: {exc}"
                ) from None
        if len(parsed) == len(samples):
            collected[Metric.THROUGHPUT] = parsed
        else:
            log.warning("throughput pattern unmatched in some runs; dropping metric")

    return MeasurementProfile.from_runs(
        {m: tuple(v) for m, v in collected.items()}, meters.throughput_unit
    )


def profile_flamegraph(
    run_cmd: str,
    profiler_template: str,
    cwd: str | None = None,
    timeout: float = DEFAULT_RUN_TIMEOUT_S,
) -> FlameGraph:
    """Run the profiler around ``run_cmd`` and parse its collapsed stacks.

    The template must contain ``{cmd}`` and ``{out}`` placeholders; the
    expanded command is expected to write collapsed-format stacks to the
    ``{out}`` path.
    """
    if "{cmd}" not in profiler_template or "{out}" not in profiler_template:
        raise ValueError("profiler template needs {cmd} and {out} placeholders")
    with tempfile.TemporaryDirectory(prefix="perfloop-prof-") as scratch:
        out_path = os.path.join(scratch, "stacks.collapsed")
        command = profiler_template.replace("{cmd}", run_cmd).replace("{out}", out_path)
        proc = subprocess.Popen(
            command,
            shell=True,
            cwd=cwd,
            stdout=subprocess.PIPE,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
        try:
            output, _ = proc.communicate(timeout=timeout)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.communicate()
            raise ProfilerFailed("profiler timed out") from None
        if proc.returncode != 0:
            tail = (output or b"")[-DETAIL_TAIL_BYTES:].decode("utf-8", errors="replace")
            raise ProfilerFailed(f"profiler exited {proc.returncode}: {tail}")
        if not Path(out_path).is_file():
            raise ProfilerFailed(f"profiler wrote no output at {out_path}")
        text = Path(out_path).read_text()
    return parse_collapsed(text)
