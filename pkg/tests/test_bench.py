"""Tests for the measurement harness and profiler driver."""

from __future__ import annotations

import time
from pathlib import Path

import filelock
import pytest

from perfloop.bench import (
    MeasurementLocked,
    MeasurementProfile,
    MeterProbeFailed,
    MeterSet,
    ProfilerFailed,
    RunFailed,
    measure,
    profile_flamegraph,
)
from perfloop.flame import MalformedLine
from perfloop.metrics import Metric
from perfloop.verify import CommandTimeout


class FakeTimer:
    """Monotonic stub: every call advances by a fixed step.

    The default step is a binary fraction so elapsed millisecond values come
    out exact."""

    def __init__(self, step_s: float = 0.0625):
        self.step_s = step_s
        self.ticks = 0

    def __call__(self) -> float:
        self.ticks += 1
        return self.ticks * self.step_s


def fake_meters(**overrides) -> MeterSet:
    defaults = dict(timer=FakeTimer(), rss_reader=lambda rusage: 4096.0)
    defaults.update(overrides)
    return MeterSet(**defaults)


def write_script(tmp_path: Path, name: str, body: str) -> str:
    path = tmp_path / name
    path.write_text("#!/bin/sh\n" + body)
    path.chmod(0o755)
    return str(path)


def counting_meter(tmp_path: Path, name: str, value: str) -> str:
    return write_script(
        tmp_path,
        name,
        'if [ "$1" = "--probe" ]; then exit 0; fi\n'
        '"$@"\nrc=$?\n'
        f"echo {value}\n"
        "exit $rc\n",
    )


# --- MeasurementProfile invariants ---


def test_from_runs_computes_means():
    profile = MeasurementProfile.from_runs(
        {
            Metric.LATENCY: (100.0, 110.0, 120.0),
            Metric.MEMORY: (2048.0, 2048.0, 2048.0),
            Metric.THROUGHPUT: (10.0, 20.0, 30.0),
        },
        throughput_unit="MFLOPS",
    )
    assert profile.latency_ms == pytest.approx(110.0)
    assert profile.peak_rss_kb == pytest.approx(2048.0)
    assert profile.throughput == pytest.approx(20.0)
    assert profile.throughput_unit == "MFLOPS"
    assert profile.cpu_cycles is None
    assert profile.energy_joules is None


def test_mean_of_single_run_is_the_value():
    profile = MeasurementProfile.from_runs(
        {Metric.LATENCY: (42.0,), Metric.MEMORY: (1.0,)}
    )
    assert profile.latency_ms == 42.0


def test_profile_rejects_inconsistent_mean():
    with pytest.raises(ValueError):
        MeasurementProfile(
            latency_ms=999.0,
            peak_rss_kb=1.0,
            runs={Metric.LATENCY: (100.0,), Metric.MEMORY: (1.0,)},
        )


def test_profile_rejects_raw_without_mean():
    with pytest.raises(ValueError):
        MeasurementProfile(
            latency_ms=1.0,
            peak_rss_kb=1.0,
            cpu_cycles=None,
            runs={Metric.LATENCY: (1.0,), Metric.MEMORY: (1.0,), Metric.CPU_CYCLES: (5.0,)},
        )


def test_profile_rejects_unit_without_throughput():
    with pytest.raises(ValueError):
        MeasurementProfile(
            latency_ms=1.0,
            peak_rss_kb=1.0,
            throughput_unit="MFLOPS",
            runs={Metric.LATENCY: (1.0,), Metric.MEMORY: (1.0,)},
        )


def test_metric_values_only_present_metrics():
    profile = MeasurementProfile.from_runs(
        {Metric.LATENCY: (10.0,), Metric.MEMORY: (20.0,), Metric.ENERGY: (1.5,)}
    )
    assert profile.metric_values() == {
        Metric.LATENCY: 10.0,
        Metric.MEMORY: 20.0,
        Metric.ENERGY: 1.5,
    }


# --- measure ---


def test_measure_sleep_band(tmp_path):
    profile = measure(
        "sleep 0.1",
        MeterSet(),
        warmups=0,
        runs=2,
        timeout=30,
        lock_path=str(tmp_path / "m.lock"),
    )
    # Lower bound is hard (sleep cannot return early); the upper bound
    # catches unit mistakes (seconds vs milliseconds), not scheduler noise.
    assert 100.0 <= profile.latency_ms < 2000.0
    assert profile.peak_rss_kb > 0
    assert len(profile.runs[Metric.LATENCY]) == 2


def test_measure_warmups_excluded_from_stats(tmp_path):
    counter = tmp_path / "count"
    counter.write_text("0")
    cmd = f"c=$(cat {counter}); echo $((c+1)) > {counter}"
    profile = measure(
        cmd, fake_meters(), warmups=2, runs=3, timeout=30, lock_path=str(tmp_path / "m.lock")
    )
    assert counter.read_text().strip() == "5"
    assert len(profile.runs[Metric.LATENCY]) == 3
    assert len(profile.runs[Metric.MEMORY]) == 3


def test_measure_with_fake_instruments_is_exact(tmp_path):
    profile = measure(
        "true",
        fake_meters(timer=FakeTimer(step_s=0.0625), rss_reader=lambda r: 1234.0),
        warmups=1,
        runs=4,
        timeout=30,
        lock_path=str(tmp_path / "m.lock"),
    )
    assert profile.runs[Metric.LATENCY] == (62.5, 62.5, 62.5, 62.5)
    assert profile.latency_ms == 62.5
    assert profile.peak_rss_kb == 1234.0


def test_measure_failing_run_aborts(tmp_path):
    with pytest.raises(RunFailed) as exc_info:
        measure(
            "echo diagnostics >&2; exit 7",
            fake_meters(),
            warmups=0,
            runs=3,
            timeout=30,
            lock_path=str(tmp_path / "m.lock"),
        )
    assert exc_info.value.exit_code == 7
    assert "diagnostics" in exc_info.value.detail


def test_measure_failing_warmup_aborts(tmp_path):
    marker = tmp_path / "measured"
    with pytest.raises(RunFailed):
        measure(
            f"test -f {marker}",
            fake_meters(),
            warmups=1,
            runs=1,
            timeout=30,
            lock_path=str(tmp_path / "m.lock"),
        )


def test_measure_timeout(tmp_path):
    start = time.monotonic()
    with pytest.raises(CommandTimeout):
        measure(
            "sleep 30",
            MeterSet(),
            warmups=0,
            runs=1,
            timeout=1.0,
            lock_path=str(tmp_path / "m.lock"),
        )
    assert time.monotonic() - start < 10


def test_measure_lock_contention(tmp_path):
    lock_path = str(tmp_path / "m.lock")
    held = filelock.FileLock(lock_path)
    held.acquire(timeout=0)
    try:
        with pytest.raises(MeasurementLocked):
            measure("true", fake_meters(), warmups=0, runs=1, lock_path=lock_path)
    finally:
        held.release()
    # Lock is released on completion and on failure.
    measure("true", fake_meters(), warmups=0, runs=1, lock_path=lock_path)
    with pytest.raises(RunFailed):
        measure("false", fake_meters(), warmups=0, runs=1, lock_path=lock_path)
    measure("true", fake_meters(), warmups=0, runs=1, lock_path=lock_path)


def test_measure_argument_validation(tmp_path):
    with pytest.raises(ValueError):
        measure("true", fake_meters(), warmups=-1, runs=1, lock_path=str(tmp_path / "l"))
    with pytest.raises(ValueError):
        measure("true", fake_meters(), warmups=0, runs=0, lock_path=str(tmp_path / "l"))
    with pytest.raises(ValueError):
        measure("", fake_meters(), lock_path=str(tmp_path / "l"))


# --- external meters ---


def test_meter_probe_failure_blocks_measurement(tmp_path):
    meter = write_script(tmp_path, "meter.sh", 'if [ "$1" = "--probe" ]; then exit 2; fi\n"$@"\n')
    with pytest.raises(MeterProbeFailed):
        measure(
            "true",
            fake_meters(cycle_counter=meter),
            warmups=0,
            runs=1,
            lock_path=str(tmp_path / "m.lock"),
        )


def test_cycle_meter_parsed_from_last_line(tmp_path):
    meter = counting_meter(tmp_path, "cycles.sh", "41500000")
    profile = measure(
        "echo program output",
        fake_meters(cycle_counter=meter),
        warmups=0,
        runs=3,
        lock_path=str(tmp_path / "m.lock"),
    )
    assert profile.cpu_cycles == pytest.approx(41500000.0)
    assert profile.runs[Metric.CPU_CYCLES] == (41500000.0,) * 3


def test_stacked_meters_parsed_in_wrap_order(tmp_path):
    cycles = counting_meter(tmp_path, "cycles.sh", "111")
    energy = counting_meter(tmp_path, "energy.sh", "2.5")
    profile = measure(
        "echo MFLOPS: 321.5",
        fake_meters(
            cycle_counter=cycles,
            energy_meter=energy,
            throughput_pattern=r"MFLOPS:\s*([0-9.]+)",
            throughput_unit="MFLOPS",
        ),
        warmups=0,
        runs=2,
        lock_path=str(tmp_path / "m.lock"),
    )
    assert profile.cpu_cycles == pytest.approx(111.0)
    assert profile.energy_joules == pytest.approx(2.5)
    assert profile.throughput == pytest.approx(321.5)
    assert profile.throughput_unit == "MFLOPS"


def test_meter_failure_propagates_run_failure(tmp_path):
    meter = counting_meter(tmp_path, "cycles.sh", "1")
    with pytest.raises(RunFailed):
        measure(
            "exit 3",
            fake_meters(cycle_counter=meter),
            warmups=0,
            runs=1,
            lock_path=str(tmp_path / "m.lock"),
        )


def test_non_numeric_meter_line_drops_metric(tmp_path):
    meter = counting_meter(tmp_path, "cycles.sh", "unsupported")
    profile = measure(
        "true",
        fake_meters(cycle_counter=meter),
        warmups=0,
        runs=2,
        lock_path=str(tmp_path / "m.lock"),
    )
    assert profile.cpu_cycles is None
    assert Metric.CPU_CYCLES not in profile.runs


def test_unconfigured_meters_yield_absent_fields(tmp_path):
    profile = measure(
        "true", fake_meters(), warmups=0, runs=2, lock_path=str(tmp_path / "m.lock")
    )
    assert profile.cpu_cycles is None
    assert profile.energy_joules is None
    assert profile.throughput is None
    assert set(profile.runs) == {Metric.LATENCY, Metric.MEMORY}


def test_throughput_missing_in_one_run_drops_metric(tmp_path):
    counter = tmp_path / "count"
    counter.write_text("0")
    # Prints the throughput line only on the first invocation.
    cmd = (
        f"c=$(cat {counter}); echo $((c+1)) > {counter}; "
        f'if [ "$c" = "0" ]; then echo "MFLOPS: 10"; fi'
    )
    profile = measure(
        cmd,
        fake_meters(throughput_pattern=r"MFLOPS:\s*([0-9.]+)", throughput_unit="MFLOPS"),
        warmups=0,
        runs=3,
        lock_path=str(tmp_path / "m.lock"),
    )
    assert profile.throughput is None
    assert Metric.THROUGHPUT not in profile.runs
    assert profile.latency_ms is not None


# --- profiler ---


def stub_profiler(tmp_path: Path, collapsed: str) -> str:
    # Contract: last argv element is the output path; everything before it
    # is the wrapped command.
    return write_script(
        tmp_path,
        "profiler.sh",
        'for out; do :; done\n'
        f"printf '{collapsed}' > \"$out\"\n",
    )


def test_profile_flamegraph_parses_stub_output(tmp_path):
    profiler = stub_profiler(tmp_path, "main;hot 90\\nmain;cold 10\\n")
    graph = profile_flamegraph("true", f"{profiler} {{cmd}} {{out}}")
    assert graph.total_samples == 100
    assert graph.entries[0][0].frames == ("main", "hot")


def test_profile_flamegraph_requires_placeholders(tmp_path):
    with pytest.raises(ValueError):
        profile_flamegraph("true", "perf-record {cmd}")
    with pytest.raises(ValueError):
        profile_flamegraph("true", "perf-record {out}")


def test_profile_flamegraph_nonzero_exit(tmp_path):
    profiler = write_script(tmp_path, "broken.sh", "echo no permission >&2; exit 1\n")
    with pytest.raises(ProfilerFailed, match="exited 1"):
        profile_flamegraph("true", f"{profiler} {{cmd}} {{out}}")


def test_profile_flamegraph_missing_output(tmp_path):
    profiler = write_script(tmp_path, "silent.sh", "exit 0\n")
    with pytest.raises(ProfilerFailed, match="no output"):
        profile_flamegraph("true", f"{profiler} {{cmd}} {{out}}")


def test_profile_flamegraph_malformed_output_propagates(tmp_path):
    profiler = stub_profiler(tmp_path, "main;hot notanumber\\n")
    with pytest.raises(MalformedLine):
        profile_flamegraph("true", f"{profiler} {{cmd}} {{out}}")


def test_profile_flamegraph_empty_output_is_empty_graph(tmp_path):
    profiler = stub_profiler(tmp_path, "")
    graph = profile_flamegraph("true", f"{profiler} {{cmd}} {{out}}")
    assert len(graph) == 0
