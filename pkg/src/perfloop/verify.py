"""Correctness gate: build, test, and optional golden-output comparison.

A candidate that fails here is dead: it must never be measured or selected.
Output comparison is advisory by contract; weak test suites can pass a
broken rewrite, so the golden check records the disagreement for the report
without being a third pass/fail gate.
"""

from __future__ import annotations

import os
import signal
import subprocess
from dataclasses import dataclass
from enum import Enum

DEFAULT_TIMEOUT_S = 300.0

# Failure excerpts keep only this much of the combined output tail.
DETAIL_TAIL_BYTES = 4096


class MatchMode(Enum):
    EXACT = "exact"
    LINE_SET = "line_set"


class CommandTimeout(RuntimeError):
    """A build/test/run command exceeded its deadline; hung candidates are
    failures, never passes."""

    def __init__(self, phase: str, detail: str):
        self.phase = phase
        self.detail = detail
        super().__init__(f"{phase} command timed out")


@dataclass(frozen=True)
class ValidationResult:
    compiled: bool
    tests_passed: bool
    output_matched: bool | None
    detail: str

    def __post_init__(self) -> None:
        if self.tests_passed and not self.compiled:
            raise ValueError("tests cannot pass without compiling")

    @property
    def passed(self) -> bool:
        return self.compiled and self.tests_passed


def _tail(data: bytes) -> str:
    return data[-DETAIL_TAIL_BYTES:].decode("utf-8", errors="replace")


def _run(cmd: str, cwd: str, timeout: float, phase: str, split_streams: bool = False):
    """Run a shell command in its own process group so a timeout can kill
    the whole tree, not just the shell."""
    proc = subprocess.Popen(
        cmd,
        shell=True,
        cwd=cwd,
        stdout=subprocess.PIPE,
        stderr=subprocess.PIPE if split_streams else subprocess.STDOUT,
        start_new_session=True,
    )
    try:
        out, err = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        out, err = proc.communicate()
        partial = (out or b"") + (err or b"")
        raise CommandTimeout(phase, _tail(partial)) from None
    return proc.returncode, out or b"", err or b""


def output_match(golden: bytes, actual: bytes, mode: MatchMode = MatchMode.EXACT) -> bool:
    """Compare program output to the golden reference.

    ``exact`` is byte equality; ``line_set`` compares multisets of stripped
    non-blank lines, tolerating the reorderings parallel runs produce.
    """
    if mode is MatchMode.EXACT:
        return golden == actual
    def lines(data: bytes) -> dict[bytes, int]:
        counts: dict[bytes, int] = {}
        for line in data.split(b"\n"):
            stripped = line.strip()
            if stripped:
                counts[stripped] = counts.get(stripped, 0) + 1
        return counts

    return lines(golden) == lines(actual)


def validate(
    workdir: str,
    build_cmd: str,
    test_cmd: str,
    timeout: float = DEFAULT_TIMEOUT_S,
    run_cmd: str | None = None,
    golden: bytes | None = None,
    match_mode: MatchMode = MatchMode.EXACT,
) -> ValidationResult:
    """Build then test the tree at ``workdir``; optionally compare output.

    A failed build skips the tests; any failure captures the output tail in
    ``detail``.  When both ``run_cmd`` and ``golden`` are given and the
    tests passed, the program runs once and its stdout is compared under
    ``match_mode``; a crashing run counts as a mismatch.  Hung commands
    raise ``CommandTimeout`` with the phase name.
    """
    if not build_cmd or not test_cmd:
        raise ValueError("build_cmd and test_cmd must be non-empty")
    code, out, _ = _run(build_cmd, workdir, timeout, "build")
    if code != 0:
        return ValidationResult(False, False, None, _tail(out))
    code, out, _ = _run(test_cmd, workdir, timeout, "test")
    if code != 0:
        return ValidationResult(True, False, None, _tail(out))
    if run_cmd is None or golden is None:
        return ValidationResult(True, True, None, "")
    code, out, err = _run(run_cmd, workdir, timeout, "run", split_streams=True)
    if code != 0:
        return ValidationResult(True, True, False, _tail(out + err))
    matched = output_match(golden, out, match_mode)
    detail = "" if matched else _tail(out)
    return ValidationResult(True, True, matched, detail)
