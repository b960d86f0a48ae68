"""Collapsed-stack flame graph parsing and hotspot extraction.

The collapsed text format is one line per sampled stack::

    funcA;funcB;funcC 5

Frames are semicolon-separated, caller first, and the last whitespace-separated
token is the sample count.  Hotspots are ranked by attributing each stack's
full count to its rightmost (leaf) frame, the location where the CPU sample
was taken, after filtering stacks through an application-level anchor.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

# Sample counts and their totals must stay within a signed 64-bit range;
# silent wraparound would corrupt hotspot rankings.
MAX_TOTAL_SAMPLES = 2**63 - 1

# Anchor that matches every entry (whole-program profiles with no
# application-level filter).
MATCH_ALL_ANCHOR = "*"


class MalformedLine(ValueError):
    """A collapsed-format line that cannot be parsed, with its line number."""

    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


@dataclass(frozen=True)
class StackTrace:
    """One sampled call stack, outermost caller first, leaf last."""

    frames: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.frames:
            raise ValueError("stack trace must contain at least one frame")
        for frame in self.frames:
            if not frame:
                raise ValueError("empty frame in stack trace")
            if ";" in frame or "\n" in frame:
                raise ValueError(f"frame {frame!r} contains ';' or newline")
            # Leading/trailing whitespace cannot survive the text format, so
            # reject it up front to keep serialization round-trips exact.
            if frame != frame.strip():
                raise ValueError(f"frame {frame!r} has leading/trailing whitespace")

    @property
    def leaf(self) -> str:
        return self.frames[-1]


@dataclass(frozen=True)
class FlameGraph:
    """Ordered entries of (stack trace, sample count) pairs.

    Duplicate traces are kept distinct; merging happens only during hotspot
    aggregation, preserving fidelity to raw profiler output.
    """

    entries: tuple[tuple[StackTrace, int], ...]

    def __post_init__(self) -> None:
        total = 0
        for trace, count in self.entries:
            if count < 0:
                raise ValueError(f"negative sample count {count} for {trace.frames}")
            total += count
            if total > MAX_TOTAL_SAMPLES:
                raise ValueError("total sample count exceeds the 63-bit limit")

    @property
    def total_samples(self) -> int:
        return sum(count for _, count in self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class Hotspot:
    """A leaf frame with its aggregated sample count and share of the
    filtered total."""

    frame: str
    cumulative_count: int
    share: float


def parse_collapsed(text: str) -> FlameGraph:
    """Parse collapsed-stack text into a ``FlameGraph``.

    Blank lines are skipped.  Each remaining line must end in a positive
    base-10 count (runs of spaces/tabs before it are tolerated); everything
    before the count, trimmed, is the semicolon-separated trace.

    Raises ``MalformedLine`` (with line number) for a missing or non-integer
    count, a zero or negative count, an empty frame, or a total beyond the
    63-bit limit.
    """
    entries: list[tuple[StackTrace, int]] = []
    total = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise MalformedLine(line_no, "missing sample count")
        stack_part, count_part = parts
        try:
            count = int(count_part)
        except ValueError:
            raise MalformedLine(line_no, f"non-integer sample count {count_part!r}") from None
        if count <= 0:
            raise MalformedLine(line_no, f"sample count must be >= 1, got {count}")
        if count > MAX_TOTAL_SAMPLES:
            raise MalformedLine(line_no, "sample count exceeds the 63-bit limit")
        total += count
        if total > MAX_TOTAL_SAMPLES:
            raise MalformedLine(line_no, "total sample count exceeds the 63-bit limit")
        frames = stack_part.strip().split(";")
        if any(not f for f in frames):
            raise MalformedLine(line_no, "empty frame between semicolons")
        try:
            trace = StackTrace(tuple(frames))
        except ValueError as exc:
            raise MalformedLine(line_no, str(exc)) from None
        entries.append((trace, count))
    return FlameGraph(tuple(entries))


def serialize_collapsed(fg: FlameGraph) -> str:
    """Emit the parse format: one `frames... count` line per entry.

    ``parse_collapsed(serialize_collapsed(fg))`` equals ``fg`` entry for
    entry.
    """
    return "".join(f"{';'.join(trace.frames)} {count}\n" for trace, count in fg.entries)


def _anchor_matches(trace: StackTrace, anchor: str) -> bool:
    if anchor == MATCH_ALL_ANCHOR:
        return True
    return any(anchor in frame for frame in trace.frames)


def top_hotspots(fg: FlameGraph, anchor: str, k: int) -> list[Hotspot]:
    """Return the ``k`` hottest leaf frames among anchor-matching entries.

    An entry matches when any frame contains ``anchor`` as a case-sensitive
    substring (``"*"`` matches everything); its full count is attributed to
    the entry's rightmost frame.  Results are sorted by aggregated count
    descending, ties broken by frame name ascending, and each carries its
    share of the filtered total.
    """
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if not anchor:
        raise ValueError("anchor must be non-empty")
    counts: Counter[str] = Counter()
    for trace, count in fg.entries:
        if _anchor_matches(trace, anchor):
            counts[trace.leaf] += count
    total = sum(counts.values())
    if total > MAX_TOTAL_SAMPLES:
        raise ValueError("aggregated sample count exceeds the 63-bit limit")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    return [
        Hotspot(frame=frame, cumulative_count=count, share=count / total)
        for frame, count in ranked[:k]
    ]
