"""Map profile hotspots to source units and patch rewrites back.

A user-supplied symbol index turns frame names into (file, unit) pairs; a
unit locator finds the unit's line span so the snippet can be extracted as a
self-contained rewrite target.  Files beyond a line budget are skipped.
Patching validates the snippet still matches before replacing it, and a
line-level diff summarizes how much a rewrite changed.
"""

from __future__ import annotations

import logging
import re
import subprocess
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .flame import Hotspot

log = logging.getLogger(__name__)

DEFAULT_LOC_LIMIT = 1000

# Locator commands signal a missing unit with this exit code; anything else
# nonzero is an infrastructure failure.
LOCATOR_UNIT_NOT_FOUND_EXIT = 3


class Granularity(Enum):
    FUNCTION_LEVEL = "function_level"
    CLASS_LEVEL = "class_level"


class IndexResolutionError(ValueError):
    """The symbol index itself is unusable (empty key, missing file)."""


class UnitNotFound(LookupError):
    """The named unit does not exist in the file."""


class LocatorError(RuntimeError):
    """An external locator command failed for a reason other than
    unit-not-found."""


class StalePatch(ValueError):
    """The file changed between extraction and patching."""


@dataclass(frozen=True)
class IndexEntry:
    """One substring rule: frame names containing ``key`` map to ``unit`` in
    ``file``.  ``granularity`` overrides the caller's level when set."""

    key: str
    file: str
    unit: str
    granularity: Granularity | None = None


@dataclass(frozen=True)
class SymbolIndex:
    entries: tuple[IndexEntry, ...]

    def __post_init__(self) -> None:
        for i, entry in enumerate(self.entries):
            if not entry.key:
                raise IndexResolutionError(f"entries[{i}]: key must be non-empty")
            if not entry.file:
                raise IndexResolutionError(f"entries[{i}]: file must be non-empty")
            if not entry.unit:
                raise IndexResolutionError(f"entries[{i}]: unit must be non-empty")

    def match(self, frame: str) -> IndexEntry | None:
        """First entry whose key occurs in the frame name, or None."""
        for entry in self.entries:
            if entry.key in frame:
                return entry
        return None


@dataclass(frozen=True)
class Target:
    file: str
    unit: str
    granularity: Granularity
    span: tuple[int, int]
    snippet: str

    def __post_init__(self) -> None:
        start, end = self.span
        if not (1 <= start <= end):
            raise ValueError(f"invalid span {self.span}")
        if len(self.snippet.split("\n")) != end - start + 1:
            raise ValueError("snippet line count does not match span")


@dataclass(frozen=True)
class LocDiff:
    same: int
    modified: int
    added: int
    deleted: int

    @property
    def original_loc(self) -> int:
        return self.same + self.modified + self.deleted

    @property
    def optimized_loc(self) -> int:
        return self.same + self.modified + self.added


def count_loc(text: str) -> int:
    """Non-blank line count; comment lines count, whitespace-only lines do
    not."""
    return sum(1 for line in text.splitlines() if line.strip())


# --- unit locators ---


def _sanitize(source: str) -> str:
    """Blank out comment and string/char literal contents, preserving every
    character position and all newlines, so identifier search and brace
    balancing cannot be fooled by text inside them."""
    out = list(source)
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        nxt = source[i + 1] if i + 1 < n else ""
        if ch == "/" and nxt == "/":
            while i < n and source[i] != "\n":
                out[i] = " "
                i += 1
        elif ch == "/" and nxt == "*":
            out[i] = out[i + 1] = " "
            i += 2
            while i < n and not (source[i] == "*" and i + 1 < n and source[i + 1] == "/"):
                if source[i] != "\n":
                    out[i] = " "
                i += 1
            if i < n:
                out[i] = out[i + 1] = " "
                i += 2
        elif ch in "\"'":
            quote = ch
            i += 1
            while i < n and source[i] != quote:
                if source[i] == "\\" and i + 1 < n:
                    out[i] = out[i + 1] = " "
                    i += 2
                    continue
                if source[i] != "\n":
                    out[i] = " "
                i += 1
            i += 1
        else:
            i += 1
    return "".join(out)


def _line_of(source: str, offset: int) -> int:
    return source.count("\n", 0, offset) + 1


def _balance_braces(sanitized: str, open_offset: int) -> int:
    """Offset of the brace closing the one at ``open_offset``."""
    depth = 0
    for i in range(open_offset, len(sanitized)):
        if sanitized[i] == "{":
            depth += 1
        elif sanitized[i] == "}":
            depth -= 1
            if depth == 0:
                return i
    raise UnitNotFound("unbalanced braces after definition")


class BraceLocator:
    """Builtin span finder for brace-delimited languages (C family, Java).

    Functions are located by ``name(`` followed, after the matching paren,
    by a ``{`` before any ``;`` (which would mark a prototype).  Classes are
    located by the ``class name`` keyword pair.  The span starts on the line
    holding the matched name, so signatures split across earlier lines stay
    outside it; fixtures and real targets keep the signature on one line, and
    other layouts belong to an external locator command.
    """

    def locate(self, path: str, source: str, unit: str, granularity: Granularity) -> tuple[int, int]:
        sanitized = _sanitize(source)
        if granularity is Granularity.CLASS_LEVEL:
            return self._locate_class(sanitized, source, unit)
        return self._locate_function(sanitized, source, unit)

    def _locate_function(self, sanitized: str, source: str, unit: str) -> tuple[int, int]:
        for match in re.finditer(rf"\b{re.escape(unit)}\s*\(", sanitized):
            close = self._match_paren(sanitized, match.end() - 1)
            if close is None:
                continue
            brace = self._first_body_brace(sanitized, close + 1)
            if brace is None:
                continue
            end_offset = _balance_braces(sanitized, brace)
            return _line_of(source, match.start()), _line_of(source, end_offset)
        raise UnitNotFound(f"function {unit!r} not found")

    def _locate_class(self, sanitized: str, source: str, unit: str) -> tuple[int, int]:
        match = re.search(rf"\bclass\s+{re.escape(unit)}\b", sanitized)
        if match is None:
            raise UnitNotFound(f"class {unit!r} not found")
        brace = sanitized.find("{", match.end())
        if brace == -1:
            raise UnitNotFound(f"class {unit!r} has no body")
        end_offset = _balance_braces(sanitized, brace)
        return _line_of(source, match.start()), _line_of(source, end_offset)

    @staticmethod
    def _match_paren(sanitized: str, open_offset: int) -> int | None:
        depth = 0
        for i in range(open_offset, len(sanitized)):
            if sanitized[i] == "(":
                depth += 1
            elif sanitized[i] == ")":
                depth -= 1
                if depth == 0:
                    return i
        return None

    @staticmethod
    def _first_body_brace(sanitized: str, offset: int) -> int | None:
        # A '{' before any ';' marks a definition; ';' first marks a
        # prototype or declaration.
        for i in range(offset, len(sanitized)):
            if sanitized[i] == "{":
                return i
            if sanitized[i] == ";":
                return None
        return None


class CommandLocator:
    """External span finder: ``<command> <file> <unit> <granularity>`` must
    print ``start end`` (1-based inclusive) and exit 0, or exit 3 when the
    unit does not exist."""

    def __init__(self, command: str, timeout: float = 30.0):
        if not command:
            raise ValueError("locator command must be non-empty")
        self.command = command
        self.timeout = timeout

    def locate(self, path: str, source: str, unit: str, granularity: Granularity) -> tuple[int, int]:
        argv = [*self.command.split(), path, unit, granularity.value]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise LocatorError(f"locator {self.command!r} failed to run: {exc}") from exc
        if proc.returncode == LOCATOR_UNIT_NOT_FOUND_EXIT:
            raise UnitNotFound(f"unit {unit!r} not found by {self.command!r}")
        if proc.returncode != 0:
            raise LocatorError(
                f"locator {self.command!r} exited {proc.returncode}: {proc.stderr.strip()}"
            )
        fields = proc.stdout.split()
        if len(fields) != 2:
            raise LocatorError(f"locator output {proc.stdout!r} is not 'start end'")
        try:
            start, end = int(fields[0]), int(fields[1])
        except ValueError:
            raise LocatorError(f"locator output {proc.stdout!r} is not 'start end'") from None
        line_count = len(source.split("\n")) - (1 if source.endswith("\n") else 0)
        if not (1 <= start <= end <= max(line_count, 1)):
            raise LocatorError(f"locator span {start}-{end} outside file of {line_count} lines")
        return start, end


# --- resolution and patching ---


def extract_target(
    path: str,
    source: str,
    unit: str,
    granularity: Granularity,
    locator=None,
) -> Target:
    """Locate ``unit`` in ``source`` and cut its snippet."""
    locator = locator or BraceLocator()
    start, end = locator.locate(path, source, unit, granularity)
    lines = source.split("\n")
    snippet = "\n".join(lines[start - 1 : end])
    return Target(file=path, unit=unit, granularity=granularity, span=(start, end), snippet=snippet)


def resolve_targets(
    hotspots: list[Hotspot],
    index: SymbolIndex,
    granularity: Granularity,
    loc_limit: int = DEFAULT_LOC_LIMIT,
    locator=None,
) -> list[Target]:
    """Turn ranked hotspots into deduplicated, size-gated rewrite targets.

    Each hotspot resolves through the first index entry whose key is a
    substring of its frame name.  Hotspots with no entry, files beyond
    ``loc_limit`` non-blank lines, and units the locator cannot find are
    skipped with a logged notice.  Duplicate (file, unit) pairs keep only the
    highest-ranked hotspot.  A missing file is a malformed index and raises
    ``IndexResolutionError``.
    """
    if loc_limit < 1:
        raise ValueError(f"loc_limit must be >= 1, got {loc_limit}")
    targets: list[Target] = []
    seen: set[tuple[str, str]] = set()
    for hotspot in hotspots:
        entry = index.match(hotspot.frame)
        if entry is None:
            log.info("skipping %s: no index entry matches", hotspot.frame)
            continue
        if (entry.file, entry.unit) in seen:
            continue
        path = Path(entry.file)
        if not path.is_file():
            raise IndexResolutionError(f"index file {entry.file} does not exist")
        source = path.read_text()
        if count_loc(source) > loc_limit:
            log.info("skipping %s: oversized (%d > %d LOC)", entry.file, count_loc(source), loc_limit)
            seen.add((entry.file, entry.unit))
            continue
        effective = entry.granularity or granularity
        try:
            target = extract_target(entry.file, source, entry.unit, effective, locator)
        except UnitNotFound:
            log.info("skipping %s: unit_not_found (%s)", entry.file, entry.unit)
            seen.add((entry.file, entry.unit))
            continue
        seen.add((entry.file, entry.unit))
        targets.append(target)
    return targets


def apply_patch(file_contents: str, target: Target, new_unit_code: str) -> str:
    """Replace the target's span with ``new_unit_code``.

    The snippet must still match the span exactly (``StalePatch`` otherwise);
    every character outside the span is preserved.
    """
    lines = file_contents.split("\n")
    trailing_newline = file_contents.endswith("\n")
    line_count = len(lines) - (1 if trailing_newline else 0)
    start, end = target.span
    if end > line_count:
        raise StalePatch(f"span {target.span} beyond file of {line_count} lines")
    current = "\n".join(lines[start - 1 : end])
    if current != target.snippet:
        raise StalePatch(f"lines {start}-{end} no longer match the extracted snippet")
    new_lines = new_unit_code.split("\n")
    if new_lines and new_lines[-1] == "" and len(new_lines) > 1:
        new_lines.pop()
    return "\n".join(lines[: start - 1] + new_lines + lines[end:])


# --- LOC diff ---


def _diff_lines(text: str) -> list[str]:
    return [line.rstrip() for line in text.splitlines() if line.strip()]


def _lcs_matches(a: list[str], b: list[str]) -> list[tuple[int, int]]:
    """Index pairs of a canonical longest common subsequence (full DP table;
    inputs here are bounded by the file-size gate).

    Ties between equally good alignments are broken by rules that mirror
    under operand swap (longer remaining side first, then lexicographic), so
    swapping the inputs yields the exactly mirrored matching.  The gap
    statistics built on top inherit that symmetry.
    """
    la, lb = len(a), len(b)
    dp = [[0] * (lb + 1) for _ in range(la + 1)]
    for i in range(la - 1, -1, -1):
        row = dp[i]
        nxt = dp[i + 1]
        ai = a[i]
        for j in range(lb - 1, -1, -1):
            if ai == b[j]:
                row[j] = nxt[j + 1] + 1
            else:
                row[j] = nxt[j] if nxt[j] >= row[j + 1] else row[j + 1]
    matches = []
    i = j = 0
    while i < la and j < lb:
        if a[i] == b[j]:
            matches.append((i, j))
            i += 1
            j += 1
        elif dp[i + 1][j] > dp[i][j + 1]:
            i += 1
        elif dp[i + 1][j] < dp[i][j + 1]:
            j += 1
        elif (la - i, a[i]) > (lb - j, b[j]):
            i += 1
        else:
            j += 1
    return matches


def loc_diff(original: str, optimized: str) -> LocDiff:
    """Line-level change statistics between two code snippets.

    Blank lines are ignored and trailing whitespace is trimmed before
    comparison.  Matched lines (longest common subsequence) count as same;
    within each gap between matches, original and optimized leftovers pair up
    as modified, and the excess counts as deleted or added.
    """
    a = _diff_lines(original)
    b = _diff_lines(optimized)
    matches = _lcs_matches(a, b)
    same = len(matches)
    modified = added = deleted = 0
    prev_a = prev_b = -1
    for ia, ib in [*matches, (len(a), len(b))]:
        gap_a = ia - prev_a - 1
        gap_b = ib - prev_b - 1
        paired = min(gap_a, gap_b)
        modified += paired
        deleted += gap_a - paired
        added += gap_b - paired
        prev_a, prev_b = ia, ib
    return LocDiff(same=same, modified=modified, added=added, deleted=deleted)
