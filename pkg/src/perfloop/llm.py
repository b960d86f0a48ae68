"""Chat backends, role prompts, reply parsing, and generator memory.

Three roles talk to one chat-completion seam: an advisor ranks catalog
patterns into hypotheses, a generator rewrites code with chain-of-thought
steps, an evaluator compares two measured versions.  Backends are pluggable:
a remote chat API for live runs, a scripted transcript for deterministic
offline replay.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Mapping

import requests
import yaml

from .catalog import Pattern
from .metrics import Metric

log = logging.getLogger(__name__)

ROLE_TAGS = ("advisor", "generator", "evaluator")

DEFAULT_TEMPERATURE = 0.7
DEFAULT_MAX_MEMORY_TURNS = 6

# Section headers double as ablation markers: a mode's prompt is a superset
# of a weaker mode's exactly when its header set is a superset.
SECTION_CODE = "## Source code"
SECTION_AST = "## Syntax tree"
SECTION_PROFILE = "## Profile hotspots"
SECTION_PATTERNS = "## Optimization patterns"
SECTION_FEEDBACK = "## Evaluator feedback"
SECTION_ERROR = "## Previous attempt error"
SECTION_TASK = "## Task"

# The one place the hypothesis reply grammar's separator is defined.
_HYPOTHESIS_SEPARATOR = "—"


class BackendUnavailable(RuntimeError):
    """The remote chat endpoint could not produce a completion."""


class TranscriptError(ValueError):
    """A scripted transcript file is malformed."""


class TranscriptExhausted(RuntimeError):
    """More completions were requested than the transcript holds."""


class TranscriptMismatch(RuntimeError):
    """The next transcript entry was recorded for a different role."""


class UnparseableReply(ValueError):
    """No hypothesis could be recovered from an advisor reply."""


class NoCodeBlock(ValueError):
    """A generator reply contained no fenced code block."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown role {self.role!r}")
        if not self.content:
            raise ValueError("message content must be non-empty")


@dataclass(frozen=True)
class Hypothesis:
    pattern_id: str
    rationale: str
    rank: int

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


@dataclass
class GeneratorMemory:
    """Bounded chronological record of generator exchanges.

    Each turn stores the full prompt sent and the raw reply.  When the cap
    is hit, the oldest turn is evicted first.
    """

    max_turns: int = DEFAULT_MAX_MEMORY_TURNS
    turns: list[tuple[tuple[ChatMessage, ...], str]] = field(default_factory=list)

    def append(self, prompt: tuple[ChatMessage, ...], response: str) -> None:
        self.turns.append((prompt, response))
        while len(self.turns) > self.max_turns:
            self.turns.pop(0)

    def __len__(self) -> int:
        return len(self.turns)


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    temperature: float = DEFAULT_TEMPERATURE
    endpoint: str | None = None
    model: str | None = None
    api_key: str | None = None
    transcript: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("remote_chat", "scripted"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if not (0.0 <= self.temperature <= 2.0):
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        if self.kind == "remote_chat" and not (self.endpoint and self.model):
            raise ValueError("remote_chat backend needs endpoint and model")
        if self.kind == "scripted" and not self.transcript:
            raise ValueError("scripted backend needs a transcript path")


class ScriptedBackend:
    """Replays recorded completions by call order.

    The transcript is an ordered list of ``{role_tag, text}`` records; the
    Nth completion call consumes the Nth record.  A role-tag disagreement
    means the call sequence diverged from the recording and raises
    ``TranscriptMismatch`` rather than returning the wrong text.
    """

    def __init__(self, entries: list[tuple[str, str]]):
        self._entries = list(entries)
        self._cursor = 0

    @classmethod
    def from_yaml(cls, data: bytes | str) -> "ScriptedBackend":
        try:
            doc = yaml.safe_load(data)
        except yaml.YAMLError as exc:
            raise TranscriptError(f"invalid YAML: {exc}") from None
        if not isinstance(doc, list):
            raise TranscriptError(f"transcript must be a list, got {type(doc).__name__}")
        entries: list[tuple[str, str]] = []
        for i, raw in enumerate(doc):
            if not isinstance(raw, dict) or set(raw) != {"role_tag", "text"}:
                raise TranscriptError(f"entry {i}: expected exactly role_tag and text fields")
            role_tag, text = raw["role_tag"], raw["text"]
            if role_tag not in ROLE_TAGS:
                raise TranscriptError(f"entry {i}: unknown role_tag {role_tag!r}")
            if not isinstance(text, str) or not text:
                raise TranscriptError(f"entry {i}: text must be a non-empty string")
            entries.append((role_tag, text))
        return cls(entries)

    @classmethod
    def from_file(cls, path: str) -> "ScriptedBackend":
        with open(path, "rb") as fh:
            return cls.from_yaml(fh.read())

    def complete(self, messages: list[ChatMessage], temperature: float, role_tag: str) -> str:
        if self._cursor >= len(self._entries):
            raise TranscriptExhausted(
                f"call {self._cursor + 1} ({role_tag}) beyond transcript of {len(self._entries)} entries"
            )
        recorded_tag, text = self._entries[self._cursor]
        if recorded_tag != role_tag:
            raise TranscriptMismatch(
                f"call {self._cursor + 1} is {role_tag} but transcript recorded {recorded_tag}"
            )
        self._cursor += 1
        return text


class RemoteChatBackend:
    """Thin client for the ubiquitous chat-completion wire shape: role-tagged
    messages in, assistant text out."""

    def __init__(self, endpoint: str, model: str, api_key: str | None = None, timeout: float = 120.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    def complete(self, messages: list[ChatMessage], temperature: float, role_tag: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": temperature,
            "messages": [{"role": m.role, "content": m.content} for m in messages],
        }
        try:
            response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            response.raise_for_status()
            body = response.json()
            text = body["choices"][0]["message"]["content"]
        except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendUnavailable(f"chat endpoint {self.endpoint} failed: {exc}") from exc
        if not isinstance(text, str) or not text:
            raise BackendUnavailable(f"chat endpoint {self.endpoint} returned empty content")
        return text


def make_backend(config: BackendConfig):
    if config.kind == "scripted":
        return ScriptedBackend.from_file(config.transcript)
    return RemoteChatBackend(config.endpoint, config.model, config.api_key)


def complete(backend, messages: list[ChatMessage], temperature: float, role_tag: str) -> str:
    """Single completion seam used by every role."""
    if not messages:
        raise ValueError("messages must be non-empty")
    if messages[0].role != "system":
        raise ValueError("first message must carry the system role")
    if role_tag not in ROLE_TAGS:
        raise ValueError(f"unknown role_tag {role_tag!r}")
    return backend.complete(messages, temperature, role_tag)


def render_messages(messages: list[ChatMessage]) -> str:
    """Flat text form of a message list, for snapshots and audit logs."""
    parts = [f"=== {m.role} ===\n{m.content}\n" for m in messages]
    return "".join(parts)


# --- advisor ---

_ADVISOR_SYSTEM = (
    "You are a performance advisor. You study source code, its runtime "
    "profile, and a catalog of optimization patterns, then rank which "
    "patterns are most likely to pay off."
)


def _format_patterns(patterns: list[Pattern], with_detection: bool) -> str:
    lines = []
    for p in patterns:
        lines.append(f"- {p.id}: {p.name}")
        lines.append(f"  intent: {p.intent}")
        if with_detection:
            lines.append(f"  detection: {p.detection}")
    return "\n".join(lines)


def build_advisor_prompt(
    code: str,
    profile_summary: str | None,
    candidate_patterns: list[Pattern],
    k: int = 1,
) -> list[ChatMessage]:
    """Messages asking for the top-``k`` pattern hypotheses.

    The profile section is omitted when no summary is available; the reply
    format is one line per hypothesis: ``rank. pattern_id {sep} rationale``.
    """
    if not candidate_patterns:
        raise ValueError("candidate_patterns must be non-empty")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    parts = [SECTION_CODE, "```", code, "```", ""]
    if profile_summary:
        parts += [SECTION_PROFILE, profile_summary, ""]
    parts += [SECTION_PATTERNS, _format_patterns(candidate_patterns, with_detection=True), ""]
    parts += [
        SECTION_TASK,
        f"Rank the {k} most promising patterns for this code. Reply with "
        f"exactly {k} lines, one per hypothesis, best first, each formatted as:",
        f"1. pattern_id {_HYPOTHESIS_SEPARATOR} one-sentence rationale",
        "Use only pattern ids listed above. No other text.",
    ]
    return [
        ChatMessage("system", _ADVISOR_SYSTEM),
        ChatMessage("user", "\n".join(parts)),
    ]


_HYPOTHESIS_LINE = re.compile(
    r"^\s*(\d+)[.)]\s+(\S+?)\s*(?:—|–|--|[-:])\s+(.*\S)\s*$"
)


def format_hypotheses(hypotheses: list[Hypothesis]) -> str:
    """Canonical reply text; ``parse_hypotheses`` inverts this exactly."""
    return "\n".join(
        f"{h.rank}. {h.pattern_id} {_HYPOTHESIS_SEPARATOR} {h.rationale}" for h in hypotheses
    )


def parse_hypotheses(text: str, catalog, k: int) -> list[Hypothesis]:
    """Recover ranked hypotheses from an advisor reply.

    Non-matching lines are ignored; hypotheses naming unknown or repeated
    pattern ids are dropped with a log notice.  Survivors keep their reply
    order, renumbered 1..n and truncated to ``k``.  An entirely unusable
    reply raises ``UnparseableReply``.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    found: list[tuple[str, str]] = []
    seen: set[str] = set()
    for line in text.splitlines():
        match = _HYPOTHESIS_LINE.match(line)
        if not match:
            continue
        _, pattern_id, rationale = match.groups()
        if catalog.by_id(pattern_id) is None:
            log.info("dropping hypothesis with unknown pattern id %r", pattern_id)
            continue
        if pattern_id in seen:
            log.info("dropping repeated hypothesis for pattern id %r", pattern_id)
            continue
        seen.add(pattern_id)
        found.append((pattern_id, rationale))
    if not found:
        raise UnparseableReply("no ranked hypothesis lines with known pattern ids")
    return [
        Hypothesis(pattern_id=pid, rationale=rat, rank=i)
        for i, (pid, rat) in enumerate(found[:k], start=1)
    ]


# --- generator ---

_GENERATOR_SYSTEM = (
    "You are a performance engineer. You rewrite one code unit at a time to "
    "make it faster or lighter while preserving its exact behavior and "
    "interface."
)


def build_generator_prompt(
    code: str,
    ast_text: str | None = None,
    flamegraph_text: str | None = None,
    patterns: list[Pattern] | None = None,
    feedback: str | None = None,
    error: str | None = None,
    memory: GeneratorMemory | None = None,
) -> list[ChatMessage]:
    """Messages asking for an optimized rewrite of ``code``.

    Optional context sections appear only when their argument is present;
    stronger pipeline modes pass more of them.  Past exchanges from
    ``memory`` are replayed oldest-first as user/assistant pairs (each turn
    contributes its final user message).
    """
    if not code:
        raise ValueError("code must be non-empty")
    parts = [SECTION_CODE, "```", code, "```", ""]
    if ast_text:
        parts += [SECTION_AST, ast_text, ""]
    if flamegraph_text:
        parts += [SECTION_PROFILE, flamegraph_text, ""]
    if patterns:
        parts += [SECTION_PATTERNS, _format_patterns(patterns, with_detection=False), ""]
    if feedback:
        parts += [SECTION_FEEDBACK, feedback, ""]
    if error:
        parts += [SECTION_ERROR, error, ""]
    parts += [
        SECTION_TASK,
        "Work in three steps:",
        "1. Identify the performance bottlenecks in the code above.",
        "2. Select which of the applicable optimization approaches to apply.",
        "3. Rewrite the unit, keeping its name, signature, and observable "
        "behavior identical.",
        "Explain steps 1 and 2 briefly, then give the complete rewritten "
        "unit in a single fenced code block. The code block must contain "
        "the full unit and nothing else.",
    ]
    messages = [ChatMessage("system", _GENERATOR_SYSTEM)]
    if memory is not None:
        for turn_prompt, response in memory.turns:
            user_messages = [m for m in turn_prompt if m.role == "user"]
            if user_messages:
                messages.append(user_messages[-1])
            messages.append(ChatMessage("assistant", response))
    messages.append(ChatMessage("user", "\n".join(parts)))
    return messages


_FENCED_BLOCK = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)


def extract_code(reply: str) -> str:
    """Body of the last fenced code block in ``reply``.

    Models often echo the original code first; the rewrite is the final
    block.  Raises ``NoCodeBlock`` when no complete fence pair exists.
    """
    blocks = _FENCED_BLOCK.findall(reply)
    if not blocks:
        raise NoCodeBlock("reply contains no fenced code block")
    return blocks[-1]


# --- evaluator ---

_EVALUATOR_SYSTEM = (
    "You are a performance reviewer. You compare an original and an "
    "optimized version of one code unit together with their measurements, "
    "and give concrete feedback for the next rewrite."
)


def _metric_table(
    original: Mapping[Metric, float], optimized: Mapping[Metric, float]
) -> str:
    rows = ["metric | original | optimized"]
    for metric in Metric:
        if metric in original or metric in optimized:
            a = f"{original[metric]:.6g}" if metric in original else "-"
            b = f"{optimized[metric]:.6g}" if metric in optimized else "-"
            rows.append(f"{metric.value} | {a} | {b}")
    return "\n".join(rows)


def build_evaluator_prompt(
    original_code: str,
    optimized_code: str,
    original_profile: Mapping[Metric, float],
    new_profile: Mapping[Metric, float],
    original_hotspots: str | None = None,
    new_hotspots: str | None = None,
) -> list[ChatMessage]:
    """Messages asking for targeted feedback on an accepted rewrite.

    Measurements appear as a side-by-side metric table; hotspot summaries
    are included when profiles were collected for both versions.
    """
    if not original_code or not optimized_code:
        raise ValueError("both code versions must be non-empty")
    parts = [
        SECTION_CODE,
        "Original version:",
        "```",
        original_code,
        "```",
        "Optimized version:",
        "```",
        optimized_code,
        "```",
        "",
        "## Measurements",
        _metric_table(original_profile, new_profile),
        "",
    ]
    if original_hotspots and new_hotspots:
        parts += [
            SECTION_PROFILE,
            "Original version:",
            original_hotspots,
            "Optimized version:",
            new_hotspots,
            "",
        ]
    parts += [
        SECTION_TASK,
        "State which metrics improved or regressed and by how much, judge "
        "whether the optimization went in the right direction, and give one "
        "or two concrete suggestions the next rewrite should try.",
    ]
    return [
        ChatMessage("system", _EVALUATOR_SYSTEM),
        ChatMessage("user", "\n".join(parts)),
    ]
