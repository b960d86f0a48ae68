"""Optimization pattern catalog: schema, validation, and prefiltering.

A catalog is a YAML document with a top-level ``version`` and a ``patterns``
list.  Each pattern names a recurring performance fix: what family it belongs
to, how to detect the opportunity in profile data, a worked example, which
metrics it tends to move, and what kind of code change it implies.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from importlib import resources

import yaml

from .metrics import Metric


class Theme(Enum):
    ALGORITHMIC = "algorithmic"
    MEMORY_AND_DATA_LOCALITY = "memory_and_data_locality"
    CONTROL_FLOW = "control_flow"
    IO = "io"
    CONCURRENCY_AND_PARALLELISM = "concurrency_and_parallelism"
    LANGUAGE_RUNTIME = "language_runtime"
    ENERGY = "energy"


class ChangeType(Enum):
    FILTER_REMOVE = "filter_remove"
    REARRANGE = "rearrange"
    ENERGY_FOCUSED = "energy_focused"
    REWRITE_MODIFY = "rewrite_modify"


class SchemaError(ValueError):
    """Catalog document violates the schema; the message names the offending
    field path and, when known, the pattern id."""

    def __init__(self, path: str, reason: str, pattern_id: str | None = None):
        self.path = path
        self.reason = reason
        self.pattern_id = pattern_id
        suffix = f" (pattern {pattern_id!r})" if pattern_id else ""
        super().__init__(f"{path}: {reason}{suffix}")


@dataclass(frozen=True)
class Pattern:
    id: str
    name: str
    theme: Theme
    intent: str
    detection: str
    example: str
    metrics: frozenset[Metric]
    change_type: ChangeType

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("pattern id must be non-empty")
        if not self.metrics:
            raise ValueError(f"pattern {self.id}: metrics must be non-empty")


@dataclass(frozen=True)
class Catalog:
    version: str
    patterns: tuple[Pattern, ...]

    def by_id(self, pattern_id: str) -> Pattern | None:
        for pattern in self.patterns:
            if pattern.id == pattern_id:
                return pattern
        return None


_PATTERN_FIELDS = {
    "id": str,
    "name": str,
    "theme": str,
    "intent": str,
    "detection": str,
    "example": str,
    "metrics": list,
    "change_type": str,
}


def _require_str(value: object, path: str) -> str:
    if not isinstance(value, str):
        raise SchemaError(path, f"expected a string, got {type(value).__name__}")
    if not value.strip():
        raise SchemaError(path, "must be non-empty")
    return value


def _parse_enum(enum_cls: type[Enum], value: str, path: str) -> Enum:
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(member.value for member in enum_cls)
        raise SchemaError(path, f"unknown value {value!r}; expected one of: {allowed}") from None


def _parse_pattern(raw: object, path: str) -> Pattern:
    if not isinstance(raw, dict):
        raise SchemaError(path, f"expected a mapping, got {type(raw).__name__}")
    # Best-effort id for error context; its own validation happens below.
    known_id = raw.get("id") if isinstance(raw.get("id"), str) else None
    unknown = set(raw) - set(_PATTERN_FIELDS)
    if unknown:
        field = sorted(unknown)[0]
        raise SchemaError(f"{path}.{field}", "unknown field", known_id)
    missing = set(_PATTERN_FIELDS) - set(raw)
    if missing:
        field = sorted(missing)[0]
        raise SchemaError(f"{path}.{field}", "missing required field", known_id)

    theme = _parse_enum(Theme, _require_str(raw["theme"], f"{path}.theme"), f"{path}.theme")
    change_type = _parse_enum(
        ChangeType, _require_str(raw["change_type"], f"{path}.change_type"), f"{path}.change_type"
    )

    raw_metrics = raw["metrics"]
    if not isinstance(raw_metrics, list):
        raise SchemaError(
            f"{path}.metrics", f"expected a list, got {type(raw_metrics).__name__}", known_id
        )
    if not raw_metrics:
        raise SchemaError(f"{path}.metrics", "must list at least one metric", known_id)
    metrics = set()
    for i, item in enumerate(raw_metrics):
        metric = _parse_enum(
            Metric, _require_str(item, f"{path}.metrics[{i}]"), f"{path}.metrics[{i}]"
        )
        if metric in metrics:
            raise SchemaError(f"{path}.metrics[{i}]", f"duplicate metric {item!r}", known_id)
        metrics.add(metric)

    return Pattern(
        id=_require_str(raw["id"], f"{path}.id"),
        name=_require_str(raw["name"], f"{path}.name"),
        theme=theme,
        intent=_require_str(raw["intent"], f"{path}.intent"),
        detection=_require_str(raw["detection"], f"{path}.detection"),
        example=_require_str(raw["example"], f"{path}.example"),
        metrics=frozenset(metrics),
        change_type=change_type,
    )


def load_catalog(data: bytes | str) -> Catalog:
    """Parse and validate a catalog document.

    Raises ``SchemaError`` naming the field path for any violation: unknown
    or missing fields, wrong types, unknown enum values, duplicate pattern
    ids, or an empty pattern list.
    """
    try:
        doc = yaml.safe_load(data)
    except yaml.YAMLError as exc:
        raise SchemaError("<document>", f"invalid YAML: {exc}") from None
    if not isinstance(doc, dict):
        raise SchemaError("<document>", f"expected a mapping, got {type(doc).__name__}")
    unknown = set(doc) - {"version", "patterns"}
    if unknown:
        raise SchemaError(sorted(unknown)[0], "unknown field")
    if "version" not in doc:
        raise SchemaError("version", "missing required field")
    if "patterns" not in doc:
        raise SchemaError("patterns", "missing required field")
    version = doc["version"]
    # Bare YAML scalars like `version: 1` arrive as ints; normalize to the
    # string the type declares.
    if isinstance(version, int) and not isinstance(version, bool):
        version = str(version)
    if not isinstance(version, str) or not version.strip():
        raise SchemaError("version", f"expected a non-empty string, got {version!r}")
    raw_patterns = doc["patterns"]
    if not isinstance(raw_patterns, list):
        raise SchemaError("patterns", f"expected a list, got {type(raw_patterns).__name__}")
    if not raw_patterns:
        raise SchemaError("patterns", "must list at least one pattern")

    patterns = []
    seen_ids: set[str] = set()
    for i, raw in enumerate(raw_patterns):
        pattern = _parse_pattern(raw, f"patterns[{i}]")
        if pattern.id in seen_ids:
            raise SchemaError(f"patterns[{i}].id", "duplicate pattern id", pattern.id)
        seen_ids.add(pattern.id)
        patterns.append(pattern)
    return Catalog(version=version, patterns=tuple(patterns))


def serialize_catalog(catalog: Catalog) -> str:
    """Emit YAML that ``load_catalog`` parses back to an equal catalog."""
    doc = {
        "version": catalog.version,
        "patterns": [
            {
                "id": p.id,
                "name": p.name,
                "theme": p.theme.value,
                "intent": p.intent,
                "detection": p.detection,
                "example": p.example,
                "metrics": sorted(m.value for m in p.metrics),
                "change_type": p.change_type.value,
            }
            for p in catalog.patterns
        ],
    }
    return yaml.safe_dump(doc, sort_keys=False, allow_unicode=True)


def load_seed_catalog() -> Catalog:
    """Load the pattern catalog shipped with the package."""
    data = resources.files("perfloop").joinpath("data/seed_catalog.yaml").read_bytes()
    return load_catalog(data)


def prefilter_patterns(
    catalog: Catalog,
    objective_metrics: set[Metric],
    themes: set[Theme] | None = None,
) -> list[Pattern]:
    """Patterns whose metrics intersect the objective, in catalog order.

    An optional theme set narrows the result further.  An empty result is
    legal; callers decide whether to fall back to the full catalog.
    """
    if not objective_metrics:
        raise ValueError("objective_metrics must be non-empty")
    out = []
    for pattern in catalog.patterns:
        if not (pattern.metrics & objective_metrics):
            continue
        if themes is not None and pattern.theme not in themes:
            continue
        out.append(pattern)
    return out
