"""Checksummed run records and the human-readable summary table.

Each optimized target serializes to a canonical JSON payload (sorted keys,
workdir-relative paths, no timestamps) wrapped in a document carrying a
schema version and the payload's sha256.  Identical runs therefore produce
byte-identical documents, and any post-hoc edit to a stored outcome is
detected when the document is read back.
"""

from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

from .bench import MeasurementProfile
from .diagnose import CandidateVariant, OptimizationOutcome
from .metrics import DEFAULT_IMPROVEMENT_THRESHOLD, GainReport, Metric, geometric_mean
from .targetmap import Target

SCHEMA_VERSION = 1

RUN_FILE = "run.json"
SUMMARY_FILE = "summary.txt"
TARGETS_DIR = "targets"
OUTCOME_FILE = "outcome.json"
PROMPTS_DIR = "prompts"
PATCHED_FILE = "patched.txt"
FLAMEGRAPHS_DIR = "flamegraphs"


class ChecksumError(RuntimeError):
    """A stored outcome document does not match its recorded digest."""


def _relative_file(path: str, workdir: str) -> str:
    try:
        return str(Path(path).relative_to(workdir))
    except ValueError:
        # Outside the tree; keep the name only rather than leak a host path.
        return Path(path).name


def profile_payload(profile: MeasurementProfile) -> dict:
    payload: dict = {
        "latency_ms": profile.latency_ms,
        "peak_rss_kb": profile.peak_rss_kb,
        "runs": {metric.value: list(raw) for metric, raw in profile.runs.items()},
    }
    if profile.cpu_cycles is not None:
        payload["cpu_cycles"] = profile.cpu_cycles
    if profile.throughput is not None:
        payload["throughput"] = profile.throughput
        payload["throughput_unit"] = profile.throughput_unit
    if profile.energy_joules is not None:
        payload["energy_joules"] = profile.energy_joules
    return payload


def gains_payload(gains: GainReport) -> dict:
    return {
        "gains": {metric.value: value for metric, value in gains.gains.items()},
        "improved": {metric.value: flag for metric, flag in gains.improved.items()},
        "loc_diff": {
            "same": gains.loc_diff.same,
            "modified": gains.loc_diff.modified,
            "added": gains.loc_diff.added,
            "deleted": gains.loc_diff.deleted,
        },
        "objective_score": gains.objective_score,
        "threshold": gains.threshold,
    }


def variant_payload(variant: CandidateVariant) -> dict:
    validation = variant.validation
    return {
        "iteration": variant.iteration,
        "attempt": variant.attempt,
        "code": variant.code,
        "validation": {
            "compiled": validation.compiled,
            "tests_passed": validation.tests_passed,
            "output_matched": validation.output_matched,
            "detail": validation.detail,
        },
        "profile": None if variant.profile is None else profile_payload(variant.profile),
        "gains": None if variant.gains is None else gains_payload(variant.gains),
    }


def target_payload(target: Target, workdir: str) -> dict:
    return {
        "file": _relative_file(target.file, workdir),
        "unit": target.unit,
        "granularity": target.granularity.value,
        "span": list(target.span),
        "snippet": target.snippet,
    }


def outcome_payload(outcome: OptimizationOutcome, workdir: str) -> dict:
    selected = outcome.selected_variant
    return {
        "target": target_payload(outcome.target, workdir),
        "baseline_profile": profile_payload(outcome.baseline_profile),
        "variants": [variant_payload(v) for v in outcome.variants],
        "selected": (
            {"kind": "original_retained"}
            if selected is None
            else {
                "kind": "variant",
                "iteration": selected.iteration,
                "attempt": selected.attempt,
            }
        ),
        "transcript_log": [
            {"role_tag": e.role_tag, "prompt": e.prompt, "response": e.response}
            for e in outcome.transcript_log
        ],
        "notes": list(outcome.notes),
    }


def _canonical_bytes(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode(
        "utf-8"
    )


def outcome_document(outcome: OptimizationOutcome, workdir: str) -> dict:
    payload = outcome_payload(outcome, workdir)
    return {
        "schema_version": SCHEMA_VERSION,
        "sha256": hashlib.sha256(_canonical_bytes(payload)).hexdigest(),
        "outcome": payload,
    }


def dumps_document(document: dict) -> str:
    return json.dumps(document, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def verify_document(document: dict) -> dict:
    """Return the payload after checking its digest (``ChecksumError`` if
    the stored bytes were altered)."""
    if not isinstance(document, dict) or "outcome" not in document or "sha256" not in document:
        raise ChecksumError("document is missing outcome or sha256 fields")
    digest = hashlib.sha256(_canonical_bytes(document["outcome"])).hexdigest()
    if digest != document["sha256"]:
        raise ChecksumError(
            f"outcome digest mismatch: stored {document['sha256'][:12]}…, computed {digest[:12]}…"
        )
    return document["outcome"]


def load_outcome(path: str | Path) -> dict:
    """Read, digest-check, and return one stored outcome payload."""
    try:
        document = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{path}: not valid JSON: {exc}") from None
    return verify_document(document)


# --- summary table ---

_METRIC_ORDER = list(Metric)


def _summary_metrics(payloads: list[dict]) -> list[Metric]:
    present = set()
    for payload in payloads:
        for variant in payload["variants"]:
            if variant["gains"] is not None:
                present.update(variant["gains"]["gains"])
    return [m for m in _METRIC_ORDER if m.value in present]


def _selected_variant_payload(payload: dict) -> dict | None:
    sel = payload["selected"]
    if sel["kind"] != "variant":
        return None
    for variant in payload["variants"]:
        if variant["iteration"] == sel["iteration"] and variant["attempt"] == sel["attempt"]:
            return variant
    return None


def _yes_no(flag: bool | None) -> str:
    if flag is None:
        return "n/a"
    return "yes" if flag else "no"


def render_summary(
    payloads: list[dict], threshold: float = DEFAULT_IMPROVEMENT_THRESHOLD
) -> str:
    """Fixed-width table over outcome payloads, plus aggregate footer.

    Gains shown are the selected variant's; targets that kept their
    original show dashes in the table but enter the footer aggregates at
    1.00x, so whole-run numbers never improve by dropping failures.
    """
    metrics = _summary_metrics(payloads)
    header = ["Target", "Correct", "Output Match"] + [m.value for m in metrics] + ["Selected"]
    rows = [header]
    footer_gains: dict[Metric, list[float]] = {m: [] for m in metrics}

    for payload in payloads:
        unit = payload["target"]["unit"]
        chosen = _selected_variant_payload(payload)
        if chosen is None:
            row = [unit, "no", "n/a"] + ["-" for _ in metrics] + ["original retained"]
            for metric in metrics:
                footer_gains[metric].append(1.0)
        else:
            gains = chosen["gains"]["gains"]
            cells = []
            for metric in metrics:
                if metric.value in gains:
                    value = gains[metric.value]
                    cells.append(f"{value:.2f}x")
                    footer_gains[metric].append(value)
                else:
                    cells.append("-")
                    footer_gains[metric].append(1.0)
            row = [
                unit,
                "yes",
                _yes_no(chosen["validation"]["output_matched"]),
                *cells,
                f"iteration {chosen['iteration']}, attempt {chosen['attempt']}",
            ]
        rows.append(row)

    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [
        "  ".join(cell.ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in rows
    ]

    lines.append("")
    if payloads and metrics:
        lines.append(
            f"Aggregates over {len(payloads)} target(s); retained originals count as 1.00x:"
        )
        for metric in metrics:
            values = footer_gains[metric]
            improved = sum(1 for g in values if g >= 1.0 + threshold)
            share = 100.0 * improved / len(values)
            lines.append(
                f"  {metric.value}: %Opt {share:.1f}%  geomean {geometric_mean(values):.2f}x"
            )
    else:
        lines.append("No targets were optimized.")
    return "\n".join(lines) + "\n"


# --- run directory ---


def _slug(name: str) -> str:
    cleaned = re.sub(r"[^A-Za-z0-9_.-]+", "-", name).strip("-")
    return cleaned or "target"


def write_run_directory(
    run_dir: str | Path,
    outcomes: list[OptimizationOutcome],
    workdir: str,
    threshold: float = DEFAULT_IMPROVEMENT_THRESHOLD,
) -> Path:
    """Persist the full audit trail for one run; returns the summary path.

    Layout: ``run.json`` (index), ``summary.txt``, and one
    ``targets/NNN-unit/`` directory per outcome holding the checksummed
    ``outcome.json``, every prompt/response, the accepted rewrite when one
    exists, and any collapsed-stack captures.
    """
    root = Path(run_dir)
    root.mkdir(parents=True, exist_ok=True)

    payloads = []
    target_dirs = []
    for i, outcome in enumerate(outcomes, start=1):
        name = f"{i:03d}-{_slug(outcome.target.unit)}"
        target_dirs.append(name)
        tdir = root / TARGETS_DIR / name
        tdir.mkdir(parents=True, exist_ok=True)

        document = outcome_document(outcome, workdir)
        payloads.append(document["outcome"])
        (tdir / OUTCOME_FILE).write_text(dumps_document(document))

        prompts = tdir / PROMPTS_DIR
        prompts.mkdir(exist_ok=True)
        for seq, entry in enumerate(outcome.transcript_log, start=1):
            body = f"{entry.prompt}\n=== response ===\n{entry.response}\n"
            (prompts / f"{seq:03d}-{entry.role_tag}.txt").write_text(body)

        chosen = outcome.selected_variant
        if chosen is not None:
            (tdir / PATCHED_FILE).write_text(chosen.code)

        if outcome.flamegraphs:
            fdir = tdir / FLAMEGRAPHS_DIR
            fdir.mkdir(exist_ok=True)
            for label, text in sorted(outcome.flamegraphs.items()):
                (fdir / f"{_slug(label)}.folded").write_text(text)

    (root / RUN_FILE).write_text(
        json.dumps(
            {"schema_version": SCHEMA_VERSION, "targets": target_dirs},
            sort_keys=True,
            indent=2,
        )
        + "\n"
    )
    summary = render_summary(payloads, threshold)
    (root / SUMMARY_FILE).write_text(summary)
    return root / SUMMARY_FILE


def regenerate_summary(
    run_dir: str | Path, threshold: float = DEFAULT_IMPROVEMENT_THRESHOLD
) -> str:
    """Rebuild the summary table from stored outcomes, verifying digests.

    Byte-identical to the table written at run time; raises
    ``FileNotFoundError`` for a missing directory and ``ChecksumError``
    for tampered outcomes.
    """
    root = Path(run_dir)
    run_file = root / RUN_FILE
    if not run_file.is_file():
        raise FileNotFoundError(f"{run_file} does not exist")
    index = json.loads(run_file.read_text())
    payloads = [
        load_outcome(root / TARGETS_DIR / name / OUTCOME_FILE) for name in index["targets"]
    ]
    return render_summary(payloads, threshold)
