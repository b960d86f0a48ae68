#!/usr/bin/env python3
"""Regenerate the golden prompt snapshots from tests/prompt_cases.py.

Run only when a template change is intended; review the diff before
committing, since the snapshots exist to catch accidental drift.
"""

from __future__ import annotations

import sys
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(REPO / "tests"))

from perfloop.llm import render_messages  # noqa: E402

import prompt_cases  # noqa: E402


def main() -> None:
    out_dir = REPO / "tests" / "data" / "golden"
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, messages in prompt_cases.build_cases().items():
        path = out_dir / f"{name}.txt"
        path.write_text(render_messages(messages))
        print(f"wrote {path.relative_to(REPO)}")


if __name__ == "__main__":
    main()
