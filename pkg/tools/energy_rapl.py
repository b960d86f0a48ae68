#!/usr/bin/env python3
"""Package-energy meter backed by the powercap RAPL counters.

Two calling modes, matching the measurement harness's wrapper contract:

    energy_rapl.py --probe              exit 0 iff the counters are readable
    energy_rapl.py <command> [args...]  run the command, pass its stdout
                                        through, then append one line with
                                        the consumed energy in joules

Counters are sampled before and after the workload across every top-level
``intel-rapl:N`` package domain, with wraparound corrected against each
domain's ``max_energy_range_uj``.  Reading usually needs root.
"""

import subprocess
import sys
from pathlib import Path

POWERCAP = Path("/sys/class/powercap")


def package_domains() -> list[Path]:
    # Top-level packages only; subdomains (core, uncore, dram) would be
    # double-counted against their parent.
    return sorted(
        entry
        for entry in POWERCAP.glob("intel-rapl:*")
        if ":" not in entry.name.split("intel-rapl:", 1)[1]
    )


def read_uj(domain: Path) -> int:
    return int((domain / "energy_uj").read_text())


def probe() -> int:
    domains = package_domains()
    if not domains:
        print("energy_rapl.py: no intel-rapl package domains", file=sys.stderr)
        return 1
    try:
        for domain in domains:
            read_uj(domain)
    except (OSError, ValueError) as exc:
        print(f"energy_rapl.py: cannot read counters: {exc}", file=sys.stderr)
        return 1
    return 0


def main(argv: list[str]) -> int:
    if argv and argv[0] == "--probe":
        return probe()
    if not argv:
        print("usage: energy_rapl.py <command> [args...]", file=sys.stderr)
        return 2

    domains = package_domains()
    ranges = [int((d / "max_energy_range_uj").read_text()) for d in domains]
    before = [read_uj(d) for d in domains]
    status = subprocess.call(argv)
    if status != 0:
        return status
    after = [read_uj(d) for d in domains]

    total_uj = 0
    for start, end, limit in zip(before, after, ranges):
        delta = end - start
        if delta < 0:
            delta += limit + 1
        total_uj += delta
    print(total_uj / 1e6)
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
