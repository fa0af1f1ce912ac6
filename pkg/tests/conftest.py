"""Shared builders for corpus and training tests, plus the acceptance
summary: one PASS/FAIL line per numbered criterion at the end of the run."""

import re

import numpy as np

from todadapt.terms import DomainTermSet

CRITERION_DETAILS: dict[int, str] = {}


def record_criterion(number: int, detail: str) -> None:
    """Stash a detail string for the end-of-run acceptance summary."""
    CRITERION_DETAILS[number] = detail


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes = {}
    for status in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m:
                outcomes[int(m.group(1))] = status
    if not outcomes:
        return
    label = {"passed": "PASS", "failed": "FAIL", "error": "FAIL", "skipped": "SKIP"}
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(outcomes):
        detail = CRITERION_DETAILS.get(n, "")
        suffix = f" ({detail})" if detail else ""
        terminalreporter.write_line(f"criterion {n:2d}: {label[outcomes[n]]}{suffix}")


def dump_terms() -> DomainTermSet:
    """Fixed term set used by the crafted web-dump scenarios."""
    return DomainTermSet(
        domain="transport",
        terms=("taxi", "train station", "fare"),
        top_n=3,
        scores={"taxi": 30.0, "train station": 20.0, "fare": 10.0},
    )


def crafted_dump(n_lines: int, seed: int = 2024) -> list[str]:
    """Deterministic dump mixing keepers, near misses, and cleanup fodder.

    Categories cycle so every prefix of the dump keeps the same mix: plain
    in-domain keepers, keepers with emails/urls that survive stripping,
    lines that collapse to nothing after stripping, token-boundary near
    misses (taxidermy), multiword-term matches, off-domain chatter, blank
    and whitespace lines, and exact duplicates.
    """
    rng = np.random.default_rng(seed)
    fillers = ["please", "today", "soon", "thanks", "now"]
    lines = []
    for i in range(n_lines):
        f = fillers[int(rng.integers(len(fillers)))]
        k = i % 8
        if k == 0:
            lines.append(f"the taxi fare into town was fair {f}")
        elif k == 1:
            lines.append(f"Email bob@ride.example about the TAXI rank {f}")
        elif k == 2:
            lines.append("www.taxi-times.example")
        elif k == 3:
            lines.append(f"taxidermy is an art form {f}")
        elif k == 4:
            lines.append(f"meet me at the train station around five {f}")
        elif k == 5:
            lines.append(f"the weather is lovely this week {f}")
        elif k == 6:
            lines.append("   " if i % 16 == 6 else "")
        else:
            lines.append("the taxi fare into town was fair please")
    return lines
