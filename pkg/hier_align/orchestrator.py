"""
Labelled step runner shared by every subcommand.
"""

from __future__ import annotations

import datetime as dt
import time
from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional

from tqdm import tqdm

from hier_align.log import current_log_path, log_line


@dataclass
class Step:
    label: str
    fn: Callable[[], Any]
    skip_if: Optional[Callable[[], bool]] = None
    result: Any = field(default=None, repr=False)


def run_steps(steps: List[Step], bar: Any) -> None:
    for step in steps:
        if step.skip_if and step.skip_if():
            tqdm.write(f"[SKIP] {step.label}")
            log_line(f"[SKIP] {step.label}")
            bar.update(1)
            continue
        tqdm.write(f"[STEP] {step.label}")
        log_line(f"[STEP] {step.label}")
        t0 = time.time()
        step.result = step.fn()
        elapsed = time.time() - t0
        tqdm.write(f"[DONE] {step.label} ({elapsed:.1f}s)")
        log_line(f"[DONE] {step.label} ({elapsed:.1f}s)")
        bar.update(1)


def run_pipeline(title: str, steps: List[Step], *, progress: bool = True) -> List[Step]:
    """Run ``steps`` under one progress bar, bracketed by START/END marks in the run log."""
    log_line(f"=== START {title} {dt.datetime.now(dt.timezone.utc).isoformat()} ===")
    path = current_log_path()
    if path is not None:
        tqdm.write(f"[INFO] Logging to: {path}")
    try:
        with tqdm(total=len(steps), desc=title, unit="step", disable=not progress) as bar:
            run_steps(steps, bar)
    finally:
        log_line(f"=== END {title} {dt.datetime.now(dt.timezone.utc).isoformat()} ===")
    return steps
