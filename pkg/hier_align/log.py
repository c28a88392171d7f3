"""
Logging helpers for hier_align.
"""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Optional

from tqdm import tqdm

FALLBACK_LOG_PATH = Path("./hier_align.log")

_log_path: Optional[Path] = None


def set_log_path(path: Optional[Path]) -> None:
    """Route log_line output to ``path`` (usually ``<run_dir>/run.log``)."""
    global _log_path
    _log_path = path


def current_log_path() -> Optional[Path]:
    return _log_path


def log_line(s: str) -> None:
    """Append to the run log; without one (or if it is unwritable) use FALLBACK_LOG_PATH."""
    if _log_path is not None:
        try:
            _log_path.parent.mkdir(parents=True, exist_ok=True)
            with _log_path.open("a", encoding="utf-8") as f:
                f.write(s + "\n")
            return
        except Exception:
            pass
    try:
        with FALLBACK_LOG_PATH.open("a", encoding="utf-8") as f:
            f.write(s + "\n")
    except Exception:
        return


def info(msg: str) -> None:
    tqdm.write(f"[INFO] {msg}")
    log_line(f"[INFO] {msg}")


def warn(msg: str) -> None:
    tqdm.write(f"[WARN] {msg}", file=sys.stderr)
    log_line(f"[WARN] {msg}")


def die(msg: str, code: int = 1) -> None:
    tqdm.write(f"[FATAL] {msg}", file=sys.stderr)
    log_line(f"[FATAL] {msg}")
    sys.exit(code)
