"""
File helpers shared by datasets, metrics logs and reports.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, Tuple

from hier_align.errors import DataError


def write_file(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(content, encoding="utf-8")


def write_bytes(path: Path, content: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(content)


def dumps_canonical(obj: Any) -> str:
    """Stable JSON text: sorted keys, no whitespace, so reruns are byte-identical."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: Path, records: Iterable[Dict[str, Any]]) -> int:
    lines = [dumps_canonical(r) for r in records]
    write_file(path, "".join(line + "\n" for line in lines))
    return len(lines)


def append_jsonl(path: Path, record: Dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as f:
        f.write(dumps_canonical(record) + "\n")


def iter_jsonl(path: Path) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield (line number, record) pairs; blank lines are skipped."""
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object per line")
            yield lineno, rec


def write_json(path: Path, obj: Any) -> None:
    write_file(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")
