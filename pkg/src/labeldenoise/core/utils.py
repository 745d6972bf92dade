"""Utility helpers used across the labeldenoise core modules."""
from __future__ import annotations

import hashlib
import math
import re
from pathlib import Path
from typing import Iterable


def slugify(value: str) -> str:
    """Turn arbitrary text into a filesystem friendly slug."""
    value = value.strip().lower()
    value = re.sub(r"[^a-z0-9]+", "-", value)
    value = value.strip("-")
    return value or "run"


def ensure_directory(path: Path) -> None:
    """Create the directory (and parents) if it does not already exist."""
    path.mkdir(parents=True, exist_ok=True)


def selection_count(alpha: float, count: int) -> int:
    """Return ``ceil(alpha * count)`` without float representation error adding a pixel."""
    return int(math.ceil(round(alpha * count, 9)))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_files(paths: Iterable[Path], root: Path | None = None) -> str:
    """Content hash over files in a stable order, keyed by their path relative to ``root``."""
    digest = hashlib.sha256()
    for path in sorted(paths):
        name = str(path.relative_to(root)) if root is not None else path.name
        digest.update(name.encode("utf-8"))
        digest.update(b"\0")
        digest.update(path.read_bytes())
    return digest.hexdigest()


def parse_class_list(value: str | None) -> list[int]:
    """Parse ``"3,5, 7"`` into ``[3, 5, 7]``; empty input gives an empty list."""
    if not value:
        return []
    return [int(part) for part in value.split(",") if part.strip()]
