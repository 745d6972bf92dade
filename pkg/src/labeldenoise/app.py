"""Application entry point for labeldenoise."""
from __future__ import annotations

import sys
from typing import Sequence

from .cli.commands import run


def main(argv: Sequence[str] | None = None) -> int:
    return run(list(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    raise SystemExit(main())
