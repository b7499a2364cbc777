"""Worker-count resolution. LEANQ_THREADS caps parallelism globally;
it may change how fast results arrive, never what they are."""

from __future__ import annotations

import os


def resolve_workers(requested: int | None = None) -> int:
    """Clamp a requested worker count to the LEANQ_THREADS cap (if set)."""
    if requested is None:
        requested = os.cpu_count() or 1
    if requested < 1:
        requested = 1
    cap = os.environ.get("LEANQ_THREADS")
    if cap:
        try:
            cap_n = int(cap)
        except ValueError:
            return requested
        if cap_n >= 1:
            requested = min(requested, cap_n)
    return requested
