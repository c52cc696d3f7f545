"""Peak-allocation accounting built on tracemalloc.

numpy registers its array buffers with tracemalloc, so the traced peak inside
the context covers temporary arrays too.  Used to verify that the sparse
descriptor flow path never holds volume-sized buffers, while the dense
baseline necessarily does.
"""

from __future__ import annotations

import tracemalloc
from contextlib import contextmanager
from dataclasses import dataclass


@dataclass
class AllocationReport:
    peak_bytes: int = 0


@contextmanager
def track_peak_allocations():
    """Context manager yielding an AllocationReport with the traced peak in bytes."""
    report = AllocationReport()
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    baseline, _ = tracemalloc.get_traced_memory()
    try:
        yield report
    finally:
        _, peak = tracemalloc.get_traced_memory()
        report.peak_bytes = max(0, peak - baseline)
        if not was_tracing:
            tracemalloc.stop()
