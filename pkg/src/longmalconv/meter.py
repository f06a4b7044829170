"""Peak transient allocation counter.

numpy reports its buffers to tracemalloc, so the traced peak over a block of
code is the largest amount of array memory alive at once, counted from the
level at entry. Memory-mapped input files are not counted; they are page
cache, not activations. Meters must not be nested.
"""

from __future__ import annotations

import tracemalloc


class PeakMeter:
    def __init__(self):
        self.peak = 0
        self._started = False
        self._base = 0

    def __enter__(self) -> "PeakMeter":
        self._started = not tracemalloc.is_tracing()
        if self._started:
            tracemalloc.start()
        tracemalloc.reset_peak()
        self._base = tracemalloc.get_traced_memory()[0]
        return self

    def __exit__(self, *exc):
        self.peak = max(0, tracemalloc.get_traced_memory()[1] - self._base)
        if self._started:
            tracemalloc.stop()
        return False


def measure_peak(fn, *args, **kwargs):
    """Run fn and return (result, peak transient bytes)."""
    with PeakMeter() as m:
        out = fn(*args, **kwargs)
    return out, m.peak
