"""Allocator tuning for the repeated large temporaries of the numpy layers."""
from __future__ import annotations

import ctypes
import functools


@functools.cache
def keep_freed_memory(limit: int = 1 << 30) -> bool:
    """Ask glibc to keep freed buffers up to ``limit`` bytes instead of unmapping them.

    Training steps and tracked frames allocate and free the same tens-of-MB
    im2col and activation arrays; by default glibc hands each back to the
    kernel and the next call page-faults it in again, which costs 10-15% of
    wall time. Returns False where mallopt is unavailable (non-glibc platforms).
    """
    try:
        mallopt = ctypes.CDLL(None).mallopt
    except (OSError, AttributeError, TypeError):
        return False
    m_trim_threshold, m_mmap_threshold = -1, -3
    return bool(mallopt(m_mmap_threshold, limit)) and bool(mallopt(m_trim_threshold, limit))
