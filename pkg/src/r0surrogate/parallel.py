"""Thread-count resolution shared by the forest and the network."""

import os


def worker_count(requested: int) -> int:
    """``requested`` threads, or every core available to this process when it is 0."""
    if requested < 0:
        raise ValueError("thread count must be >= 0 (0 means all cores)")
    if requested:
        return int(requested)
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not on Linux
        return os.cpu_count() or 1
