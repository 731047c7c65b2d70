import os


def worker_count() -> int:
    """Worker cap from ``NEURAL_EKF_THREADS`` (default: machine cores)."""
    raw = os.environ.get("NEURAL_EKF_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
