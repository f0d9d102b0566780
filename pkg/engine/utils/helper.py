import hashlib
import json
import os

import numpy as np
from scipy.special import expit, logit

# flat prior on the intercept is uniform on (-LOGIT_BOUND, LOGIT_BOUND)
LOGIT_BOUND = 20.0

__all__ = [
    "LOGIT_BOUND",
    "expit",
    "logit",
    "log_expit",
    "log1m_expit",
    "child_rng",
    "fresh_seed",
    "file_digest",
    "payload_digest",
    "worker_count",
]


def log_expit(x):
    return -np.logaddexp(0.0, -np.asarray(x, dtype=float))


def log1m_expit(x):
    return -np.logaddexp(0.0, np.asarray(x, dtype=float))


def child_rng(root_seed: int, *keys: int) -> np.random.Generator:
    """Generator for the job identified by `keys`, independent of scheduling."""
    seq = np.random.SeedSequence([int(root_seed), *[int(k) for k in keys]])
    return np.random.default_rng(seq)


def fresh_seed() -> int:
    return int(np.random.SeedSequence().entropy % (2**63))


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def payload_digest(payload) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("SMOOTHGAUGE_THREADS")
    n = requested or os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)
