"""Seeded counter-based random streams.

Every consumer asks for a generator by (stage, *indices).  The Philox key is
derived from the run seed and that path, so the draw for, say, rollout
iteration 17 does not depend on how many numbers earlier stages consumed.
That is what makes resume and reordering safe.
"""

import hashlib

import numpy as np

STAGES = ("task", "preference", "data", "init", "encoders", "scorer", "pretrain",
          "warmup", "rollout", "shuffle", "eval", "features")


def _key(seed: int, stage: str, indices) -> np.ndarray:
    h = hashlib.sha256(f"{int(seed)}/{stage}/{'/'.join(str(int(i)) for i in indices)}".encode())
    return np.frombuffer(h.digest()[:16], dtype=np.uint64).copy()


def stream(seed: int, stage: str, *indices: int) -> np.random.Generator:
    if stage not in STAGES:
        raise ValueError(f"unknown random stream {stage!r}; expected one of {STAGES}")
    return np.random.Generator(np.random.Philox(key=_key(seed, stage, indices)))
