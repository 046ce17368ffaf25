# src/utils/seeding.py
import zlib

import numpy as np
import torch


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """
    Named random substream. The same (seed, name, extra) always yields the
    same generator, and streams with different names do not interact.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), key, *map(int, extra)]))


def seed_torch(seed: int, name: str = "torch") -> None:
    rng = substream(seed, name)
    torch.manual_seed(int(rng.integers(0, 2**31 - 1)))
