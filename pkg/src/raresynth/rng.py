"""Seed derivation.

Every stochastic step draws from a stream keyed by a tuple of integers, e.g.
``(global_seed, ratio_index, mode_index, fold, seed_index)``. Keys are hashed
through :class:`numpy.random.SeedSequence`, so a key always maps to the same
63-bit seed no matter which process or in which order it is requested. This is
what makes parallel and serial sweeps produce identical results.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Iterator

import numpy as np
import torch


def _as_int(part: int | str) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if part < 0:
        raise ValueError(f"seed key components must be non-negative, got {part}")
    return int(part)


def derive_seed(*key: int | str) -> int:
    """Map a key tuple to a seed in ``[0, 2**63)``."""
    seq = np.random.SeedSequence([_as_int(k) for k in key])
    lo, hi = seq.generate_state(2, dtype=np.uint32)
    return int((int(hi) << 32 | int(lo)) & ((1 << 63) - 1))


def torch_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def numpy_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(int(seed))


@contextlib.contextmanager
def seeded_torch(seed: int) -> Iterator[None]:
    """Run a block (typically module construction) under a fixed global torch seed.

    The previous global RNG state is restored on exit.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield
