"""Small torch helpers shared by the trainable modules."""

from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np
import torch

DTYPE = torch.float64


def to_tensor(arr) -> torch.Tensor:
    """Copy array-like input into a float64 tensor (safe for read-only arrays)."""
    return torch.from_numpy(np.array(arr, dtype=np.float64))


@contextlib.contextmanager
def single_threaded() -> Iterator[None]:
    """Run torch single-threaded; removes inter-op overhead on tiny tensors
    and keeps reductions bitwise reproducible regardless of host core count."""
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)
