"""Channel instances: the deterministic two-user setup and seeded random draws."""
from __future__ import annotations

import numpy as np

from .core import ChannelSet, InvalidArgument

# recorded in run manifests
GENERATOR_NAME = "numpy.random.Generator(PCG64)"


def deterministic_channel(nt: int, gamma: float, theta: float) -> ChannelSet:
    """Two users: h1 is all ones, h2 has entries of modulus ``gamma`` with phase step ``theta``.

    The stored vector is ``h2[m] = gamma * exp(-1j * m * theta)``, i.e. the
    Hermitian of the row of phasors ``[1, e^{j theta}, ...]``. Conjugating h2
    leaves every |h^H p|^2 and therefore every rate unchanged.
    """
    if nt < 1:
        raise InvalidArgument(f"nt must be >= 1, got {nt}")
    if not gamma > 0:
        raise InvalidArgument(f"gamma must be > 0, got {gamma}")
    m = np.arange(nt)
    h1 = np.ones(nt, dtype=complex)
    h2 = gamma * np.exp(-1j * m * theta)
    return ChannelSet(np.vstack([h1, h2]))


def random_channel(seed: int, nt: int, k: int) -> ChannelSet:
    """i.i.d. CN(0, 1) entries, reproducible for equal ``(seed, nt, k)``."""
    if nt < 1 or k < 1:
        raise InvalidArgument(f"nt and k must be >= 1, got nt={nt}, k={k}")
    rng = np.random.Generator(np.random.PCG64(seed))
    h = (rng.standard_normal((k, nt)) + 1j * rng.standard_normal((k, nt))) / np.sqrt(2.0)
    return ChannelSet(h)
