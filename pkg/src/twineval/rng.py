"""Deterministic random-number plumbing.

Two pieces live here:

* a SplitMix64 counter generator used for environment stepping, so that
  ``step`` is a pure function of an integer state and trajectories are
  bit-reproducible across platforms and across the Python/numba twins of
  the sampling loops;
* the seed-splitting scheme used everywhere a parent seed has to fan out
  into independent child streams: ``child = blake2b("{parent}/{name}/{index}",
  digest_size=8)`` interpreted as a little-endian uint64.  The string form
  is part of the file-format contract (documented in the README) so that
  re-implementations can match outputs byte for byte.
"""

from __future__ import annotations

import hashlib

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / 9007199254740992.0  # 2**-53


def splitmix64_next(state: int) -> tuple[int, float]:
    """Advance a SplitMix64 state; return (new_state, uniform in [0, 1))."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    z = z ^ (z >> 31)
    return state, (z >> 11) * _INV_2_53


def split_seed(parent_seed: int, component: str, index: int = 0) -> int:
    """Derive a child seed from (parent, component name, index)."""
    payload = f"{int(parent_seed)}/{component}/{int(index)}".encode()
    digest = hashlib.blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "little")
