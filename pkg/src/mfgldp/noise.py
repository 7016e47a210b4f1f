"""Counter-based uniform variates keyed by (replication, particle, time, role).

Every variate is a pure function of its key, so any subset of a run can be
regenerated independently and in any order. Keys are folded in one level at a
time: each level runs a SplitMix64 stream (state ``h + (k + 1) * golden`` passed
through the SplitMix64 finalizer) started from the hash of the previous level.
"""

from __future__ import annotations

import numpy as np

STATE, ACTION, ANCESTOR = 0, 1, 2
ROLES = ("state", "action", "ancestor")
N_ROLES = len(ROLES)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_TO_UNIT = 2.0**-53


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def _fold(h, k) -> np.ndarray:
    k = np.asarray(k, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _finalize(np.asarray(h, dtype=np.uint64) + (k + np.uint64(1)) * _GOLDEN)


class NoiseDriver:
    """Uniform variates on [0, 1) derived from a 64-bit master seed.

    ``uniforms(rep, particle, time, role)`` broadcasts its integer arguments.
    For bulk work, ``particle_keys`` hashes the (rep, particle) prefix once and
    ``draw`` finishes the key with (time, role).
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & 0xFFFFFFFFFFFFFFFF
        self._root = _fold(np.uint64(0), np.uint64(self.master_seed))

    def particle_keys(self, replication, particle) -> np.ndarray:
        return _fold(_fold(self._root, replication), particle)

    @staticmethod
    def draw(keys: np.ndarray, time: int, role: int) -> np.ndarray:
        h = _fold(keys, np.uint64(time * N_ROLES + role))
        return (h >> _S11).astype(np.float64) * _TO_UNIT

    def uniforms(self, replication, particle, time, role) -> np.ndarray:
        time = np.asarray(time, dtype=np.uint64)
        role = np.asarray(role, dtype=np.uint64)
        keys = self.particle_keys(replication, particle)
        h = _fold(keys, time * np.uint64(N_ROLES) + role)
        return (h >> _S11).astype(np.float64) * _TO_UNIT
