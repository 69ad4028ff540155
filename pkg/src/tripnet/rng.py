"""Named deterministic random streams.

Every random draw in the library flows from (seed, stream name), never from
global state or creation order. Two consequences the tests rely on:

* a parameter's initial values depend only on its own name, so two networks
  that share a layer get bit-identical weights for it under the same seed;
* dropout masks for a recurrent layer are drawn one step at a time from the
  layer's own stream, so the masks for the first L steps do not depend on
  how much padding follows.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _spawn_key(name: str) -> tuple[int, ...]:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator determined solely by (seed, name)."""
    seq = np.random.SeedSequence(seed, spawn_key=_spawn_key(name))
    return np.random.Generator(np.random.PCG64(seq))


class DropoutStreams:
    """Inverted-dropout mask source with one sequential stream per name."""

    def __init__(self, seed: int, scope: str = ""):
        self._seed = seed
        self._scope = scope
        self._gens: dict[str, np.random.Generator] = {}

    def mask(self, name: str, shape, rate: float) -> np.ndarray:
        if not 0.0 < rate < 1.0:
            raise ValueError(f"dropout rate {rate} outside (0, 1)")
        gen = self._gens.get(name)
        if gen is None:
            gen = stream(self._seed, f"{self._scope}/{name}")
            self._gens[name] = gen
        keep = gen.random(shape) >= rate
        return keep / (1.0 - rate)


class FrozenDropout:
    """Records masks from a source on first use and replays them afterwards.

    Makes a dropout-bearing forward pass a deterministic function of its
    inputs, which the finite-difference gradient checker requires.
    """

    def __init__(self, source: DropoutStreams):
        self._source = source
        self._recorded: dict[str, list[np.ndarray]] = {}
        self._cursor: dict[str, int] = {}

    def mask(self, name: str, shape, rate: float) -> np.ndarray:
        seen = self._recorded.setdefault(name, [])
        i = self._cursor.get(name, 0)
        if i < len(seen):
            cached = seen[i]
            if cached.shape != tuple(shape):
                raise ValueError(f"frozen dropout shape changed for {name!r}")
        else:
            seen.append(self._source.mask(name, shape, rate))
            cached = seen[i]
        self._cursor[name] = i + 1
        return cached

    def rewind(self) -> None:
        """Restart replay from the first recorded mask of every stream."""
        self._cursor = {}
