"""Counter-based random streams.

Paths are grouped into fixed blocks of ``BLOCK`` paths. Every (seed, block,
role) triple owns a Philox key, and the Philox counter is repositioned at
the start of each grid step. Draws are always made for a whole block, so the
numbers consumed by path ``p`` depend only on ``(seed, p, role, step)`` and
never on how many paths are simulated alongside it or on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np

BLOCK = 1024

ROLES = {
    "init": 0,
    "diffusion": 1,
    "chain": 2,
    "events": 3,
    "marks": 4,
    "particles": 5,
    "jitter": 6,
}

INIT_STEP = 2**62

T = TypeVar("T")


def _key(seed: int, block: int, role: str) -> np.ndarray:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(block), ROLES[role]))
    return ss.generate_state(2, np.uint64)


class PathStreams:
    """Random streams for the contiguous path range ``[offset, offset + npaths)``."""

    def __init__(self, seed: int, offset: int, npaths: int, roles: Sequence[str] = tuple(ROLES)):
        if npaths <= 0:
            raise ValueError("npaths must be positive")
        self.seed = int(seed)
        self.offset = int(offset)
        self.npaths = int(npaths)
        first = offset // BLOCK
        last = (offset + npaths - 1) // BLOCK
        self._slices: list[tuple[int, int]] = []
        for b in range(first, last + 1):
            lo = max(offset, b * BLOCK) - b * BLOCK
            hi = min(offset + npaths, (b + 1) * BLOCK) - b * BLOCK
            self._slices.append((lo, hi))
        self._gens: dict[str, list[tuple[np.random.Philox, np.random.Generator]]] = {}
        for role in roles:
            gens = []
            for b in range(first, last + 1):
                bg = np.random.Philox(key=_key(seed, b, role))
                gens.append((bg, np.random.Generator(bg)))
            self._gens[role] = gens

    def seek(self, step: int) -> None:
        """Reposition every stream at the start of grid step ``step``."""
        for gens in self._gens.values():
            for bg, _ in gens:
                st = bg.state
                st["state"]["counter"] = np.array([0, step, 0, 0], dtype=np.uint64)
                st["buffer_pos"] = 4
                st["has_uint32"] = 0
                st["uinteger"] = 0
                bg.state = st

    def _draw(self, role: str, method: str, tail: tuple[int, ...]) -> np.ndarray:
        parts = []
        for (_, gen), (lo, hi) in zip(self._gens[role], self._slices):
            arr = getattr(gen, method)(size=(BLOCK,) + tail)
            parts.append(arr[lo:hi])
        return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)

    def normal(self, role: str, *tail: int) -> np.ndarray:
        return self._draw(role, "standard_normal", tuple(tail))

    def uniform(self, role: str, *tail: int) -> np.ndarray:
        return self._draw(role, "random", tuple(tail))

    def exponential(self, role: str, *tail: int) -> np.ndarray:
        return self._draw(role, "standard_exponential", tuple(tail))


def block_chunks(npaths: int, workers: int) -> list[tuple[int, int]]:
    """Split ``npaths`` into at most ``workers`` block-aligned (offset, count) chunks."""
    nblocks = -(-npaths // BLOCK)
    workers = max(1, min(int(workers), nblocks))
    per = -(-nblocks // workers)
    chunks = []
    for w in range(workers):
        lo = w * per * BLOCK
        hi = min(npaths, (w + 1) * per * BLOCK)
        if lo < hi:
            chunks.append((lo, hi - lo))
    return chunks


def map_paths(npaths: int, threads: int, fn: Callable[[int, int], T]) -> list[T]:
    """Run ``fn(offset, count)`` over block-aligned chunks, results in path order."""
    chunks = block_chunks(npaths, threads)
    if len(chunks) == 1:
        return [fn(*chunks[0])]
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        return list(pool.map(lambda c: fn(*c), chunks))
