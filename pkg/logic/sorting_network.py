"""
Data-independent compare-exchange schedules for oblivious sorting.

The schedule is Batcher's merge-exchange network for arbitrary n (no
power-of-two padding). It is built once per input count and replayed over
every coordinate in parallel by the aggregators.
"""
import logging
from dataclasses import dataclass
from functools import lru_cache

logger = logging.getLogger(__name__)

# Comparison counts published for the reference deployment.
REFERENCE_COUNTS = {10: 31, 100: 1077}


@dataclass(frozen=True)
class SortingSchedule:
    n: int
    layers: tuple  # tuple of layers, each a tuple of disjoint (i, j) pairs with i < j

    @property
    def pairs(self) -> list:
        return [pair for layer in self.layers for pair in layer]

    def __len__(self) -> int:
        return sum(len(layer) for layer in self.layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    def apply(self, values: list) -> list:
        """Plaintext replay, used to check that the schedule sorts."""
        out = list(values)
        for layer in self.layers:
            for i, j in layer:
                if out[i] > out[j]:
                    out[i], out[j] = out[j], out[i]
        return out


@lru_cache(maxsize=None)
def build_bitonic_network(n: int) -> SortingSchedule:
    if n < 1:
        raise ValueError(f"sorting network needs n >= 1, got {n}")
    layers = []
    if n > 1:
        t = (n - 1).bit_length()
        p = 1 << (t - 1)
        while p > 0:
            q = 1 << (t - 1)
            r = 0
            d = p
            while True:
                layer = tuple((i, i + d) for i in range(n - d) if (i & p) == r)
                if layer:
                    layers.append(layer)
                if q == p:
                    break
                d = q - p
                q >>= 1
                r = p
            p >>= 1
    schedule = SortingSchedule(n, tuple(layers))
    logger.debug("sorting network n=%d: %d comparisons in %d layers", n, len(schedule), schedule.depth)
    expected = REFERENCE_COUNTS.get(n)
    if expected is not None and expected != len(schedule):
        logger.warning("sorting network n=%d has %d comparisons, reference count is %d", n, len(schedule), expected)
    return schedule
