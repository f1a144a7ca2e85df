"""Deterministic random streams.

Everything that needs randomness (toy model weights, dataset sampling, stub
embeddings) draws from a SplitMix64 stream so that runs are reproducible
bit-for-bit from a 64-bit seed, independently of numpy's global state.
"""

from __future__ import annotations

import math

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """SplitMix64 generator (Steele et al.); one u64 per step."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GOLDEN) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return (z ^ (z >> 31)) & _MASK64

    def next_float(self) -> float:
        # uniform in [0, 1), 53-bit resolution
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def gaussian(self) -> float:
        # Box-Muller; u1 in (0, 1] so log() is safe
        u1 = (self.next_u64() + 1) * (1.0 / (1 << 64))
        u2 = self.next_float()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randrange(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randrange needs n >= 1")
        # modulo bias is irrelevant here (n << 2**64); determinism is what matters
        return self.next_u64() % n

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def shuffle(self, items: list) -> None:
        # Fisher-Yates, in place
        for i in range(len(items) - 1, 0, -1):
            j = self.randrange(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, seq, k: int) -> list:
        """k distinct elements, order random (without replacement)."""
        if k > len(seq):
            raise ValueError(f"cannot sample {k} from {len(seq)} elements")
        pool = list(seq)
        out = []
        for _ in range(k):
            out.append(pool.pop(self.randrange(len(pool))))
        return out


def fnv1a64(data: "str | bytes") -> int:
    """FNV-1a 64-bit hash (of the UTF-8 encoding, for strings); used to seed
    per-token and per-content streams."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & _MASK64
    return h


def unit_vector(seed: int, dim: int) -> "list[float]":
    """Deterministic unit vector: gaussian draws from SplitMix64(seed), normalized."""
    rng = SplitMix64(seed)
    v = [rng.gaussian() for _ in range(dim)]
    norm = math.sqrt(sum(x * x for x in v))
    if norm == 0.0:  # astronomically unlikely; keep behavior defined
        v = [1.0] + [0.0] * (dim - 1)
        norm = 1.0
    return [x / norm for x in v]
