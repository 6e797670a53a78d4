"""Portable 64-bit generator: xoshiro256** seeded through splitmix64.

Used wherever reproducibility across languages matters (augmentation,
batch shuffling). Bulk parameter initialisation uses numpy's PCG64 instead.

Test vectors (seed 42, first ten ``next_u64`` outputs) are pinned in
``tests/test_rng.py`` and listed in the README.
"""

MASK64 = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


class Xoshiro256:
    """xoshiro256** with the four state words filled from splitmix64(seed)."""

    def __init__(self, seed=0, state=None):
        if state is not None:
            if len(state) != 4 or not any(state):
                raise ValueError("state must be four words, not all zero")
            self.s = [w & MASK64 for w in state]
        else:
            sm = SplitMix64(seed)
            self.s = [sm.next_u64() for _ in range(4)]

    def next_u64(self):
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self):
        """Uniform double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo, hi):
        return lo + (hi - lo) * self.random()

    def below(self, n):
        """Unbiased integer in [0, n) by modulo rejection."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n), swapping from the top down."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.below(i + 1)
            order[i], order[j] = order[j], order[i]
        return order

    def spawn_seed(self):
        return self.next_u64()
