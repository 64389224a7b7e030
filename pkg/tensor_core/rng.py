from typing import Tuple

import numpy as np

from definitions import RngStream

ALGORITHM: str = 'philox-4x64'


class Rng:
    """Seeded Philox stream; (seed, stream, index) addresses an independent generator."""

    def __init__(self, seed: int, stream: RngStream, path: Tuple[int, ...] = ()) -> None:
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError(f'Seed {seed} is not an unsigned 64-bit integer.')
        self.seed: int = int(seed)
        self.stream: RngStream = stream
        self.path: Tuple[int, ...] = tuple(int(index) for index in path)
        self.algorithm: str = ALGORITHM
        entropy = [self.seed & 0xFFFFFFFF, self.seed >> 32, int(stream)] + list(self.path)
        self.generator: np.random.Generator = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(entropy)))

    def child(self, index: int) -> 'Rng':
        return Rng(self.seed, self.stream, self.path + (index,))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, std: float = 1.0, size=None):
        return self.generator.normal(0.0, std, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size=None, replace: bool = True) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def truncated_normal(self, shape: Tuple[int, ...], std: float = 0.02, bound: float = 2.0) -> np.ndarray:
        values: np.ndarray = self.generator.normal(0.0, 1.0, shape)
        outside: np.ndarray = np.abs(values) > bound
        while np.any(outside):
            values[outside] = self.generator.normal(0.0, 1.0, int(np.sum(outside)))
            outside = np.abs(values) > bound
        return values * std
