import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from tensor_core.rng import Rng
from utility.errors import MaskError

MIN_BLOCK_AREA: int = 4
ASPECT_RANGE: Tuple[float, float] = (0.3, 3.3)
MAX_ATTEMPTS: int = 1000


@dataclass
class MaskSpec:
    indices: np.ndarray  # sorted, unique flat token indices
    ratio: float
    grid: Tuple[int, int]
    blocks: List[Tuple[int, int, int, int]] = field(default_factory=list)  # (top, left, height, width)

    @property
    def token_count(self) -> int:
        return self.grid[0] * self.grid[1]

    def dense(self) -> np.ndarray:
        return mask_to_dense(self.indices, self.token_count)


def mask_size(token_count: int, ratio: float) -> int:
    """round(r * N) with halves rounded up."""
    return int(math.floor(ratio * token_count + 0.5))


def mask_to_dense(indices: np.ndarray, token_count: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= token_count):
        raise MaskError(f'Mask index out of range for {token_count} tokens.')
    dense = np.zeros(token_count, dtype=bool)
    dense[indices] = True
    return dense


def make_block_mask(grid: Tuple[int, int], ratio: float, rng: Rng) -> MaskSpec:
    """Accumulates random rectangles on the token grid, then trims to exactly round(r * N) cells.

    Cells are kept in insertion order so trimming drops the most recently added ones.
    """
    rows, columns = grid
    token_count: int = rows * columns
    if not 0.0 < ratio < 1.0:
        raise MaskError(f'Mask ratio must lie in (0, 1), got {ratio}.')
    target: int = mask_size(token_count, ratio)
    if target == 0 or target >= token_count:
        raise MaskError(f'Mask ratio {ratio} on {token_count} tokens masks {target} cells.')

    masked: List[int] = []
    seen = set()
    blocks: List[Tuple[int, int, int, int]] = []
    log_low, log_high = math.log(ASPECT_RANGE[0]), math.log(ASPECT_RANGE[1])
    attempts: int = 0
    while len(masked) < target:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise MaskError(f'No block of at least {MIN_BLOCK_AREA} cells fits a {rows}x{columns} grid.')
        area = float(rng.uniform(MIN_BLOCK_AREA, max(MIN_BLOCK_AREA, target - len(masked))))
        aspect = math.exp(float(rng.uniform(log_low, log_high)))
        height = int(round(math.sqrt(area * aspect)))
        width = int(round(math.sqrt(area / aspect)))
        if height * width < MIN_BLOCK_AREA or height > rows or width > columns:
            continue
        top = int(rng.integers(0, rows - height + 1))
        left = int(rng.integers(0, columns - width + 1))
        added: int = 0
        for row in range(top, top + height):
            for column in range(left, left + width):
                cell = row * columns + column
                if cell not in seen:
                    seen.add(cell)
                    masked.append(cell)
                    added += 1
        if added:
            blocks.append((top, left, height, width))
    indices = np.array(sorted(masked[:target]), dtype=np.int64)
    return MaskSpec(indices, ratio, (rows, columns), blocks)


def batch_masks(grid: Tuple[int, int], ratio: float, rngs: List[Rng]) -> np.ndarray:
    """One independent block mask per generator, stacked to a (B, N) boolean array."""
    return np.stack([make_block_mask(grid, ratio, rng).dense() for rng in rngs])
