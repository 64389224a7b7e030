import hashlib
import logging
from typing import Dict, Optional

import numpy as np

from definitions import RngStream
from tensor_core.rng import Rng
from utility.errors import ShapeError

STD_FLOOR: float = 1e-6


class PatchBackbone:
    """Frozen seeded linear patch embedder followed by average pooling.

    Stands in for a pretrained CNN feature extractor: every p x p patch is flattened,
    projected to `feature_dim` channels with fixed random weights and pooled over
    `pool_size` x `pool_size` neighbouring patches. Arrays are read-only once built.
    """

    def __init__(self, image_size: int, patch_size: int, feature_dim: int, pool_size: int = 1,
                 seed: int = 0, projection: Optional[np.ndarray] = None,
                 mean: Optional[np.ndarray] = None, std: Optional[np.ndarray] = None) -> None:
        if image_size % (patch_size * pool_size):
            raise ShapeError(f'Image size {image_size} is not divisible by patch {patch_size} x pool {pool_size}.')
        self.image_size: int = image_size
        self.patch_size: int = patch_size
        self.feature_dim: int = feature_dim
        self.pool_size: int = pool_size
        self.seed: int = seed
        self.grid_size: int = image_size // (patch_size * pool_size)
        self.token_count: int = self.grid_size * self.grid_size
        self.patch_dim: int = patch_size * patch_size * 3

        if projection is None:
            rng = Rng(seed, RngStream.BACKBONE)
            projection = rng.normal(1.0 / np.sqrt(self.patch_dim), (self.patch_dim, feature_dim))
        self.projection: np.ndarray = self._frozen(projection, (self.patch_dim, feature_dim))
        self.mean: Optional[np.ndarray] = None if mean is None else self._frozen(mean, (feature_dim,))
        self.std: Optional[np.ndarray] = None if std is None else self._frozen(std, (feature_dim,))

    @staticmethod
    def _frozen(array: np.ndarray, shape) -> np.ndarray:
        frozen = np.array(array, dtype=np.float32).reshape(shape)
        frozen.setflags(write=False)
        return frozen

    @property
    def calibrated(self) -> bool:
        return self.mean is not None

    def _check_images(self, images: np.ndarray) -> np.ndarray:
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ShapeError(f'Expected RGB images shaped (B, H, W, 3), got {images.shape}.')
        if images.shape[1] != self.image_size or images.shape[2] != self.image_size:
            if images.shape[1] % (self.patch_size * self.pool_size) or \
                    images.shape[2] % (self.patch_size * self.pool_size):
                raise ShapeError(f'Image {images.shape[1]}x{images.shape[2]} is not divisible by '
                                 f'patch {self.patch_size} x pool {self.pool_size}.')
            raise ShapeError(f'Backbone was built for {self.image_size}px images, got {images.shape[1:3]}.')
        return images

    def _patch_grid(self, images: np.ndarray) -> np.ndarray:
        batch = images.shape[0]
        cells: int = self.image_size // self.patch_size
        pixels = images.astype(np.float64) / 255.0
        windows = pixels.reshape(batch, cells, self.patch_size, cells, self.patch_size, 3)
        return windows.transpose(0, 1, 3, 2, 4, 5).reshape(batch, cells, cells, self.patch_dim)

    def _pool(self, grid: np.ndarray) -> np.ndarray:
        batch, cells, _, channels = grid.shape
        pooled = grid.reshape(batch, self.grid_size, self.pool_size, self.grid_size, self.pool_size, channels)
        return pooled.mean(axis=(2, 4)).reshape(batch, self.token_count, channels)

    def extract_raw(self, images: np.ndarray) -> np.ndarray:
        """Unstandardized token features, (B, N, d0)."""
        images = self._check_images(images)
        projected = self._patch_grid(images) @ self.projection.astype(np.float64)
        return self._pool(projected).astype(np.float32)

    def extract_features(self, images: np.ndarray) -> np.ndarray:
        raw: np.ndarray = self.extract_raw(images)
        if not self.calibrated:
            return raw
        return ((raw.astype(np.float64) - self.mean) / self.std).astype(np.float32)

    def raw_patches(self, images: np.ndarray) -> np.ndarray:
        """Pixels of each token window scaled to [0, 1], (B, N, (p * pool)^2 * 3)."""
        images = self._check_images(images)
        window: int = self.patch_size * self.pool_size
        batch = images.shape[0]
        pixels = images.astype(np.float32) / 255.0
        windows = pixels.reshape(batch, self.grid_size, window, self.grid_size, window, 3)
        return windows.transpose(0, 1, 3, 2, 4, 5).reshape(batch, self.token_count, window * window * 3)

    def calibrate(self, train_images: np.ndarray) -> 'PatchBackbone':
        raw = self.extract_raw(train_images).astype(np.float64).reshape(-1, self.feature_dim)
        mean = raw.mean(axis=0)
        std = np.maximum(raw.std(axis=0), STD_FLOOR)
        logging.info(f'backbone calibrated on {train_images.shape[0]} images, '
                     f'mean |mu| {np.abs(mean).mean():.4f}, mean sigma {std.mean():.4f}')
        return PatchBackbone(self.image_size, self.patch_size, self.feature_dim, self.pool_size, self.seed,
                             self.projection, mean, std)

    def named_parameters(self) -> Dict[str, np.ndarray]:
        named: Dict[str, np.ndarray] = {'backbone.projection': self.projection}
        if self.calibrated:
            named['backbone.mean'] = self.mean
            named['backbone.std'] = self.std
        return named

    @classmethod
    def from_parameters(cls, image_size: int, patch_size: int, feature_dim: int, pool_size: int, seed: int,
                        parameters: Dict[str, np.ndarray]) -> 'PatchBackbone':
        return cls(image_size, patch_size, feature_dim, pool_size, seed, parameters['backbone.projection'],
                   parameters.get('backbone.mean'), parameters.get('backbone.std'))

    def parameter_hash(self) -> str:
        digest = hashlib.sha256()
        for name, array in self.named_parameters().items():
            digest.update(name.encode('utf-8'))
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()
