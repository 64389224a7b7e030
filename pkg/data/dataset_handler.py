import logging
import os
from dataclasses import dataclass
from typing import Any, Dict, List

import numpy as np

from definitions import MANIFEST_NAME, AnomalyKind, AnomalyLabel, Split
from data.scene import PlacedObject
from data.synthetic_data_handler import read_ppm, validate_manifest
from utility.errors import DatasetError
from utility.file import read_json


@dataclass
class DatasetSplit:
    ids: List[str]
    images: np.ndarray
    labels: List[AnomalyLabel]
    kinds: List[AnomalyKind]
    objects: List[List[PlacedObject]]
    indices: List[int]

    def __len__(self) -> int:
        return len(self.ids)

    def select(self, mask: np.ndarray) -> 'DatasetSplit':
        indices = [index for index, keep in enumerate(mask) if keep]
        return DatasetSplit([self.ids[i] for i in indices], self.images[indices],
                            [self.labels[i] for i in indices], [self.kinds[i] for i in indices],
                            [self.objects[i] for i in indices], [self.indices[i] for i in indices])


class DatasetHandler:
    """Loads a generated dataset directory through its manifest."""

    def __init__(self, directory: str) -> None:
        self.directory: str = directory
        manifest_path: str = os.path.join(directory, MANIFEST_NAME)
        if not os.path.exists(manifest_path):
            raise DatasetError(f"No dataset manifest found at '{manifest_path}'.")
        self.manifest: Dict[str, Any] = read_json(manifest_path)
        validate_manifest(self.manifest)
        self._cache: Dict[Split, DatasetSplit] = dict()

    def get_split(self, split: Split) -> DatasetSplit:
        if split not in self._cache:
            entries = [entry for entry in self.manifest['images'] if entry['split'] == split.value]
            entries.sort(key=lambda entry: entry['index'])
            if not entries:
                raise DatasetError(f"Dataset at '{self.directory}' has no {split.value} images.")
            images = np.stack([read_ppm(os.path.join(self.directory, entry['path'])) for entry in entries])
            self._cache[split] = DatasetSplit(
                ids=[entry['path'] for entry in entries],
                images=images,
                labels=[AnomalyLabel(entry['label']) for entry in entries],
                kinds=[AnomalyKind(entry['kind']) for entry in entries],
                objects=[[PlacedObject(**placed) for placed in entry['objects']] for entry in entries],
                indices=[int(entry['index']) for entry in entries])
            logging.info(f'loaded {len(entries)} {split.value} images from "{self.directory}"')
        return self._cache[split]

    def get_train(self) -> DatasetSplit:
        split = self.get_split(Split.TRAIN)
        if any(label != AnomalyLabel.NORMAL for label in split.labels):
            raise DatasetError('The train split must only hold normal images.')
        return split

    def get_validation(self) -> DatasetSplit:
        return self.get_split(Split.VAL)

    def get_test(self) -> DatasetSplit:
        return self.get_split(Split.TEST)
