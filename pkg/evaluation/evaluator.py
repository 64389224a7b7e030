import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from definitions import AnomalyLabel, Split
from data.dataset_handler import DatasetSplit
from models.backbone import PatchBackbone
from models.hvq import HvqModel
from models.lavit import LavitModel, LavitTargets, logical_score
from training.hvq_training import structural_scores, tokenize_all
from utility.errors import CalibrationError
from utility.performance import track_time

SCORE_COLUMNS: List[str] = ['id', 'label', 'kind', 's_hvq', 's_lavit', 's_fused']


@dataclass(frozen=True)
class ScoreStats:
    hvq_mean: float
    hvq_std: float
    lavit_mean: float
    lavit_std: float
    count: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _mean_std(scores: np.ndarray, name: str) -> (float, float):
    mean = float(np.mean(scores))
    std = float(np.std(scores, ddof=1))
    if not np.isfinite(std) or std <= 0.0:
        raise CalibrationError(f'{name} calibration scores have zero variance.')
    return mean, std


def calibrate(hvq_scores: Sequence[float], lavit_scores: Sequence[float],
              splits: Optional[Sequence[Split]] = None,
              labels: Optional[Sequence[AnomalyLabel]] = None) -> ScoreStats:
    """Per-channel mean and sample standard deviation over normal validation images."""
    hvq_array = np.asarray(hvq_scores, dtype=np.float64)
    lavit_array = np.asarray(lavit_scores, dtype=np.float64)
    if hvq_array.shape != lavit_array.shape:
        raise CalibrationError('Both score channels need one value per calibration image.')
    if len(hvq_array) < 2:
        raise CalibrationError(f'Calibration needs at least 2 images, got {len(hvq_array)}.')
    if splits is not None and any(Split(split) != Split.VAL for split in splits):
        raise CalibrationError('Calibration images must come from the validation split.')
    if labels is not None and any(AnomalyLabel(label) != AnomalyLabel.NORMAL for label in labels):
        raise CalibrationError('Calibration images must be normal.')
    hvq_mean, hvq_std = _mean_std(hvq_array, 'HVQ')
    lavit_mean, lavit_std = _mean_std(lavit_array, 'LAViT')
    return ScoreStats(hvq_mean, hvq_std, lavit_mean, lavit_std, len(hvq_array))


def standardize_hvq(scores, stats: ScoreStats):
    return (np.asarray(scores, dtype=np.float64) - stats.hvq_mean) / stats.hvq_std


def standardize_lavit(scores, stats: ScoreStats):
    return (np.asarray(scores, dtype=np.float64) - stats.lavit_mean) / stats.lavit_std


def fuse(hvq_scores, lavit_scores, stats: ScoreStats):
    """Sum of the two standardized scores."""
    return standardize_hvq(hvq_scores, stats) + standardize_lavit(lavit_scores, stats)


class AnomalyEvaluator:
    """Scores dataset splits with a frozen backbone, HVQ-Trans and one LAViT."""

    def __init__(self, backbone: PatchBackbone, hvq: HvqModel, lavit: LavitModel, config: Dict[str, Any]) -> None:
        self.backbone: PatchBackbone = backbone
        self.hvq: HvqModel = hvq
        self.lavit: LavitModel = lavit
        self.batch_size: int = int(config['batch_size'])
        self.mask_ratio: float = float(config['mask_ratio'])
        self.n_masks: int = int(config['n_masks'])
        self.eval_seed: int = int(config['seed_eval'])
        self.workers: Optional[int] = int(config['threads']) or None
        self.grid = (backbone.grid_size, backbone.grid_size)

    def _logical_chunk(self, features: np.ndarray, patches: np.ndarray, codes: np.ndarray,
                       image_indices: List[int]):
        targets = LavitTargets(codes, features, patches)
        return logical_score(self.lavit, features, targets, image_indices, self.grid, self.mask_ratio,
                             self.n_masks, self.eval_seed)

    @track_time
    def score_split(self, split: DatasetSplit) -> pd.DataFrame:
        """Raw S_HVQ and S_LAViT per image; masks depend only on (eval seed, image index)."""
        image_indices: List[int] = split.indices
        features = self.backbone.extract_features(split.images)
        patches = self.backbone.raw_patches(split.images)
        s_hvq = structural_scores(self.hvq, features, self.batch_size)
        codes = tokenize_all(self.hvq, features, self.batch_size)

        starts = list(range(0, len(features), self.batch_size))
        with ThreadPoolExecutor(max_workers=self.workers) as executor:
            chunks = list(executor.map(
                lambda start: self._logical_chunk(features[start:start + self.batch_size],
                                                  patches[start:start + self.batch_size],
                                                  codes[start:start + self.batch_size],
                                                  image_indices[start:start + self.batch_size]), starts))
        s_lavit = np.concatenate([chunk[0] for chunk in chunks])
        lavit_std = np.concatenate([chunk[1] for chunk in chunks])
        logging.info(f'scored {len(features)} images: mean S_HVQ {s_hvq.mean():.6f}, '
                     f'mean S_LAViT {s_lavit.mean():.6f}')
        return pd.DataFrame({'id': split.ids,
                             'label': [label.value for label in split.labels],
                             'kind': [kind.value for kind in split.kinds],
                             's_hvq': s_hvq, 's_lavit': s_lavit, 's_lavit_std': lavit_std})

    def calibrate(self, validation: DatasetSplit) -> ScoreStats:
        table = self.score_split(validation)
        splits = [Split(image_id.split('/')[0]) for image_id in validation.ids]
        stats = calibrate(table['s_hvq'], table['s_lavit'], splits, validation.labels)
        logging.info(f'calibration on {stats.count} normals: HVQ {stats.hvq_mean:.6f} +- {stats.hvq_std:.6f}, '
                     f'LAViT {stats.lavit_mean:.6f} +- {stats.lavit_std:.6f}')
        return stats

    def evaluate(self, validation: DatasetSplit, test: DatasetSplit) -> (pd.DataFrame, ScoreStats):
        stats = self.calibrate(validation)
        table = self.score_split(test)
        table['s_hvq_standardized'] = standardize_hvq(table['s_hvq'], stats)
        table['s_lavit_standardized'] = standardize_lavit(table['s_lavit'], stats)
        table['s_fused'] = fuse(table['s_hvq'], table['s_lavit'], stats)
        return table, stats
