import os
from typing import Any, Dict, List, Optional, Tuple

from definitions import STORAGE_PATH, TargetMode
from utility.config import BaseConfig
from utility.errors import ConfigError

SEED_LIMIT: int = 2 ** 64

POSITIVE_INTS: List[str] = ['image_size', 'patch_size', 'pool_size', 'feature_dim', 'embed_dim', 'hvq_layers',
                            'lavit_layers', 'codebook_size', 'codebook_dim', 'heads', 'mlp_ratio', 'n_masks',
                            'batch_size', 'train_count', 'object_count']
NON_NEGATIVE_INTS: List[str] = ['hvq_epochs', 'lavit_epochs', 'test_normal_count', 'test_logical_count',
                                'test_structural_count', 'threads']
SEEDS: List[str] = ['seed_data', 'seed_init', 'seed_mask', 'seed_eval']


class RunConfig(BaseConfig):
    """Every knob of a pipeline run; serialized verbatim into checkpoints and reports."""

    def __init__(self, name: Optional[str] = None, file_path: Optional[str] = None) -> None:
        if file_path is not None and not os.path.exists(file_path):
            raise ConfigError(f"Config file '{file_path}' does not exist.")
        try:
            super().__init__('run', name, file_path)
        except ValueError as error:
            raise ConfigError(f"Config file '{file_path}' is not valid JSON: {error}") from error

        self.label: Dict[str, str] = dict()
        self.value_type: Dict[str, str] = dict()
        self.set_defaults()

    def set_defaults(self) -> None:
        setting_items: List[Tuple[str, str, str, Any]] = []
        setting_items.extend([('image_size', 'Image size', 'int', 32),
                              ('patch_size', 'Patch size', 'int', 4),
                              ('pool_size', 'Pooling kernel', 'int', 1),
                              ('feature_dim', 'Feature dim (d0)', 'int', 64),
                              ('embed_dim', 'Embedding dim (d)', 'int', 128),
                              ('hvq_layers', 'HVQ layers (L)', 'int', 4),
                              ('lavit_layers', 'LAViT layers', 'int', 4),
                              ('codebook_size', 'Codebook size (K)', 'int', 64),
                              ('codebook_dim', 'Codebook dim (d_q)', 'int', 32),
                              ('heads', 'Attention heads', 'int', 4),
                              ('mlp_ratio', 'MLP ratio', 'int', 2),
                              ('object_count', 'Objects per scene', 'int', 4)])
        setting_items.extend([('mask_ratio', 'Mask ratio', 'float', 0.4),
                              ('n_masks', 'Inference masks', 'int', 8),
                              ('target_mode', 'LAViT target', 'TargetMode', TargetMode.HISTOGRAM.value)])
        setting_items.extend([('hvq_epochs', 'HVQ epochs', 'int', 300),
                              ('lavit_epochs', 'LAViT epochs', 'int', 300),
                              ('batch_size', 'Batch size', 'int', 16),
                              ('hvq_learning_rate', 'HVQ learning rate', 'float', 1e-4),
                              ('hvq_weight_decay', 'HVQ weight decay', 'float', 1e-4),
                              ('lavit_learning_rate', 'LAViT learning rate', 'float', 1e-4),
                              ('lavit_weight_decay', 'LAViT weight decay', 'float', 1e-6)])
        setting_items.extend([('train_count', 'Train normals', 'int', 200),
                              ('validation_fraction', 'Calibration holdout', 'float', 0.2),
                              ('test_normal_count', 'Test normals', 'int', 50),
                              ('test_logical_count', 'Test logical anomalies', 'int', 50),
                              ('test_structural_count', 'Test structural anomalies', 'int', 50)])
        setting_items.extend([('seed_data', 'Data seed', 'int', 0),
                              ('seed_init', 'Init seed', 'int', 0),
                              ('seed_mask', 'Mask seed', 'int', 0),
                              ('seed_eval', 'Eval seed', 'int', 0),
                              ('threads', 'Worker threads (0 = all)', 'int', 0),
                              ('plots', 'Write plots', 'bool', True),
                              ('out_dir', 'Output directory', 'str', os.path.join(STORAGE_PATH, 'run'))])

        for key, label, value_type, value in setting_items:
            self.label[key] = label
            self.value_type[key] = value_type
            self.setdefault(key, value)

    def set_seed(self, seed: int) -> None:
        for key in SEEDS:
            self[key] = seed

    def validate(self) -> None:
        problems: List[str] = []
        unknown = sorted(set(self.keys()) - set(self.value_type.keys()))
        if unknown:
            problems.append(f'unknown keys {unknown}')
        for key in POSITIVE_INTS:
            if not _is_int(self[key]) or self[key] < 1:
                problems.append(f'{key} must be a positive integer, got {self[key]!r}')
        for key in NON_NEGATIVE_INTS:
            if not _is_int(self[key]) or self[key] < 0:
                problems.append(f'{key} must be a non-negative integer, got {self[key]!r}')
        for key in SEEDS:
            if not _is_int(self[key]) or not 0 <= self[key] < SEED_LIMIT:
                problems.append(f'{key} must be an unsigned 64-bit integer, got {self[key]!r}')
        for key in ['hvq_learning_rate', 'lavit_learning_rate']:
            if not _is_number(self[key]) or self[key] <= 0:
                problems.append(f'{key} must be positive, got {self[key]!r}')
        for key in ['hvq_weight_decay', 'lavit_weight_decay']:
            if not _is_number(self[key]) or self[key] < 0:
                problems.append(f'{key} must be non-negative, got {self[key]!r}')
        for key in ['mask_ratio', 'validation_fraction']:
            if not _is_number(self[key]) or not 0.0 < self[key] < 1.0:
                problems.append(f'{key} must lie in (0, 1), got {self[key]!r}')
        if self['target_mode'] not in [mode.value for mode in TargetMode]:
            problems.append(f"target_mode must be one of {[mode.value for mode in TargetMode]}, "
                            f"got {self['target_mode']!r}")
        if not isinstance(self['plots'], bool):
            problems.append(f"plots must be a boolean, got {self['plots']!r}")
        if not isinstance(self['out_dir'], str) or not self['out_dir']:
            problems.append('out_dir must be a non-empty path')

        if not problems:
            if self['image_size'] % (self['patch_size'] * self['pool_size']):
                problems.append('image_size must be divisible by patch_size * pool_size')
            if self['embed_dim'] % self['heads']:
                problems.append('embed_dim must be divisible by heads')
            if self['codebook_size'] < 2:
                problems.append('codebook_size must be at least 2')
            if not 3 <= self['object_count'] <= 5:
                problems.append('object_count must lie in [3, 5]')
            grid = self['image_size'] // (self['patch_size'] * self['pool_size'])
            masked = int(self['mask_ratio'] * grid * grid + 0.5)
            if masked == 0 or masked >= grid * grid:
                problems.append(f'mask_ratio {self["mask_ratio"]} masks {masked} of {grid * grid} tokens')
            held_out = int(round(self['validation_fraction'] * self['train_count']))
            if held_out < 2 or self['train_count'] - held_out < 1:
                problems.append('validation_fraction must leave >= 2 calibration and >= 1 training images')
        if problems:
            raise ConfigError('Invalid configuration: ' + '; '.join(problems))

    def as_dict(self) -> Dict[str, Any]:
        return {key: self[key] for key in sorted(self.keys())}


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)
