import logging
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import tensorflow as tf

from definitions import RngStream, TargetMode
from models.hvq import HvqModel
from models.lavit import LavitModel, LavitTargets
from models.masking import batch_masks
from tensor_core.graph import Graph
from tensor_core.rng import Rng
from training.hvq_training import (TrainingHistory, build_optimizer,
                                   run_epochs, tokenize_all)
from utility.errors import CheckpointError, TargetModeError
from utility.performance import track_time


def step_masks(config: Dict[str, Any], grid: Tuple[int, int], step: int, batch_size: int) -> np.ndarray:
    """Fresh block masks for one training step, one per batch slot."""
    step_rng = Rng(int(config['seed_mask']), RngStream.MASK).child(step)
    return batch_masks(grid, float(config['mask_ratio']), [step_rng.child(slot) for slot in range(batch_size)])


@track_time
def train_lavit(model: LavitModel, hvq: HvqModel, features: np.ndarray, config: Dict[str, Any],
                patches: Optional[np.ndarray] = None, codes: Optional[np.ndarray] = None,
                progress: bool = True) -> TrainingHistory:
    """Trains LAViT in place against targets of the frozen HVQ tokenizer.

    Raises when the HVQ parameters change while LAViT trains.
    """
    epochs: int = int(config['lavit_epochs'])
    batch_size: int = int(config['batch_size'])
    count: int = int(features.shape[0])
    grid_size: int = int(round(np.sqrt(model.settings.token_count)))
    grid: Tuple[int, int] = (grid_size, grid_size)
    hvq_hash: str = hvq.parameter_hash()
    logging.info(f'training LAViT ({model.target_mode.value} target) on {count} images for {epochs} epochs')

    if codes is None:
        codes = tokenize_all(hvq, features, batch_size)
    if patches is None:
        if model.target_mode == TargetMode.PIXELS:
            raise TargetModeError('The pixels target needs the raw image patches.')
        patches = np.zeros((count, model.settings.token_count, model.settings.pixel_dim), dtype=np.float32)

    history = TrainingHistory('lavit')
    if epochs > 0:
        parameters: Dict[str, tf.Variable] = model.trainable_parameters()
        names: List[str] = list(parameters.keys())
        optimizer = build_optimizer(float(config['lavit_learning_rate']), float(config['lavit_weight_decay']))
        optimizer.build([parameters[name] for name in names])
        features_tensor = tf.constant(features, dtype=model.dtype)
        codes_tensor = tf.constant(codes, dtype=tf.int32)
        patches_tensor = tf.constant(patches, dtype=model.dtype)

        def objective(batch_features, mask, batch_codes, batch_patches):
            targets = LavitTargets(batch_codes, batch_features, batch_patches)
            return (tf.reduce_mean(model.target_loss(batch_features, mask, targets)),)

        @tf.function(reduce_retracing=True)
        def train_step(batch_features, mask, batch_codes, batch_patches):
            graph = Graph(parameters)
            values = graph.forward(objective, batch_features, mask, batch_codes, batch_patches)
            gradients = graph.backward()
            optimizer.apply_gradients([(gradients[name], parameters[name]) for name in names])
            return values

        def step(global_step: int, batch_indices: np.ndarray) -> List[tf.Tensor]:
            indices = np.sort(batch_indices)
            mask = tf.constant(step_masks(config, grid, global_step, len(indices)))
            return list(train_step(tf.gather(features_tensor, indices), mask, tf.gather(codes_tensor, indices),
                                   tf.gather(patches_tensor, indices)))

        shuffle_rng = Rng(int(config['seed_init']), RngStream.SHUFFLE).child(1)
        history = run_epochs('lavit', epochs, count, batch_size, shuffle_rng, step, ['loss'], progress)

    if hvq.parameter_hash() != hvq_hash:
        raise CheckpointError('HVQ parameters changed while training LAViT.')
    return history
