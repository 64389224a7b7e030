import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import tensorflow as tf

from definitions import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, PipelineStage
from models.backbone import PatchBackbone
from models.layers import ParameterLayer
from utility.errors import CheckpointError, MissingStageError
from utility.file import atomic_write_bytes
from utility.ladmim_type_converter import convert_values, to_json_value

HEADER = struct.Struct('<4sII')


@dataclass
class ModelData:
    """One stage checkpoint: self-describing JSON metadata plus a float32 parameter payload."""
    stage: PipelineStage
    config: Dict[str, Any]
    parameters: Dict[str, np.ndarray]
    epoch: int = 0
    metrics: Dict[str, Any] = field(default_factory=dict)
    extra: Dict[str, Any] = field(default_factory=dict)

    def metadata(self) -> Dict[str, Any]:
        return {'stage': self.stage.value, 'config': self.config, 'epoch': self.epoch, 'metrics': self.metrics,
                'extra': self.extra,
                'parameters': [{'name': name, 'shape': list(array.shape)} for name, array in self.parameters.items()]}

    def encode(self) -> bytes:
        metadata = json.dumps(convert_values(self.metadata(), to_json_value), sort_keys=True).encode('utf-8')
        payload = b''.join(np.ascontiguousarray(array, dtype='<f4').tobytes() for array in self.parameters.values())
        return HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(metadata)) + metadata + payload

    def payload_hash(self) -> str:
        digest = hashlib.sha256()
        for array in self.parameters.values():
            digest.update(np.ascontiguousarray(array, dtype='<f4').tobytes())
        return digest.hexdigest()

    def save(self, path: str) -> None:
        atomic_write_bytes(path, self.encode())
        logging.info(f'saved {self.stage.value} checkpoint with {len(self.parameters)} tensors to "{path}"')

    @classmethod
    def decode(cls, data: bytes, source: str = 'checkpoint') -> 'ModelData':
        if len(data) < HEADER.size:
            raise CheckpointError(f'{source} is truncated: no header.')
        magic, version, metadata_length = HEADER.unpack_from(data)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f'{source} is not a checkpoint (magic {magic!r}).')
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f'{source} has format version {version}, expected {CHECKPOINT_VERSION}.')
        metadata_end = HEADER.size + metadata_length
        if len(data) < metadata_end:
            raise CheckpointError(f'{source} is truncated inside its metadata.')
        try:
            metadata = json.loads(data[HEADER.size:metadata_end].decode('utf-8'))
        except ValueError as error:
            raise CheckpointError(f'{source} has unreadable metadata: {error}') from error

        parameters: Dict[str, np.ndarray] = dict()
        offset = metadata_end
        for entry in metadata['parameters']:
            shape = tuple(entry['shape'])
            size = int(np.prod(shape, dtype=np.int64)) * 4
            if offset + size > len(data):
                raise CheckpointError(f"{source} payload is truncated at tensor '{entry['name']}'.")
            parameters[entry['name']] = np.frombuffer(data, dtype='<f4', count=size // 4,
                                                      offset=offset).reshape(shape).astype(np.float32)
            offset += size
        if offset != len(data):
            raise CheckpointError(f'{source} has {len(data) - offset} unexpected trailing bytes.')
        return cls(PipelineStage(metadata['stage']), metadata['config'], parameters, metadata['epoch'],
                   metadata['metrics'], metadata.get('extra', dict()))

    @classmethod
    def load(cls, path: str, stage: Optional[PipelineStage] = None) -> 'ModelData':
        if not os.path.exists(path):
            name = stage.value if stage is not None else 'required'
            raise MissingStageError(f"The {name} stage has not been run: no checkpoint at '{path}'.")
        with open(path, 'rb') as checkpoint_file:
            model_data = cls.decode(checkpoint_file.read(), f"checkpoint '{path}'")
        if stage is not None and model_data.stage != stage:
            raise CheckpointError(f"'{path}' holds a {model_data.stage.value} checkpoint, expected {stage.value}.")
        return model_data

    def select(self, prefix: str) -> Dict[str, np.ndarray]:
        return {name: array for name, array in self.parameters.items() if name.startswith(prefix)}


def layer_parameters(layer: ParameterLayer, prefix: str) -> Dict[str, np.ndarray]:
    return {name: variable.numpy().astype(np.float32) for name, variable in layer.named_parameters(prefix).items()}


def collect_parameters(backbone: PatchBackbone, *layers: ParameterLayer) -> Dict[str, np.ndarray]:
    parameters: Dict[str, np.ndarray] = dict(backbone.named_parameters())
    for layer in layers:
        parameters.update(layer_parameters(layer, f'{layer.name}.'))
    return parameters


def restore_parameters(layer: ParameterLayer, parameters: Dict[str, np.ndarray]) -> None:
    variables: Dict[str, tf.Variable] = layer.named_parameters(f'{layer.name}.')
    missing: List[str] = [name for name in variables if name not in parameters]
    if missing:
        raise CheckpointError(f'Checkpoint lacks {len(missing)} tensors of {layer.name}, e.g. {missing[0]}.')
    for name, variable in variables.items():
        value = parameters[name]
        if tuple(value.shape) != tuple(variable.shape):
            raise CheckpointError(f"Tensor '{name}' has shape {value.shape}, model expects {tuple(variable.shape)}.")
        variable.assign(value.astype(tf.as_dtype(variable.dtype).as_numpy_dtype))
