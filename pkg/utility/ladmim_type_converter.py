from enum import Enum
from typing import Any, Callable, Dict, Type

import numpy as np

from definitions import AnomalyKind, AnomalyLabel, Split, TargetMode

LADMIM_TYPES: Dict[str, Type[Enum]] = {
    'TargetMode': TargetMode,
    'AnomalyLabel': AnomalyLabel,
    'AnomalyKind': AnomalyKind,
    'Split': Split
}


def ladmim_to_str(value: Any) -> Any:
    for ladmim_type_name, ladmim_type in LADMIM_TYPES.items():
        if isinstance(value, ladmim_type):
            return ladmim_type_name + '.' + value.name
    if isinstance(value, np.generic):
        return value.item()
    return value


def convert_values(obj: Any, convert: Callable) -> Any:
    if isinstance(obj, (list, tuple)):
        return [convert_values(i, convert) for i in obj]
    if not isinstance(obj, dict):
        return convert(obj)
    return {k: convert_values(v, convert) for k, v in obj.items()}


def str_to_ladmim(value: Any) -> Any:
    if isinstance(value, str) and '.' in value:
        type_name, member = value.split('.', 1)
        if type_name in LADMIM_TYPES and member in LADMIM_TYPES[type_name].__members__:
            return LADMIM_TYPES[type_name][member]
    return value


def to_json_value(value: Any) -> Any:
    """Plain JSON form: enums by value, numpy scalars and arrays as python numbers."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value
