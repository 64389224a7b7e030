import os
from enum import Enum, IntEnum
from typing import Dict, List, Tuple

BASE_PATH = os.path.dirname(os.path.realpath(__file__))
STORAGE_PATH = BASE_PATH + '/storage/'

CHECKPOINT_MAGIC: bytes = b'LDMM'
CHECKPOINT_VERSION: int = 1
MANIFEST_SCHEMA_VERSION: int = 1

HVQ_CHECKPOINT_NAME: str = 'hvq.ldmm'
MANIFEST_NAME: str = 'manifest.json'
REPORT_NAME: str = 'report.json'
SCORES_NAME: str = 'scores.csv'


class AnomalyLabel(str, Enum):
    NORMAL = 'normal'
    LOGICAL = 'logical'
    STRUCTURAL = 'structural'


class AnomalyKind(str, Enum):
    NONE = 'none'
    MISSING = 'missing'
    EXTRA = 'extra'
    SWAPPED_POSITION = 'swapped-position'
    WRONG_COMBINATION = 'wrong-combination'
    SCRATCH = 'scratch'
    BLOB = 'blob'


LOGICAL_KINDS: List[AnomalyKind] = [AnomalyKind.MISSING, AnomalyKind.EXTRA, AnomalyKind.SWAPPED_POSITION,
                                    AnomalyKind.WRONG_COMBINATION]
STRUCTURAL_KINDS: List[AnomalyKind] = [AnomalyKind.SCRATCH, AnomalyKind.BLOB]


class Split(str, Enum):
    TRAIN = 'train'
    VAL = 'val'
    TEST = 'test'


class TargetMode(str, Enum):
    PIXELS = 'pixels'
    FEATURES = 'features'
    CODES = 'codes'
    HISTOGRAM = 'histogram'


class PipelineStage(str, Enum):
    HVQ = 'hvq'
    LAVIT = 'lavit'


class RngStream(IntEnum):
    INIT = 1
    MASK = 2
    DATA = 3
    EVAL = 4
    BACKBONE = 5
    SHUFFLE = 6


# reference image-level AUROC [%] as (SA, LA, Avg)
REFERENCE_COMPONENT_AUROC: Dict[str, Tuple[float, float, float]] = {
    'hvq_only': (91.2, 76.7, 84.0),
    'lavit_only': (68.7, 79.3, 74.0),
    'fused': (90.3, 83.1, 86.7),
}
REFERENCE_TARGET_AUROC: Dict[str, Tuple[float, float, float]] = {
    TargetMode.PIXELS.value: (91.1, 74.8, 83.0),
    TargetMode.FEATURES.value: (88.9, 83.4, 86.1),
    TargetMode.CODES.value: (90.7, 78.0, 84.3),
    TargetMode.HISTOGRAM.value: (90.3, 83.1, 86.7),
}


def lavit_checkpoint_name(target_mode: TargetMode) -> str:
    return f'lavit_{target_mode.value}.ldmm'
