import io
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw

from definitions import (LOGICAL_KINDS, MANIFEST_NAME, MANIFEST_SCHEMA_VERSION,
                         STRUCTURAL_KINDS, AnomalyKind, AnomalyLabel,
                         RngStream, Split)
from data.scene import (LayoutSlot, PlacedObject, SceneSpec, layout_violations,
                        render_scene)
from tensor_core.rng import Rng
from utility.errors import AnomalyKindError, DatasetError, LayoutError
from utility.file import atomic_write_bytes, file_hash, write_json
from utility.performance import track_time


@dataclass
class LabeledImage:
    pixels: np.ndarray
    label: AnomalyLabel
    kind: AnomalyKind
    split: Split = Split.TEST
    objects: List[PlacedObject] = field(default_factory=list)
    seed: int = 0
    index: int = 0


@dataclass(frozen=True)
class DatasetCounts:
    train: int = 200
    test_normal: int = 50
    test_logical: int = 50
    test_structural: int = 50
    validation_fraction: float = 0.2

    def total(self) -> int:
        return self.train + self.test_normal + self.test_logical + self.test_structural


def _jittered(slot: LayoutSlot, rng: Rng) -> Tuple[int, int]:
    x = int(rng.integers(slot.x_range[0], slot.x_range[1] + 1))
    y = int(rng.integers(slot.y_range[0], slot.y_range[1] + 1))
    return x, y


def _place_normal(spec: SceneSpec, rng: Rng) -> List[PlacedObject]:
    if not spec.layout:
        raise LayoutError('Layout rule has no required objects.')
    objects: List[PlacedObject] = []
    for slot in spec.layout:
        x, y = _jittered(slot, rng)
        objects.append(PlacedObject(slot.kind, x, y))
    return objects


def _to_pixels(spec: SceneSpec, objects: List[PlacedObject]) -> np.ndarray:
    return np.asarray(render_scene(spec, objects), dtype=np.uint8).copy()


def generate_normal(spec: SceneSpec, rng: Rng) -> LabeledImage:
    spec.validate()
    objects: List[PlacedObject] = _place_normal(spec, rng)
    return LabeledImage(_to_pixels(spec, objects), AnomalyLabel.NORMAL, AnomalyKind.NONE, objects=objects)


def _free_positions(spec: SceneSpec, kind: int, occupied: List[PlacedObject]) -> List[Tuple[int, int]]:
    """Positions whose token cells are not shared with any placed object."""
    taken = set()
    for placed in occupied:
        taken |= spec.object_cells(placed)
    size: int = spec.vocabulary[kind].size
    positions: List[Tuple[int, int]] = []
    for y in range(spec.height - size + 1):
        for x in range(spec.width - size + 1):
            if not spec.object_cells(PlacedObject(kind, x, y)) & taken:
                positions.append((x, y))
    return positions


def _recolor_alternatives(spec: SceneSpec, kind: int) -> List[int]:
    """Same shape and size, another color seen in normal scenes, and a combination no layout slot requires."""
    source = spec.vocabulary[kind]
    required = {slot.kind for slot in spec.layout}
    colors = {spec.vocabulary[slot.kind].color for slot in spec.layout}
    return [index for index, candidate in enumerate(spec.vocabulary)
            if index not in required and candidate.color in colors and candidate.color != source.color
            and candidate.shape == source.shape and candidate.size == source.size]


def generate_logical_anomaly(spec: SceneSpec, rng: Rng, kind: AnomalyKind) -> LabeledImage:
    if kind not in LOGICAL_KINDS:
        raise AnomalyKindError(f"'{kind.value}' is not a logical anomaly kind.")
    spec.validate()
    objects: List[PlacedObject] = _place_normal(spec, rng)

    if kind == AnomalyKind.MISSING:
        if len(objects) < 2:
            raise AnomalyKindError('A missing-object anomaly needs a layout with at least two objects.')
        del objects[int(rng.integers(0, len(objects)))]
    elif kind == AnomalyKind.EXTRA:
        extra_kind: int = spec.layout[int(rng.integers(0, len(spec.layout)))].kind
        positions = _free_positions(spec, extra_kind, objects)
        if not positions:
            raise LayoutError('No free position left for an extra object.')
        x, y = positions[int(rng.integers(0, len(positions)))]
        objects.append(PlacedObject(extra_kind, x, y))
    elif kind == AnomalyKind.SWAPPED_POSITION:
        pairs = [(first, second) for first in range(len(objects)) for second in range(first + 1, len(objects))
                 if objects[first].kind != objects[second].kind]
        if not pairs:
            raise AnomalyKindError('A position swap needs two objects of different kinds.')
        first, second = pairs[int(rng.integers(0, len(pairs)))]
        first_x, first_y = _jittered(spec.layout[second], rng)
        second_x, second_y = _jittered(spec.layout[first], rng)
        objects[first] = replace(objects[first], x=first_x, y=first_y)
        objects[second] = replace(objects[second], x=second_x, y=second_y)
    else:
        candidates = [index for index, placed in enumerate(objects) if _recolor_alternatives(spec, placed.kind)]
        if not candidates:
            raise AnomalyKindError('No object has a same-shape recolor outside the layout rule in the vocabulary.')
        target: int = candidates[int(rng.integers(0, len(candidates)))]
        alternatives = _recolor_alternatives(spec, objects[target].kind)
        new_kind: int = alternatives[int(rng.integers(0, len(alternatives)))]
        objects[target] = replace(objects[target], kind=new_kind)

    return LabeledImage(_to_pixels(spec, objects), AnomalyLabel.LOGICAL, kind, objects=objects)


def generate_structural_anomaly(spec: SceneSpec, rng: Rng, kind: AnomalyKind) -> LabeledImage:
    if kind not in STRUCTURAL_KINDS:
        raise AnomalyKindError(f"'{kind.value}' is not a structural anomaly kind.")
    spec.validate()
    objects: List[PlacedObject] = _place_normal(spec, rng)
    image: Image.Image = render_scene(spec, objects)
    draw = ImageDraw.Draw(image)
    color = spec.anomaly_colors[int(rng.integers(0, len(spec.anomaly_colors)))]

    if kind == AnomalyKind.SCRATCH:
        # bounding box of 10x10 keeps the defect under 10% of a 32x32 canvas
        box: int = max(2, min(10, int(np.floor(np.sqrt(0.1 * spec.width * spec.height)))))
        left = int(rng.integers(0, spec.width - box + 1))
        top = int(rng.integers(0, spec.height - box + 1))
        point_count = int(rng.integers(3, 5))
        points = [(left + int(rng.integers(0, box)), top + int(rng.integers(0, box))) for _ in range(point_count)]
        draw.line(points, fill=color, width=1)
    else:
        width, height = int(rng.integers(3, 5)), int(rng.integers(3, 5))
        left = int(rng.integers(0, spec.width - width + 1))
        top = int(rng.integers(0, spec.height - height + 1))
        draw.ellipse([left, top, left + width - 1, top + height - 1], fill=color)

    pixels = np.asarray(image, dtype=np.uint8).copy()
    return LabeledImage(pixels, AnomalyLabel.STRUCTURAL, kind, objects=objects)


def encode_ppm(pixels: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(pixels, mode='RGB').save(buffer, format='PPM')
    return buffer.getvalue()


def read_ppm(path: str) -> np.ndarray:
    with Image.open(path) as image:
        if image.format != 'PPM' or image.mode != 'RGB':
            raise DatasetError(f"'{path}' is not an 8-bit RGB PPM image.")
        return np.asarray(image, dtype=np.uint8).copy()


@dataclass(frozen=True)
class _Job:
    index: int
    split: Split
    label: AnomalyLabel
    kind: AnomalyKind


def _plan_jobs(counts: DatasetCounts, seed: int) -> List[_Job]:
    jobs: List[_Job] = []
    holdout: int = int(round(counts.validation_fraction * counts.train))
    order = Rng(seed, RngStream.SHUFFLE).permutation(counts.train)
    validation = set(int(index) for index in order[:holdout])
    for index in range(counts.train):
        jobs.append(_Job(index, Split.VAL if index in validation else Split.TRAIN,
                         AnomalyLabel.NORMAL, AnomalyKind.NONE))
    for _ in range(counts.test_normal):
        jobs.append(_Job(len(jobs), Split.TEST, AnomalyLabel.NORMAL, AnomalyKind.NONE))
    for offset in range(counts.test_logical):
        jobs.append(_Job(len(jobs), Split.TEST, AnomalyLabel.LOGICAL, LOGICAL_KINDS[offset % len(LOGICAL_KINDS)]))
    for offset in range(counts.test_structural):
        jobs.append(_Job(len(jobs), Split.TEST, AnomalyLabel.STRUCTURAL,
                         STRUCTURAL_KINDS[offset % len(STRUCTURAL_KINDS)]))
    return jobs


def _generate_job(spec: SceneSpec, seed: int, job: _Job) -> LabeledImage:
    rng: Rng = Rng(seed, RngStream.DATA).child(job.index)
    if job.label == AnomalyLabel.NORMAL:
        image = generate_normal(spec, rng)
    elif job.label == AnomalyLabel.LOGICAL:
        image = generate_logical_anomaly(spec, rng, job.kind)
    else:
        image = generate_structural_anomaly(spec, rng, job.kind)
    image.split = job.split
    image.seed = seed
    image.index = job.index
    return image


def image_file_name(image: LabeledImage) -> str:
    return f'{image.split.value}/{image.index:05d}_{image.kind.value}.ppm'


@track_time
def write_dataset(spec: SceneSpec, counts: DatasetCounts, seed: int, directory: str,
                  workers: Optional[int] = None) -> Dict[str, Any]:
    """Generates every image from (seed, index) and writes PPM files plus `manifest.json`."""
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as error:
        raise DatasetError(f"Dataset directory '{directory}' is not writable: {error}") from error
    if not os.access(directory, os.W_OK):
        raise DatasetError(f"Dataset directory '{directory}' is not writable.")

    jobs: List[_Job] = _plan_jobs(counts, seed)
    logging.info(f'generating {len(jobs)} images into "{directory}" with seed {seed}')

    def run(job: _Job) -> Dict[str, Any]:
        image = _generate_job(spec, seed, job)
        relative_path = image_file_name(image)
        atomic_write_bytes(os.path.join(directory, relative_path), encode_ppm(image.pixels))
        return {'path': relative_path, 'label': image.label.value, 'kind': image.kind.value,
                'split': image.split.value, 'seed': seed, 'index': image.index,
                'objects': [placed.to_dict() for placed in image.objects]}

    with ThreadPoolExecutor(max_workers=workers) as executor:
        entries: List[Dict[str, Any]] = list(executor.map(run, jobs))

    manifest: Dict[str, Any] = {'schema_version': MANIFEST_SCHEMA_VERSION, 'seed': seed,
                                'scene': spec.to_dict(), 'images': entries}
    validate_manifest(manifest)
    write_json(os.path.join(directory, MANIFEST_NAME), manifest)
    logging.info(f'manifest written, sha256 {file_hash(os.path.join(directory, MANIFEST_NAME))}')
    return manifest


MANIFEST_ENTRY_FIELDS: Dict[str, type] = {'path': str, 'label': str, 'kind': str, 'split': str,
                                          'seed': int, 'index': int, 'objects': list}


def validate_manifest(manifest: Dict[str, Any]) -> None:
    """Checks the manifest against its documented schema and the split/label contracts."""
    problems: List[str] = []
    if manifest.get('schema_version') != MANIFEST_SCHEMA_VERSION:
        problems.append(f"schema_version must be {MANIFEST_SCHEMA_VERSION}")
    if not isinstance(manifest.get('images'), list):
        problems.append('images must be a list')
    labels = {label.value for label in AnomalyLabel}
    kinds = {kind.value for kind in AnomalyKind}
    splits = {split.value for split in Split}
    seen_paths = set()
    for position, entry in enumerate(manifest.get('images', []) or []):
        for name, value_type in MANIFEST_ENTRY_FIELDS.items():
            if not isinstance(entry.get(name), value_type) or isinstance(entry.get(name), bool):
                problems.append(f'images[{position}].{name} must be {value_type.__name__}')
        if entry.get('label') not in labels or entry.get('kind') not in kinds or entry.get('split') not in splits:
            problems.append(f'images[{position}] has an unknown label, kind or split')
            continue
        if entry['split'] != Split.TEST.value and entry['label'] != AnomalyLabel.NORMAL.value:
            problems.append(f'images[{position}] is anomalous outside the test split')
        kind = AnomalyKind(entry['kind'])
        expected_label = AnomalyLabel.NORMAL if kind == AnomalyKind.NONE else (
            AnomalyLabel.LOGICAL if kind in LOGICAL_KINDS else AnomalyLabel.STRUCTURAL)
        if entry['label'] != expected_label.value:
            problems.append(f'images[{position}] kind {kind.value} does not match label {entry["label"]}')
        if entry.get('path') in seen_paths:
            problems.append(f'images[{position}] repeats path {entry.get("path")}')
        seen_paths.add(entry.get('path'))
    if problems:
        raise DatasetError('Invalid manifest: ' + '; '.join(problems))


def extract_patches(pixels: np.ndarray, patch_size: int) -> np.ndarray:
    """Non-overlapping patch_size x patch_size windows as float64 rows, row-major over the grid."""
    height, width, channels = pixels.shape
    if height % patch_size or width % patch_size:
        raise DatasetError(f'Image {height}x{width} is not divisible into {patch_size}px patches.')
    rows, columns = height // patch_size, width // patch_size
    windows = pixels.reshape(rows, patch_size, columns, patch_size, channels).transpose(0, 2, 1, 3, 4)
    return windows.reshape(rows * columns, -1).astype(np.float64)


def nearest_patch_distances(queries: np.ndarray, pool: np.ndarray, chunk_size: int = 512) -> np.ndarray:
    """Euclidean distance from every query patch to its nearest neighbour in the pool."""
    pool_norms = np.sum(pool * pool, axis=1)
    distances = np.empty(len(queries), dtype=np.float64)
    for start in range(0, len(queries), chunk_size):
        chunk = queries[start:start + chunk_size]
        squared = np.sum(chunk * chunk, axis=1)[:, None] + pool_norms[None, :] - 2.0 * chunk @ pool.T
        distances[start:start + chunk_size] = np.sqrt(np.maximum(squared.min(axis=1), 0.0))
    return distances
