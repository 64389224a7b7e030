from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Set, Tuple

import numpy as np
from PIL import Image, ImageDraw

from utility.errors import LayoutError

Color = Tuple[int, int, int]

SHAPES: Tuple[str, ...] = ('circle', 'square', 'triangle')


@dataclass(frozen=True)
class ObjectKind:
    shape: str
    color: Color
    size: int


@dataclass(frozen=True)
class LayoutSlot:
    """A required object and the permitted range of its top-left corner (inclusive)."""
    kind: int
    x_range: Tuple[int, int]
    y_range: Tuple[int, int]


@dataclass(frozen=True)
class PlacedObject:
    kind: int
    x: int
    y: int

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    background: Color = (240, 240, 240)
    vocabulary: Tuple[ObjectKind, ...] = field(default_factory=tuple)
    layout: Tuple[LayoutSlot, ...] = field(default_factory=tuple)
    cell_size: int = 4
    anomaly_colors: Tuple[Color, ...] = ((255, 0, 255), (20, 20, 20))

    def validate(self) -> None:
        if len(self.vocabulary) < 3:
            raise LayoutError(f'Vocabulary needs at least 3 object kinds, got {len(self.vocabulary)}.')
        vocabulary_colors = {kind.color for kind in self.vocabulary} | {self.background}
        for color in self.anomaly_colors:
            if color in vocabulary_colors:
                raise LayoutError(f'Anomaly color {color} is part of the object vocabulary.')
        for kind in self.vocabulary:
            if kind.shape not in SHAPES:
                raise LayoutError(f"Unknown shape '{kind.shape}'.")
        for index, slot in enumerate(self.layout):
            if not 0 <= slot.kind < len(self.vocabulary):
                raise LayoutError(f'Layout slot {index} references unknown kind {slot.kind}.')
            size: int = self.vocabulary[slot.kind].size
            (x_low, x_high), (y_low, y_high) = slot.x_range, slot.y_range
            if x_low > x_high or y_low > y_high or x_low < 0 or y_low < 0 \
                    or x_high + size > self.width or y_high + size > self.height:
                raise LayoutError(f'Layout slot {index} has a region that cannot hold its object.')
        for first in range(len(self.layout)):
            for second in range(first + 1, len(self.layout)):
                if self.region_cells(self.layout[first]) & self.region_cells(self.layout[second]):
                    raise LayoutError(f'Layout slots {first} and {second} have overlapping regions.')

    def object_cells(self, placed: PlacedObject) -> Set[Tuple[int, int]]:
        size: int = self.vocabulary[placed.kind].size
        return {(column, row)
                for column in range(placed.x // self.cell_size, (placed.x + size - 1) // self.cell_size + 1)
                for row in range(placed.y // self.cell_size, (placed.y + size - 1) // self.cell_size + 1)}

    def region_cells(self, slot: LayoutSlot) -> Set[Tuple[int, int]]:
        cells: Set[Tuple[int, int]] = set()
        for x in (slot.x_range[0], slot.x_range[1]):
            for y in (slot.y_range[0], slot.y_range[1]):
                cells |= self.object_cells(PlacedObject(slot.kind, x, y))
        return cells

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


RED: Color = (220, 50, 50)
BLUE: Color = (50, 80, 220)
GREEN: Color = (40, 160, 70)


def default_scene_spec(object_count: int = 4) -> SceneSpec:
    """Corner objects with 4 px of jitter each; a fifth object sits in the centre.

    The vocabulary ends with kinds no layout slot requires; they only appear as
    wrong-combination recolors.
    """
    if not 3 <= object_count <= 5:
        raise LayoutError(f'The default layout holds 3 to 5 objects, got {object_count}.')
    vocabulary = (ObjectKind('circle', RED, 6),
                  ObjectKind('square', BLUE, 6),
                  ObjectKind('triangle', GREEN, 6),
                  ObjectKind('circle', BLUE, 6),
                  ObjectKind('square', RED, 6),
                  ObjectKind('circle', GREEN, 6),
                  ObjectKind('square', GREEN, 6),
                  ObjectKind('triangle', RED, 6),
                  ObjectKind('triangle', BLUE, 6))
    slots = [LayoutSlot(0, (0, 3), (0, 3)),
             LayoutSlot(1, (22, 25), (0, 3)),
             LayoutSlot(2, (0, 3), (22, 25)),
             LayoutSlot(3, (22, 25), (22, 25)),
             LayoutSlot(4, (12, 14), (12, 14))]
    spec = SceneSpec(vocabulary=vocabulary, layout=tuple(slots[:object_count]))
    spec.validate()
    return spec


def in_region(slot: LayoutSlot, placed: PlacedObject) -> bool:
    return slot.x_range[0] <= placed.x <= slot.x_range[1] and slot.y_range[0] <= placed.y <= slot.y_range[1]


def layout_violations(spec: SceneSpec, objects: List[PlacedObject]) -> List[str]:
    violations: List[str] = []
    required: List[int] = sorted(slot.kind for slot in spec.layout)
    present: List[int] = sorted(placed.kind for placed in objects)
    if required != present:
        violations.append(f'object multiset {present} differs from required {required}')
    for placed in objects:
        size: int = spec.vocabulary[placed.kind].size
        if placed.x < 0 or placed.y < 0 or placed.x + size > spec.width or placed.y + size > spec.height:
            violations.append(f'object {placed} leaves the canvas')
    if not violations and _match_slots(spec, objects, 0, set()) is None:
        violations.append('objects are not inside their permitted regions')
    return violations


def validate_layout(spec: SceneSpec, objects: List[PlacedObject]) -> bool:
    return not layout_violations(spec, objects)


def _match_slots(spec: SceneSpec, objects: List[PlacedObject], slot_index: int,
                 used: Set[int]) -> Optional[List[int]]:
    if slot_index == len(spec.layout):
        return []
    slot: LayoutSlot = spec.layout[slot_index]
    for object_index, placed in enumerate(objects):
        if object_index in used or placed.kind != slot.kind or not in_region(slot, placed):
            continue
        rest = _match_slots(spec, objects, slot_index + 1, used | {object_index})
        if rest is not None:
            return [object_index] + rest
    return None


def draw_object(draw: ImageDraw.ImageDraw, kind: ObjectKind, x: int, y: int, fill: Any) -> None:
    last: int = kind.size - 1
    if kind.shape == 'circle':
        draw.ellipse([x, y, x + last, y + last], fill=fill)
    elif kind.shape == 'square':
        draw.rectangle([x, y, x + last, y + last], fill=fill)
    else:
        draw.polygon([(x + last // 2, y), (x, y + last), (x + last, y + last)], fill=fill)


def render_scene(spec: SceneSpec, objects: List[PlacedObject]) -> Image.Image:
    image: Image.Image = Image.new('RGB', (spec.width, spec.height), spec.background)
    draw = ImageDraw.Draw(image)
    for placed in objects:
        draw_object(draw, spec.vocabulary[placed.kind], placed.x, placed.y, spec.vocabulary[placed.kind].color)
    return image


def render_label_map(spec: SceneSpec, objects: List[PlacedObject]) -> np.ndarray:
    """Per-pixel object kind; 0 is background, kind k is stored as k + 1."""
    label_image: Image.Image = Image.new('L', (spec.width, spec.height), 0)
    draw = ImageDraw.Draw(label_image)
    for placed in objects:
        draw_object(draw, spec.vocabulary[placed.kind], placed.x, placed.y, placed.kind + 1)
    return np.asarray(label_image, dtype=np.int64)


def token_kind_map(spec: SceneSpec, objects: List[PlacedObject], token_size: int) -> np.ndarray:
    """Majority object kind per token window (-1 for background), flattened row-major."""
    labels: np.ndarray = render_label_map(spec, objects)
    rows, columns = spec.height // token_size, spec.width // token_size
    windows = labels.reshape(rows, token_size, columns, token_size).transpose(0, 2, 1, 3).reshape(rows * columns, -1)
    kinds: np.ndarray = np.empty(rows * columns, dtype=np.int64)
    for token, window in enumerate(windows):
        counts = np.bincount(window, minlength=len(spec.vocabulary) + 1)
        object_counts = counts[1:]
        kinds[token] = int(np.argmax(object_counts)) if object_counts.max() > 0 else -1
    return kinds
