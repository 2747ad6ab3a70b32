"""Grid coordinate spaces, box arithmetic, IoU, and box perturbation.

All model-facing coordinates live in a grid space (default 9 units wide by
16 units tall). Boxes are (left, top, right, bottom) with the origin at the
top-left corner and y growing downward.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass


class BoxError(ValueError):
    """A box violates its invariants (ordering, bounds, or area)."""


class DegeneratePixelBoxError(BoxError):
    """A grid box collapsed below raster resolution after rounding."""


@dataclass(frozen=True)
class GridSpace:
    """The coordinate space boxes are expressed in: x in [0, width_units], y in [0, height_units]."""

    width_units: float = 9.0
    height_units: float = 16.0

    def __post_init__(self) -> None:
        if self.width_units <= 0 or self.height_units <= 0:
            raise ValueError(f"grid space dimensions must be positive, got {self.width_units}x{self.height_units}")


DEFAULT_SPACE = GridSpace()


@dataclass(frozen=True)
class GridBox:
    """A rectangle in grid units. left < right and top < bottom always hold."""

    left: float
    top: float
    right: float
    bottom: float

    def __post_init__(self) -> None:
        if not (self.left < self.right and self.top < self.bottom):
            raise BoxError(
                f"box coordinates must satisfy left < right and top < bottom, got {self.as_tuple()}"
            )

    @property
    def width(self) -> float:
        return self.right - self.left

    @property
    def height(self) -> float:
        return self.bottom - self.top

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.left, self.top, self.right, self.bottom)


@dataclass(frozen=True)
class PixelBox:
    """A rectangle in integer pixels, left < right and top < bottom."""

    left: int
    top: int
    right: int
    bottom: int

    def __post_init__(self) -> None:
        if not (self.left < self.right and self.top < self.bottom):
            raise BoxError(
                f"pixel box must satisfy left < right and top < bottom, got "
                f"({self.left}, {self.top}, {self.right}, {self.bottom})"
            )

    @property
    def width(self) -> int:
        return self.right - self.left

    @property
    def height(self) -> int:
        return self.bottom - self.top


@dataclass(frozen=True)
class Margins:
    """Distances from each box edge to the corresponding grid-space edge."""

    left_margin: float
    right_margin: float
    top_margin: float
    bottom_margin: float


@dataclass(frozen=True)
class PerturbConfig:
    """Controls synthetic refinement-trace generation."""

    max_num_perturb: int = 4
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.max_num_perturb < 1:
            raise ValueError(f"max_num_perturb must be >= 1, got {self.max_num_perturb}")


def validate_in_space(box: GridBox, space: GridSpace) -> None:
    """Raise BoxError unless `box` lies entirely inside `space`."""
    if box.left < 0 or box.top < 0 or box.right > space.width_units or box.bottom > space.height_units:
        raise BoxError(f"box {box.as_tuple()} outside grid space {space.width_units}x{space.height_units}")


def iou(a: GridBox, b: GridBox) -> float:
    """Intersection-over-union of two boxes; 0.0 when disjoint."""
    iw = min(a.right, b.right) - max(a.left, b.left)
    ih = min(a.bottom, b.bottom) - max(a.top, b.top)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _round_half_up(x: float) -> int:
    # round() is banker's rounding; grid->pixel needs the symmetric half-up rule
    return math.floor(x + 0.5)


def grid_to_pixel(box: GridBox, image_w: int, image_h: int, space: GridSpace = DEFAULT_SPACE) -> PixelBox:
    """Map a grid box onto an image raster with half-up rounding.

    Raises DegeneratePixelBoxError when the box collapses to zero width or
    height after rounding (box below raster resolution).
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError(f"image dimensions must be positive, got {image_w}x{image_h}")
    sx = image_w / space.width_units
    sy = image_h / space.height_units
    left = _round_half_up(box.left * sx)
    top = _round_half_up(box.top * sy)
    right = _round_half_up(box.right * sx)
    bottom = _round_half_up(box.bottom * sy)
    if left >= right or top >= bottom:
        raise DegeneratePixelBoxError(
            f"box {box.as_tuple()} degenerate after rounding to {image_w}x{image_h} raster"
        )
    return PixelBox(left, top, right, bottom)


def pixel_to_grid(box: PixelBox, image_w: int, image_h: int, space: GridSpace = DEFAULT_SPACE) -> GridBox:
    """Inverse of grid_to_pixel. Round trip error is at most half a pixel's grid extent."""
    sx = space.width_units / image_w
    sy = space.height_units / image_h
    return GridBox(box.left * sx, box.top * sy, box.right * sx, box.bottom * sy)


def margins(box: GridBox, space: GridSpace = DEFAULT_SPACE) -> Margins:
    """Distances from the box edges to the grid-space edges."""
    return Margins(
        left_margin=box.left,
        right_margin=space.width_units - box.right,
        top_margin=box.top,
        bottom_margin=space.height_units - box.bottom,
    )


def clamp_to_space(box: GridBox, space: GridSpace) -> GridBox:
    """Clip a box to the grid-space bounds."""
    return GridBox(
        max(0.0, box.left),
        max(0.0, box.top),
        min(space.width_units, box.right),
        min(space.height_units, box.bottom),
    )


def _perturb_candidates(
    box: GridBox, perturb_frac: float, space: GridSpace
) -> list[tuple[float, float, float, float]]:
    """Enumerate the 16 offset x resize candidates for one perturbation step.

    Each candidate is offset by one of the four margin-scaled displacements,
    then resized multiplicatively about its top-left corner. The right/bottom
    edges are computed additively (edge + offset + frac * extent) so that a
    zero fraction reproduces the input coordinates bit-exactly.
    """
    m = margins(box, space)
    out: list[tuple[float, float, float, float]] = []
    for dx in (-perturb_frac * m.left_margin, perturb_frac * m.right_margin):
        for dy in (-perturb_frac * m.top_margin, perturb_frac * m.bottom_margin):
            for wf in (-perturb_frac, perturb_frac):
                for hf in (-perturb_frac, perturb_frac):
                    out.append(
                        (
                            box.left + dx,
                            box.top + dy,
                            box.right + dx + wf * box.width,
                            box.bottom + dy + hf * box.height,
                        )
                    )
    return out


def _candidate_valid(c: tuple[float, float, float, float], space: GridSpace) -> bool:
    left, top, right, bottom = c
    if left >= right or top >= bottom:
        return False
    return left >= 0 and top >= 0 and right <= space.width_units and bottom <= space.height_units


def generate_perturb(
    box: GridBox, perturb_frac: float, space: GridSpace, rng: random.Random
) -> GridBox:
    """Return one randomly chosen perturbation of `box`.

    Candidates are the cross product of the four margin-bounded offsets and
    the four multiplicative resizes at +-perturb_frac. Out-of-bounds and
    zero-area candidates are dropped, as are exact duplicates of the input
    when perturb_frac > 0. If nothing survives, the input box is returned
    clamped to bounds (only reachable for degenerate margins).
    """
    if not 0.0 <= perturb_frac <= 1.0:
        raise ValueError(f"perturb_frac must be in [0, 1], got {perturb_frac}")
    validate_in_space(box, space)
    candidates = _perturb_candidates(box, perturb_frac, space)
    keep = [c for c in candidates if _candidate_valid(c, space)]
    if perturb_frac > 0:
        keep = [c for c in keep if c != box.as_tuple()]
    if not keep:
        return clamp_to_space(box, space)
    return GridBox(*rng.choice(keep))


def generate_perturbed_fewshot_examples(
    box: GridBox, cfg: PerturbConfig, space: GridSpace, rng: random.Random
) -> list[GridBox]:
    """Build a refinement trace: perturbations with decreasing noise, ending at `box`.

    The number of perturbations is drawn uniformly from {0..max_num_perturb};
    step j (counting down) perturbs at fraction j / max_num_perturb. The input
    box is always the final element, so the list length is num_perturb + 1.
    """
    num_perturb = rng.randint(0, cfg.max_num_perturb)
    trace: list[GridBox] = []
    for j in range(num_perturb, 0, -1):
        trace.append(generate_perturb(box, j / cfg.max_num_perturb, space, rng))
    trace.append(box)
    return trace


def expand_with_context(box: GridBox, context_frac: float, space: GridSpace = DEFAULT_SPACE) -> GridBox:
    """Grow a box by context_frac of its own extent on every side, clamped to bounds."""
    if context_frac < 0:
        raise ValueError(f"context_frac must be >= 0, got {context_frac}")
    dx = context_frac * box.width
    dy = context_frac * box.height
    return GridBox(
        max(0.0, box.left - dx),
        max(0.0, box.top - dy),
        min(space.width_units, box.right + dx),
        min(space.height_units, box.bottom + dy),
    )


def format_coord(x: float) -> str:
    """Format one coordinate with up to 3 decimal places, trailing zeros stripped."""
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return s if s else "0"


def format_box(box: GridBox) -> str:
    """The textual surface form boxes travel in: "(left, top, right, bottom)"."""
    return "({}, {}, {}, {})".format(*(format_coord(c) for c in box.as_tuple()))
