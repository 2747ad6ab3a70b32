"""Deterministic raster annotation: axis overlays, zoom patches, result boxes.

Everything draws into plain RGBA numpy buffers with an embedded 5x7 bitmap
font, so renders are byte-identical across platforms and golden-testable.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from gridcrit.geometry import (
    DEFAULT_SPACE,
    GridBox,
    GridSpace,
    PixelBox,
    expand_with_context,
    format_coord,
    grid_to_pixel,
    validate_in_space,
)


class ImageError(ValueError):
    """Raster input violates an operation's preconditions."""


MIN_AXIS_SIDE_PX = 64
TICK_LEN_PX = 8
LABEL_PAD_PX = 2
ZOOM_TARGET_PX = 512

# candidate label steps for patch-local axes, coarse to fine; the first one
# producing at least this many ticks across the span wins
NICE_STEPS = (5.0, 2.0, 1.0, 0.5, 0.25, 0.1, 0.05, 0.01)
MIN_TICKS = 3

# 5x7 glyphs for the only characters labels ever contain
_GLYPHS = {
    "0": ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    "1": ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    "2": ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    "3": ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    "4": ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    "5": ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    "6": ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    "7": ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    "8": ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    "9": ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
    ".": ("00000", "00000", "00000", "00000", "00000", "01100", "01100"),
    "-": ("00000", "00000", "00000", "11111", "00000", "00000", "00000"),
}
GLYPH_W = 5
GLYPH_H = 7


@dataclass
class RasterImage:
    """An RGBA image backed by a (height, width, 4) uint8 array."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 4 or self.pixels.dtype != np.uint8:
            raise ImageError(f"expected (h, w, 4) uint8 buffer, got {self.pixels.shape} {self.pixels.dtype}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ImageError("image must be at least 1x1")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def copy(self) -> "RasterImage":
        return RasterImage(self.pixels.copy())

    @classmethod
    def new(cls, width: int, height: int, color: tuple[int, int, int, int] = (255, 255, 255, 255)) -> "RasterImage":
        if width < 1 or height < 1:
            raise ImageError(f"image dimensions must be positive, got {width}x{height}")
        buf = np.empty((height, width, 4), dtype=np.uint8)
        buf[:, :] = color
        return cls(buf)

    @classmethod
    def load(cls, path: str) -> "RasterImage":
        with Image.open(path) as im:
            return cls(np.array(im.convert("RGBA"), dtype=np.uint8))

    def save(self, path: str) -> None:
        Image.fromarray(self.pixels, "RGBA").save(path, format="PNG")

    def png_bytes(self) -> bytes:
        import io

        out = io.BytesIO()
        Image.fromarray(self.pixels, "RGBA").save(out, format="PNG")
        return out.getvalue()


def rgba_checksum(img: RasterImage) -> str:
    """sha256 over dimensions and the raw RGBA buffer (not the PNG encoding)."""
    h = hashlib.sha256()
    h.update(f"{img.width}x{img.height}:".encode())
    h.update(img.pixels.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class AnnotationStyle:
    """Colors and stroke widths for every overlay operation."""

    axis_color: tuple[int, int, int, int] = (0, 0, 0, 255)
    box_color: tuple[int, int, int, int] = (0, 0, 255, 255)
    tick_stroke_px: int = 2
    box_stroke_px: int = 3
    label_px: int = 14
    ticks_per_unit: int = 1

    def __post_init__(self) -> None:
        if self.tick_stroke_px < 1 or self.box_stroke_px < 1:
            raise ValueError("stroke widths must be at least 1 px")
        if self.label_px < GLYPH_H:
            raise ValueError(f"label_px must be at least {GLYPH_H}")
        if self.ticks_per_unit < 1:
            raise ValueError("ticks_per_unit must be a positive integer")
        if self.axis_color[3] != 255 or self.box_color[3] != 255:
            raise ValueError("annotation colors must be opaque")

    @property
    def label_scale(self) -> int:
        return max(1, self.label_px // GLYPH_H)


def _fill_rect(buf: np.ndarray, x0: int, y0: int, x1: int, y1: int, color: tuple[int, int, int, int]) -> None:
    """Paint [x0, x1) x [y0, y1), silently clipped to the buffer."""
    h, w = buf.shape[:2]
    x0, x1 = max(0, x0), min(w, x1)
    y0, y1 = max(0, y0), min(h, y1)
    if x0 < x1 and y0 < y1:
        buf[y0:y1, x0:x1] = color


def text_width_px(s: str, scale: int) -> int:
    if not s:
        return 0
    return (len(s) * (GLYPH_W + 1) - 1) * scale


def draw_text(buf: np.ndarray, x: int, y: int, s: str, color: tuple[int, int, int, int], scale: int) -> None:
    """Blit a label at (x, y) top-left, clipped at buffer edges."""
    cx = x
    for ch in s:
        glyph = _GLYPHS.get(ch)
        if glyph is None:
            raise ImageError(f"no glyph for character {ch!r}")
        for row, bits in enumerate(glyph):
            for col, bit in enumerate(bits):
                if bit == "1":
                    _fill_rect(
                        buf,
                        cx + col * scale,
                        y + row * scale,
                        cx + (col + 1) * scale,
                        y + (row + 1) * scale,
                        color,
                    )
        cx += (GLYPH_W + 1) * scale


def _rect_outline(buf: np.ndarray, x0: int, y0: int, x1: int, y1: int, stroke: int, color) -> None:
    """Stroke drawn inside [x0, x1) x [y0, y1)."""
    _fill_rect(buf, x0, y0, x1, y0 + stroke, color)
    _fill_rect(buf, x0, y1 - stroke, x1, y1, color)
    _fill_rect(buf, x0, y0, x0 + stroke, y1, color)
    _fill_rect(buf, x1 - stroke, y0, x1, y1, color)


def _round_px(x: float) -> int:
    return math.floor(x + 0.5)


def draw_coordinate_axes(
    img: RasterImage, space: GridSpace = DEFAULT_SPACE, style: AnnotationStyle = AnnotationStyle()
) -> RasterImage:
    """Overlay tick marks and integer unit labels along all four edges."""
    if img.width < MIN_AXIS_SIDE_PX or img.height < MIN_AXIS_SIDE_PX:
        raise ImageError(
            f"image {img.width}x{img.height} too small for axis labels (need {MIN_AXIS_SIDE_PX} px per side)"
        )
    out = img.copy()
    buf = out.pixels
    scale = style.label_scale
    sx = img.width / space.width_units
    sy = img.height / space.height_units
    half = style.tick_stroke_px // 2

    n_x = int(space.width_units * style.ticks_per_unit)
    for k in range(n_x + 1):
        unit = k / style.ticks_per_unit
        px = _round_px(unit * sx)
        x0 = min(max(px - half, 0), img.width - style.tick_stroke_px)
        _fill_rect(buf, x0, 0, x0 + style.tick_stroke_px, TICK_LEN_PX, style.axis_color)
        _fill_rect(buf, x0, img.height - TICK_LEN_PX, x0 + style.tick_stroke_px, img.height, style.axis_color)
        if unit == int(unit):
            label = str(int(unit))
            lx = min(px + LABEL_PAD_PX, img.width - text_width_px(label, scale))
            draw_text(buf, lx, TICK_LEN_PX + LABEL_PAD_PX, label, style.axis_color, scale)
            draw_text(
                buf,
                lx,
                img.height - TICK_LEN_PX - LABEL_PAD_PX - GLYPH_H * scale,
                label,
                style.axis_color,
                scale,
            )

    n_y = int(space.height_units * style.ticks_per_unit)
    for k in range(n_y + 1):
        unit = k / style.ticks_per_unit
        py = _round_px(unit * sy)
        y0 = min(max(py - half, 0), img.height - style.tick_stroke_px)
        _fill_rect(buf, 0, y0, TICK_LEN_PX, y0 + style.tick_stroke_px, style.axis_color)
        _fill_rect(buf, img.width - TICK_LEN_PX, y0, img.width, y0 + style.tick_stroke_px, style.axis_color)
        if unit == int(unit):
            label = str(int(unit))
            ly = min(py + LABEL_PAD_PX, img.height - GLYPH_H * scale)
            draw_text(buf, TICK_LEN_PX + LABEL_PAD_PX, ly, label, style.axis_color, scale)
            draw_text(
                buf,
                img.width - TICK_LEN_PX - LABEL_PAD_PX - text_width_px(label, scale),
                ly,
                label,
                style.axis_color,
                scale,
            )
    return out


def nice_tick_values(lo: float, hi: float) -> tuple[float, list[float]]:
    """Pick the coarsest step from NICE_STEPS giving at least MIN_TICKS ticks in [lo, hi]."""
    if hi <= lo:
        raise ValueError(f"empty span [{lo}, {hi}]")
    for step in NICE_STEPS:
        k0 = math.ceil(lo / step - 1e-9)
        k1 = math.floor(hi / step + 1e-9)
        if k1 - k0 + 1 >= MIN_TICKS:
            return step, [k * step for k in range(k0, k1 + 1)]
    step = NICE_STEPS[-1]
    k0 = math.ceil(lo / step - 1e-9)
    k1 = math.floor(hi / step + 1e-9)
    return step, [k * step for k in range(k0, k1 + 1)]


@dataclass(frozen=True)
class ZoomPatchGeometry:
    """Everything about how a zoom patch maps back to the source image."""

    crop_px: PixelBox
    upscale: int
    patch_width: int
    patch_height: int
    candidate_rect: tuple[int, int, int, int]
    x_ticks: tuple[tuple[float, int], ...]
    y_ticks: tuple[tuple[float, int], ...]


def zoom_patch_geometry(
    img_width: int,
    img_height: int,
    candidate: GridBox,
    space: GridSpace = DEFAULT_SPACE,
    context_frac: float = 0.25,
) -> ZoomPatchGeometry:
    """Compute the crop, upscale factor, candidate rect, and tick layout for a zoom patch."""
    validate_in_space(candidate, space)
    ctx = expand_with_context(candidate, context_frac, space)
    crop_px = grid_to_pixel(ctx, img_width, img_height, space)
    factor = max(1, math.ceil(ZOOM_TARGET_PX / max(crop_px.width, crop_px.height)))
    patch_w = crop_px.width * factor
    patch_h = crop_px.height * factor

    cand_px = grid_to_pixel(candidate, img_width, img_height, space)
    rect = (
        (cand_px.left - crop_px.left) * factor,
        (cand_px.top - crop_px.top) * factor,
        (cand_px.right - crop_px.left) * factor,
        (cand_px.bottom - crop_px.top) * factor,
    )

    sx = img_width / space.width_units
    sy = img_height / space.height_units
    _, xs = nice_tick_values(ctx.left, ctx.right)
    _, ys = nice_tick_values(ctx.top, ctx.bottom)
    x_ticks = tuple((v, _round_px((v * sx - crop_px.left) * factor)) for v in xs)
    y_ticks = tuple((v, _round_px((v * sy - crop_px.top) * factor)) for v in ys)
    return ZoomPatchGeometry(crop_px, factor, patch_w, patch_h, rect, x_ticks, y_ticks)


def render_zoom_patch(
    img: RasterImage,
    candidate: GridBox,
    space: GridSpace = DEFAULT_SPACE,
    style: AnnotationStyle = AnnotationStyle(),
    context_frac: float = 0.25,
) -> RasterImage:
    """Crop around the candidate, upscale, and draw the blue box plus local axes.

    Axis labels stay in the source image's grid coordinates so refined
    coordinates can be read straight off the patch.
    """
    geom = zoom_patch_geometry(img.width, img.height, candidate, space, context_frac)
    crop = img.pixels[geom.crop_px.top : geom.crop_px.bottom, geom.crop_px.left : geom.crop_px.right]
    buf = np.repeat(np.repeat(crop, geom.upscale, axis=0), geom.upscale, axis=1).copy()

    x0, y0, x1, y1 = geom.candidate_rect
    _rect_outline(buf, x0, y0, x1, y1, style.box_stroke_px, style.box_color)

    scale = style.label_scale
    half = style.tick_stroke_px // 2
    for value, px in geom.x_ticks:
        tx = min(max(px - half, 0), geom.patch_width - style.tick_stroke_px)
        _fill_rect(buf, tx, 0, tx + style.tick_stroke_px, TICK_LEN_PX, style.axis_color)
        _fill_rect(buf, tx, geom.patch_height - TICK_LEN_PX, tx + style.tick_stroke_px, geom.patch_height, style.axis_color)
        label = format_coord(value)
        lx = min(px + LABEL_PAD_PX, geom.patch_width - text_width_px(label, scale))
        draw_text(buf, lx, TICK_LEN_PX + LABEL_PAD_PX, label, style.axis_color, scale)
        draw_text(
            buf,
            lx,
            geom.patch_height - TICK_LEN_PX - LABEL_PAD_PX - GLYPH_H * scale,
            label,
            style.axis_color,
            scale,
        )
    for value, py in geom.y_ticks:
        ty = min(max(py - half, 0), geom.patch_height - style.tick_stroke_px)
        _fill_rect(buf, 0, ty, TICK_LEN_PX, ty + style.tick_stroke_px, style.axis_color)
        _fill_rect(buf, geom.patch_width - TICK_LEN_PX, ty, geom.patch_width, ty + style.tick_stroke_px, style.axis_color)
        label = format_coord(value)
        ly = min(py + LABEL_PAD_PX, geom.patch_height - GLYPH_H * scale)
        draw_text(buf, TICK_LEN_PX + LABEL_PAD_PX, ly, label, style.axis_color, scale)
        draw_text(
            buf,
            geom.patch_width - TICK_LEN_PX - LABEL_PAD_PX - text_width_px(label, scale),
            ly,
            label,
            style.axis_color,
            scale,
        )
    return RasterImage(buf)


def draw_result_boxes(
    img: RasterImage,
    boxes: list[GridBox],
    style: AnnotationStyle = AnnotationStyle(),
    space: GridSpace = DEFAULT_SPACE,
) -> RasterImage:
    """Overlay one numbered rectangle per box (1-based, in list order)."""
    out = img.copy()
    buf = out.pixels
    scale = style.label_scale
    for idx, box in enumerate(boxes, start=1):
        validate_in_space(box, space)
        p = grid_to_pixel(box, img.width, img.height, space)
        _rect_outline(buf, p.left, p.top, p.right, p.bottom, style.box_stroke_px, style.box_color)
        label = str(idx)
        lx = min(p.left + style.box_stroke_px + LABEL_PAD_PX, img.width - text_width_px(label, scale))
        ly = min(p.top + style.box_stroke_px + LABEL_PAD_PX, img.height - GLYPH_H * scale)
        draw_text(buf, lx, ly, label, style.box_color, scale)
    return out
