"""
Glyph rasterization: outline font letters to 64x64 binary images.

Outlines are read with fontTools, flattened into polygons, scaled so the
glyph's bounding box fits a 56x56 box centered on the canvas, and filled with
the nonzero winding rule on an 8x supersampled grid. A pixel is ink (+1) when
at least half of its samples are inside the outline, background (-1) otherwise.
"""

import logging
from pathlib import Path

import numpy as np
from fontTools.pens.basePen import BasePen
from fontTools.ttLib import TTFont

from src.errors import EmptyGlyph, MissingGlyph, UnparseableFont
from src.letters import letter_name

logger = logging.getLogger(__name__)

CANVAS = 64
GLYPH_BOX = 56
SUPERSAMPLE = 8
CURVE_SEGMENTS = 16
COVERAGE_THRESHOLD = 0.5

INK = 1.0
BACKGROUND = -1.0

FONT_SUFFIXES = (".ttf", ".otf", ".ttc", ".otc")


class PolygonPen(BasePen):
    """A pen that flattens glyph outlines into closed polygons."""

    def __init__(self, glyphSet=None, segments: int = CURVE_SEGMENTS):
        super().__init__(glyphSet)
        self.segments = segments
        self.contours: list[list[tuple[float, float]]] = []
        self._points: list[tuple[float, float]] = []

    def _moveTo(self, p):
        self._flush()
        self._points = [p]

    def _lineTo(self, p):
        self._points.append(p)

    def _curveToOne(self, p1, p2, p3):
        p0 = self._getCurrentPoint()
        for i in range(1, self.segments + 1):
            t = i / self.segments
            u = 1.0 - t
            self._points.append((
                u**3 * p0[0] + 3 * u**2 * t * p1[0] + 3 * u * t**2 * p2[0] + t**3 * p3[0],
                u**3 * p0[1] + 3 * u**2 * t * p1[1] + 3 * u * t**2 * p2[1] + t**3 * p3[1],
            ))

    def _qCurveToOne(self, p1, p2):
        p0 = self._getCurrentPoint()
        for i in range(1, self.segments + 1):
            t = i / self.segments
            u = 1.0 - t
            self._points.append((
                u**2 * p0[0] + 2 * u * t * p1[0] + t**2 * p2[0],
                u**2 * p0[1] + 2 * u * t * p1[1] + t**2 * p2[1],
            ))

    def _closePath(self):
        self._flush()

    def _endPath(self):
        # Open contours are filled as if closed.
        self._flush()

    def _flush(self):
        if len(self._points) >= 3:
            self.contours.append(self._points)
        self._points = []


def polygon_area(contours: list[list[tuple[float, float]]]) -> float:
    """Sum of absolute shoelace areas of all contours."""
    total = 0.0
    for contour in contours:
        pts = np.asarray(contour, dtype=np.float64)
        x, y = pts[:, 0], pts[:, 1]
        total += abs(0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return total


def fit_to_canvas(
    contours: list[list[tuple[float, float]]],
    canvas: int = CANVAS,
    box: int = GLYPH_BOX,
) -> list[np.ndarray]:
    """
    Scale font-unit contours uniformly into pixel coordinates (y down).

    The bounding box's longer side becomes `box` pixels and the box is
    centered on the canvas.
    """
    pts = np.concatenate([np.asarray(c, dtype=np.float64) for c in contours])
    xmin, ymin = pts.min(axis=0)
    xmax, ymax = pts.max(axis=0)
    width, height = xmax - xmin, ymax - ymin
    if max(width, height) <= 0:
        raise EmptyGlyph("Glyph bounding box is degenerate")
    scale = box / max(width, height)
    offset_x = (canvas - width * scale) / 2.0
    offset_y = (canvas - height * scale) / 2.0

    fitted = []
    for contour in contours:
        c = np.asarray(contour, dtype=np.float64)
        x = (c[:, 0] - xmin) * scale + offset_x
        y = (ymax - c[:, 1]) * scale + offset_y
        fitted.append(np.stack([x, y], axis=1))
    return fitted


def coverage(
    polygons: list[np.ndarray],
    canvas: int = CANVAS,
    supersample: int = SUPERSAMPLE,
) -> np.ndarray:
    """
    Per-pixel fraction of supersamples inside the polygons (nonzero rule).

    Scanline fill: every edge crossing a sample row adds its direction to the
    winding count of all samples to the right of the crossing.
    """
    n = canvas * supersample
    centers = (np.arange(n) + 0.5) / supersample
    diff = np.zeros((n, n + 1), dtype=np.int32)

    for poly in polygons:
        x0, y0 = poly[:, 0], poly[:, 1]
        x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
        up = (y0[:, None] <= centers[None, :]) & (centers[None, :] < y1[:, None])
        down = (y1[:, None] <= centers[None, :]) & (centers[None, :] < y0[:, None])
        edge, row = np.nonzero(up | down)
        if edge.size == 0:
            continue
        ys = centers[row]
        xs = x0[edge] + (ys - y0[edge]) * (x1[edge] - x0[edge]) / (y1[edge] - y0[edge])
        col = np.floor(xs * supersample - 0.5).astype(np.int64) + 1
        col = np.clip(col, 0, n)
        direction = np.where(up[edge, row], 1, -1).astype(np.int32)
        np.add.at(diff, (row, col), direction)

    winding = np.cumsum(diff, axis=1)[:, :n]
    inside = (winding != 0).astype(np.float64)
    return inside.reshape(canvas, supersample, canvas, supersample).mean(axis=(1, 3))


def binarize(cov: np.ndarray, threshold: float = COVERAGE_THRESHOLD) -> np.ndarray:
    return np.where(cov >= threshold, INK, BACKGROUND).astype(np.float32)


class GlyphRasterizer:
    """Rasterizes letters from one outline font file."""

    def __init__(self, font_file: str | Path, canvas: int = CANVAS):
        self.font_file = Path(font_file)
        self.canvas = canvas
        self.box = round(canvas * GLYPH_BOX / CANVAS)
        try:
            self.font = TTFont(str(self.font_file), fontNumber=0, lazy=True)
            self.glyph_set = self.font.getGlyphSet()
            self.cmap = self.font.getBestCmap() or {}
        except Exception as exc:
            raise UnparseableFont(f"Cannot parse font {self.font_file}: {exc}") from exc

    def outline(self, letter) -> list[list[tuple[float, float]]]:
        name = letter_name(letter)
        glyph_name = self.cmap.get(ord(name))
        if glyph_name is None or glyph_name not in self.glyph_set:
            raise MissingGlyph(f"{self.font_file.name} has no glyph for {name!r}")
        pen = PolygonPen(self.glyph_set)
        try:
            self.glyph_set[glyph_name].draw(pen)
        except Exception as exc:
            raise UnparseableFont(
                f"Cannot draw glyph {glyph_name!r} of {self.font_file}: {exc}"
            ) from exc
        if not pen.contours or polygon_area(pen.contours) <= 0.0:
            raise EmptyGlyph(f"{self.font_file.name} glyph for {name!r} has no area")
        return pen.contours

    def rasterize(self, letter) -> np.ndarray:
        """Return the 64x64 float32 image of `letter` with pixels in {-1, +1}."""
        polygons = fit_to_canvas(self.outline(letter), self.canvas, self.box)
        image = binarize(coverage(polygons, self.canvas))
        if not (image == INK).any():
            raise EmptyGlyph(
                f"{self.font_file.name} glyph for {letter_name(letter)!r} "
                "covers no pixel at this canvas size"
            )
        return image

    def close(self):
        self.font.close()


def rasterize_glyph(font_file: str | Path, codepoint, canvas: int = CANVAS) -> np.ndarray:
    """Rasterize one letter of one font file."""
    rasterizer = GlyphRasterizer(font_file, canvas)
    try:
        return rasterizer.rasterize(codepoint)
    finally:
        rasterizer.close()


def find_font_files(font_dir: str | Path) -> list[Path]:
    """All outline font files below font_dir, in sorted order."""
    root = Path(font_dir)
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in FONT_SUFFIXES)
