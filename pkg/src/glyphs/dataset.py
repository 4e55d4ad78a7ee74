"""
Labeled letter-image datasets with font-disjoint train/val/test splits.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image
from tqdm import tqdm

from src.errors import EmptyGlyph, InsufficientFonts, MissingGlyph, UnparseableFont
from src.glyphs.rasterize import (
    BACKGROUND,
    CANVAS,
    INK,
    GlyphRasterizer,
    find_font_files,
)
from src.letters import LETTERS, NUM_CLASSES, letter_index
from src.logging_setup import progress_enabled

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
POLARITY = {"ink": INK, "background": BACKGROUND}
DEFAULT_RATIOS = (30 / 64, 4 / 64, 30 / 64)


@dataclass(frozen=True)
class LabeledExample:
    image: np.ndarray
    label: int
    font_id: str

    def __post_init__(self):
        if self.image.shape != (CANVAS, CANVAS):
            raise ValueError(f"Image must be {CANVAS}x{CANVAS}, got {self.image.shape}")
        if not 0 <= self.label < NUM_CLASSES:
            raise ValueError(f"Label out of range: {self.label}")
        if not self.font_id:
            raise ValueError("font_id must be non-empty")


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """
    Immutable collection of letter images.

    images: (N, 64, 64) float32 with ink = +1, background = -1
    labels: (N,) int64 class indices
    font_ids: per-example font identifiers
    splits: split name -> set of font ids (pairwise disjoint)
    """

    images: np.ndarray
    labels: np.ndarray
    font_ids: tuple[str, ...]
    splits: dict[str, frozenset[str]]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32).reshape(-1, CANVAS, CANVAS)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "font_ids", tuple(self.font_ids))
        object.__setattr__(
            self, "splits", {name: frozenset(fonts) for name, fonts in self.splits.items()}
        )

        if not (len(images) == len(labels) == len(self.font_ids)):
            raise ValueError("images, labels and font_ids must have equal length")
        if labels.size and (labels.min() < 0 or labels.max() >= NUM_CLASSES):
            raise ValueError("labels must be class indices 0..25")
        names = list(self.splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                shared = self.splits[a] & self.splits[b]
                if shared:
                    raise ValueError(f"Splits {a!r} and {b!r} share fonts: {sorted(shared)[:3]}")
        assigned = frozenset().union(*self.splits.values()) if self.splits else frozenset()
        unassigned = set(self.font_ids) - assigned
        if unassigned:
            raise ValueError(f"Fonts without a split: {sorted(unassigned)[:3]}")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            np.array_equal(self.images, other.images)
            and np.array_equal(self.labels, other.labels)
            and self.font_ids == other.font_ids
            and self.splits == other.splits
            and self.metadata == other.metadata
        )

    def __iter__(self) -> Iterator[LabeledExample]:
        return self.examples()

    def examples(self, split: str | None = None) -> Iterator[LabeledExample]:
        indices = range(len(self)) if split is None else self.split_indices(split)
        for i in indices:
            yield LabeledExample(self.images[i], int(self.labels[i]), self.font_ids[i])

    def split_of(self, font_id: str) -> str:
        for name, fonts in self.splits.items():
            if font_id in fonts:
                return name
        raise KeyError(font_id)

    def split_indices(self, split: str) -> np.ndarray:
        if split not in self.splits:
            raise KeyError(f"Unknown split {split!r}; have {sorted(self.splits)}")
        fonts = self.splits[split]
        return np.array([i for i, f in enumerate(self.font_ids) if f in fonts], dtype=np.int64)

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray, tuple[str, ...]]:
        """(images, labels, font_ids) of one split."""
        idx = self.split_indices(split)
        return self.images[idx], self.labels[idx], tuple(self.font_ids[i] for i in idx)

    @cached_property
    def _index(self) -> dict[tuple[str, int], int]:
        return {(f, int(y)): i for i, (f, y) in enumerate(zip(self.font_ids, self.labels))}

    def find(self, font_id: str, label) -> int | None:
        """Position of the image for (font_id, label), or None."""
        return self._index.get((font_id, letter_index(label)))

    def checksum(self) -> str:
        """SHA-256 of the canonical serialized form (the value stored in the file)."""
        from src.glyphs.storage import dataset_checksum

        return dataset_checksum(self)


def validate_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    return ratios


def split_fonts(font_ids, ratios, seed: int) -> dict[str, frozenset[str]]:
    """
    Shuffle fonts with `seed` and cut them into train/val/test by ratio.

    Each split receives at least one font.
    """
    ratios = validate_ratios(ratios)
    fonts = sorted(set(font_ids))
    if len(fonts) < len(SPLITS):
        raise InsufficientFonts(f"Need at least {len(SPLITS)} fonts, found {len(fonts)}")
    order = [fonts[i] for i in np.random.default_rng(seed).permutation(len(fonts))]

    n = len(order)
    n_train = max(1, round(ratios[0] * n))
    n_val = max(1, round(ratios[1] * n))
    n_train = min(n_train, n - n_val - 1)
    n_test = n - n_train - n_val
    if n_test < 1:
        n_val = max(1, n - n_train - 1)
        n_test = n - n_train - n_val
    return {
        "train": frozenset(order[:n_train]),
        "val": frozenset(order[n_train:n_train + n_val]),
        "test": frozenset(order[n_train + n_val:]),
    }


def font_id_for(path: Path, font_dir: Path) -> str:
    return path.relative_to(font_dir).with_suffix("").as_posix()


def _rasterize_font(args) -> tuple[str, list[tuple[int, np.ndarray]], list[str]]:
    """Rasterize all 26 letters of one font. Returns (font_id, glyphs, skip notes)."""
    path, font_id, canvas = args
    try:
        rasterizer = GlyphRasterizer(path, canvas)
    except UnparseableFont as exc:
        return font_id, [], [f"unparseable: {exc}"]
    glyphs, skipped = [], []
    try:
        for label, letter in enumerate(LETTERS):
            try:
                glyphs.append((label, rasterizer.rasterize(letter)))
            except (MissingGlyph, EmptyGlyph, UnparseableFont) as exc:
                skipped.append(f"{letter}: {type(exc).__name__}: {exc}")
    finally:
        rasterizer.close()
    return font_id, glyphs, skipped


def build_dataset(
    font_dir: str | Path,
    ratios=DEFAULT_RATIOS,
    seed: int = 0,
    canvas: int = CANVAS,
    workers: int = 1,
    progress: bool | None = None,
) -> LabeledDataset:
    """
    Rasterize every font under font_dir and split the fonts disjointly.

    Glyphs that are missing or empty are skipped and logged; fonts that do
    not parse or yield no glyph are dropped.
    """
    ratios = validate_ratios(ratios)
    font_dir = Path(font_dir)
    paths = find_font_files(font_dir)
    logger.info("Found %d font files under %s", len(paths), font_dir)
    jobs = [(p, font_id_for(p, font_dir), canvas) for p in paths]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(tqdm(pool.map(_rasterize_font, jobs, chunksize=8), total=len(jobs),
                                desc="rasterize", disable=not progress_enabled(progress)))
    else:
        results = [_rasterize_font(job) for job in
                   tqdm(jobs, desc="rasterize", disable=not progress_enabled(progress))]

    images, labels, font_ids = [], [], []
    for font_id, glyphs, skipped in results:
        for note in skipped:
            logger.warning("Skipped glyph of font %s (%s)", font_id, note)
        for label, image in glyphs:
            images.append(image)
            labels.append(label)
            font_ids.append(font_id)

    kept = sorted(set(font_ids))
    if len(kept) < len(SPLITS):
        raise InsufficientFonts(
            f"{font_dir} has {len(kept)} usable fonts; at least {len(SPLITS)} are required"
        )
    splits = split_fonts(kept, ratios, seed)
    logger.info(
        "Built dataset: %d images from %d fonts (train/val/test fonts: %d/%d/%d)",
        len(labels), len(kept), len(splits["train"]), len(splits["val"]), len(splits["test"]),
    )
    return LabeledDataset(
        images=np.stack(images) if images else np.zeros((0, canvas, canvas), np.float32),
        labels=np.asarray(labels, dtype=np.int64),
        font_ids=tuple(font_ids),
        splits=splits,
        metadata=dataset_metadata(seed, ratios, canvas, "fonts"),
    )


def dataset_metadata(seed: int, ratios, canvas: int, source: str) -> dict:
    return {
        "seed": int(seed),
        "ratios": [float(r) for r in ratios],
        "canvas": int(canvas),
        "polarity": dict(POLARITY),
        "source": source,
    }


def load_png_glyph(path: Path, canvas: int = CANVAS) -> np.ndarray:
    """Monochrome PNG -> {-1, +1} image; dark pixels are ink."""
    with Image.open(path) as img:
        gray = np.asarray(img.convert("L"), dtype=np.uint8)
    if gray.shape != (canvas, canvas):
        raise ValueError(f"{path} is {gray.shape}, expected {canvas}x{canvas}")
    return np.where(gray < 128, INK, BACKGROUND).astype(np.float32)


def ingest_png_directory(
    root: str | Path,
    ratios=DEFAULT_RATIOS,
    seed: int = 0,
    canvas: int = CANVAS,
) -> LabeledDataset:
    """Build a dataset from a pre-rasterized `<class>/<font_id>.png` tree."""
    ratios = validate_ratios(ratios)
    root = Path(root)
    images, labels, font_ids = [], [], []
    for letter in LETTERS:
        class_dir = root / letter
        if not class_dir.is_dir():
            logger.warning("No directory for class %s under %s", letter, root)
            continue
        for png in sorted(class_dir.rglob("*.png")):
            image = load_png_glyph(png, canvas)
            if not (image == INK).any():
                logger.warning("Skipped empty image %s", png)
                continue
            images.append(image)
            labels.append(letter_index(letter))
            font_ids.append(png.relative_to(class_dir).with_suffix("").as_posix())

    splits = split_fonts(font_ids, ratios, seed)
    return LabeledDataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        font_ids=tuple(font_ids),
        splits=splits,
        metadata=dataset_metadata(seed, ratios, canvas, "png"),
    )
