"""
Shared fixtures for defletter tests.

Fonts are built on the fly with fontTools so no font files ship with the
tests; networks are kept tiny so the whole suite runs on a laptop CPU.
"""

import logging
import os

import numpy as np
import pytest
import torch
import torch.nn as nn
from fontTools.fontBuilder import FontBuilder
from fontTools.pens.ttGlyphPen import TTGlyphPen

from src.classifier.training import ClassifierConfig, train_classifier
from src.glyphs.dataset import LabeledDataset
from src.letters import LETTERS

UPM = 1000


# ---------------------------------------------------------------------------
# Environment: quiet progress bars, opt-in slow tests
# ---------------------------------------------------------------------------

@pytest.fixture(autouse=True)
def _quiet_env(monkeypatch):
    """Progress bars off and CPU only, whatever the developer's .env says."""
    monkeypatch.setenv("DEFLETTER_PROGRESS", "0")
    monkeypatch.setenv("DEFLETTER_DEVICE", "cpu")
    # the CLI reconfigures the root logger; put it back afterwards
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DEFLETTER_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set DEFLETTER_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


# ---------------------------------------------------------------------------
# Fonts
# ---------------------------------------------------------------------------

def letter_cells(letter: str) -> list[tuple[int, int]]:
    """A fixed 5x5 block pattern per letter; always includes two opposite corners."""
    rng = np.random.default_rng(LETTERS.index(letter) + 100)
    cells = {(0, 0), (4, 4)}
    cells |= {(r, c) for r in range(5) for c in range(5) if rng.random() < 0.45}
    return sorted(cells)


def block_rects(letter: str, weight: int = 0, cell: int = 180) -> list[tuple[int, int, int, int]]:
    """(x, y, width, height) font-unit rectangles of one block letter."""
    pad = 20 - weight
    return [(c * cell + pad, (4 - r) * cell + pad, cell - 2 * pad, cell - 2 * pad)
            for r, c in letter_cells(letter)]


def _rect_glyph(rects):
    pen = TTGlyphPen(None)
    for x, y, w, h in rects:
        pen.moveTo((x, y))
        pen.lineTo((x, y + h))
        pen.lineTo((x + w, y + h))
        pen.lineTo((x + w, y))
        pen.closePath()
    return pen.glyph()


def make_font(path, weight: int = 0, letters=LETTERS, empty=(), shapes=None):
    """
    Write a TrueType font whose letters are block patterns.

    weight shrinks (negative) or grows (positive) every block by that many
    font units, so fonts differ slightly in stroke thickness. Letters in
    `empty` get a glyph without contours; letters missing from `letters`
    are not in the cmap at all. `shapes` maps a letter to its own list of
    (x, y, width, height) rectangles in font units.
    """
    names = [".notdef"] + [f"glyph{letter}" for letter in letters]
    glyphs = {".notdef": _rect_glyph([])}
    for letter in letters:
        if letter in empty:
            glyphs[f"glyph{letter}"] = _rect_glyph([])
            continue
        if shapes and letter in shapes:
            glyphs[f"glyph{letter}"] = _rect_glyph(shapes[letter])
            continue
        glyphs[f"glyph{letter}"] = _rect_glyph(block_rects(letter, weight))

    fb = FontBuilder(UPM, isTTF=True)
    fb.setupGlyphOrder(names)
    fb.setupCharacterMap({ord(letter): f"glyph{letter}" for letter in letters})
    fb.setupGlyf(glyphs)
    fb.setupHorizontalMetrics({name: (UPM, 0) for name in names})
    fb.setupHorizontalHeader(ascent=900, descent=-100)
    fb.setupNameTable({"familyName": f"Blocks{weight}", "styleName": "Regular"})
    fb.setupOS2(sTypoAscender=900, sTypoDescender=-100)
    fb.setupPost()
    fb.save(str(path))
    return path


@pytest.fixture(scope="session")
def font_dir(tmp_path_factory):
    """Ten block fonts of varying weight."""
    root = tmp_path_factory.mktemp("fonts")
    for i in range(10):
        make_font(root / f"blocks{i:02d}.ttf", weight=3 * i - 12)
    return root


@pytest.fixture(scope="session")
def font_file(tmp_path_factory):
    return make_font(tmp_path_factory.mktemp("single") / "blocks.ttf")


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

def letter_template(label: int) -> np.ndarray:
    """64x64 {-1, +1} image of letter `label` from its block pattern."""
    image = np.full((64, 64), -1.0, dtype=np.float32)
    for r, c in letter_cells(LETTERS[label]):
        image[4 + 11 * r:4 + 11 * r + 10, 4 + 11 * c:4 + 11 * c + 10] = 1.0
    return image


def _make_dataset(n_fonts: int = 10, flips: int = 40, seed: int = 0,
                  split_counts=(6, 2, 2)) -> LabeledDataset:
    """Every letter in every font: the template with `flips` random pixels inverted."""
    rng = np.random.default_rng(seed)
    images, labels, font_ids = [], [], []
    for f in range(n_fonts):
        for label in range(len(LETTERS)):
            image = letter_template(label).copy()
            idx = rng.choice(64 * 64, flips, replace=False)
            image.reshape(-1)[idx] *= -1
            images.append(image)
            labels.append(label)
            font_ids.append(f"font{f:02d}")
    fonts = [f"font{f:02d}" for f in range(n_fonts)]
    n_train, n_val, _ = split_counts
    splits = {
        "train": frozenset(fonts[:n_train]),
        "val": frozenset(fonts[n_train:n_train + n_val]),
        "test": frozenset(fonts[n_train + n_val:]),
    }
    return LabeledDataset(np.stack(images), np.array(labels), tuple(font_ids), splits,
                          metadata={"source": "synthetic", "seed": seed})


@pytest.fixture(scope="session")
def synthetic_dataset():
    return _make_dataset()


TINY_CLASSIFIER = ClassifierConfig(conv_channels=(4, 8), fc_hidden=32, max_epochs=15,
                                   patience=3, batch_size=32, seed=0)


@pytest.fixture(scope="session")
def tiny_classifier(synthetic_dataset):
    """A small CNN trained on the synthetic letters; reused read-only across tests."""
    return train_classifier(synthetic_dataset, TINY_CLASSIFIER, progress=False)


# ---------------------------------------------------------------------------
# Closed-form linear models for attack oracles
# ---------------------------------------------------------------------------

class LinearTwoClass(nn.Module):
    """
    Logits (w . x + margin, 0) in double precision.

    Starting from an all-zero image the prediction is class 0 with the given
    margin; each FGSM step lowers w . x by epsilon * sum(|w|) until pixels clamp.
    """

    def __init__(self, weight: np.ndarray, margin: float):
        super().__init__()
        self.weight = nn.Parameter(torch.as_tensor(weight, dtype=torch.float64).reshape(-1))
        self.margin = nn.Parameter(torch.tensor(float(margin), dtype=torch.float64))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z0 = x.reshape(len(x), -1) @ self.weight + self.margin
        return torch.stack([z0, torch.zeros_like(z0)], dim=1)


def _make_linear_model(n_pixels: int, amplitude: float, k: int, epsilon: float = 0.02,
                       seed: int = 0) -> LinearTwoClass:
    """A model whose all-zero image is misrecognized after exactly k steps."""
    rng = np.random.default_rng(seed)
    weight = np.zeros(64 * 64)
    pixels = rng.choice(64 * 64, n_pixels, replace=False)
    weight[pixels] = amplitude * rng.choice([-1.0, 1.0], n_pixels)
    margin = (k - 0.5) * epsilon * n_pixels * amplitude
    return LinearTwoClass(weight, margin)


@pytest.fixture()
def linear_model_factory():
    return _make_linear_model
