"""
Defensibility of generated letters versus original letters.

Both populations are attacked with the same I-FGSM protocol as the dataset
attack: images the classifier gets wrong before the attack are discarded and
counted, every other image gets a k.

Files written by write_evaluation:
    hist_<L>.csv              k = 1..k_max, one count column per population
    hist_pooled.csv           same, summed over classes
    generation_summary.json   means, discarded/presented counts, p-values, style variance
    histogram_overlays        .png and .svg, one panel per class plus the pooled one
    gallery_<L>.png           the top-m generated images of each class by k
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from PIL import Image  # noqa: E402
from scipy import stats  # noqa: E402

from src.analysis.report_files import save_figure  # noqa: E402
from src.attack.ifgsm import AttackConfig, attack_images  # noqa: E402
from src.errors import IoFailure  # noqa: E402
from src.generator.cgan import GeneratorModel, generate  # noqa: E402
from src.glyphs.dataset import LabeledDataset  # noqa: E402
from src.glyphs.rasterize import CANVAS  # noqa: E402
from src.letters import LETTERS, NUM_CLASSES, letter_name  # noqa: E402

logger = logging.getLogger(__name__)

GALLERY_SIZE = 8


@dataclass
class PopulationStats:
    name: str
    ks: dict[int, list[int]] = field(default_factory=dict)
    presented: dict[int, int] = field(default_factory=dict)
    discarded: dict[int, int] = field(default_factory=dict)
    censored: dict[int, int] = field(default_factory=dict)

    def histogram(self, label: int, k_max: int) -> np.ndarray:
        """Counts for k = 1..k_max."""
        return np.bincount(self.ks.get(label, []), minlength=k_max + 1)[1:k_max + 1]

    def pooled_ks(self) -> list[int]:
        return [k for label in sorted(self.ks) for k in self.ks[label]]

    def mean(self, label: int | None = None) -> float:
        values = self.pooled_ks() if label is None else self.ks.get(label, [])
        return float(np.mean(values)) if values else float("nan")


@dataclass
class GenerationEvaluation:
    populations: dict[str, PopulationStats]
    k_max: int
    n_per_class: int
    gallery: dict[int, np.ndarray] = field(default_factory=dict)
    gallery_ks: dict[int, list[int]] = field(default_factory=dict)
    style_variance: dict[int, float] = field(default_factory=dict)
    p_values: dict[str, float] = field(default_factory=dict)


def compare_populations(higher: list[int], lower: list[int]) -> float:
    """One-sided Mann-Whitney p-value that `higher` tends to exceed `lower`."""
    if not higher or not lower:
        return float("nan")
    if len(set(higher) | set(lower)) == 1:
        return 1.0
    return float(stats.mannwhitneyu(higher, lower, alternative="greater").pvalue)


def _class_seed(seed: int, label: int) -> int:
    return seed * 1000 + label


def _attack_population(name: str, classifier, images_by_class: dict[int, np.ndarray],
                       cfg: AttackConfig, progress: bool | None):
    population = PopulationStats(name)
    records_by_class = {}
    for label, images in sorted(images_by_class.items()):
        ids = [f"{name}:{letter_name(label)}:{i:05d}" for i in range(len(images))]
        records, discarded = attack_images(classifier, images, np.full(len(images), label),
                                           ids, cfg, progress=progress)
        population.ks[label] = sorted(r.k for r in records)
        population.presented[label] = len(images)
        population.discarded[label] = discarded
        population.censored[label] = sum(r.censored for r in records)
        records_by_class[label] = records
    logger.info("Population %s: mean k %.2f over %d attacked images",
                name, population.mean(), len(population.pooled_ks()))
    return population, records_by_class


def sample_originals(ds: LabeledDataset, split: str, n_per_class: int,
                     seed: int = 0) -> dict[int, np.ndarray]:
    """Up to n_per_class images of each class from one split, chosen reproducibly."""
    images, labels, _ = ds.subset(split)
    rng = np.random.default_rng(seed)
    out = {}
    for label in range(NUM_CLASSES):
        idx = np.nonzero(labels == label)[0]
        if idx.size == 0:
            continue
        if idx.size > n_per_class:
            idx = np.sort(rng.choice(idx, n_per_class, replace=False))
        out[label] = images[idx]
    return out


def evaluate_generated(
    generator: GeneratorModel,
    classifier,
    cfg: AttackConfig = AttackConfig(),
    n_per_class: int = 1000,
    originals: LabeledDataset | None = None,
    split: str = "test",
    baseline: GeneratorModel | None = None,
    seed: int = 0,
    top_m: int = GALLERY_SIZE,
    progress: bool | None = None,
) -> GenerationEvaluation:
    """
    Attack n_per_class generated images of every class, and as many original
    images from `split` of `originals`. `baseline` (usually the step-1
    generator) is sampled on the same seeds and attacked as a third population.
    """
    generated = {label: generate(generator, label, n_per_class, _class_seed(seed, label))
                 for label in range(NUM_CLASSES)}
    populations = {}
    gen_stats, gen_records = _attack_population("generated", classifier, generated, cfg, progress)
    populations["generated"] = gen_stats

    if originals is not None:
        populations["original"], _ = _attack_population(
            "original", classifier, sample_originals(originals, split, n_per_class, seed),
            cfg, progress)
    if baseline is not None:
        base_images = {label: generate(baseline, label, n_per_class, _class_seed(seed, label))
                       for label in range(NUM_CLASSES)}
        populations["baseline"], _ = _attack_population(
            "baseline", classifier, base_images, cfg, progress)

    result = GenerationEvaluation(populations, cfg.k_max, n_per_class)
    for label, records in gen_records.items():
        ranked = sorted(records, key=lambda r: (-r.k, r.font_id))[:top_m]
        picks = [int(r.font_id.rsplit(":", 1)[1]) for r in ranked]
        result.gallery[label] = generated[label][picks]
        result.gallery_ks[label] = [r.k for r in ranked]
        result.style_variance[label] = float(generated[label].var(axis=0).mean())

    pooled = gen_stats.pooled_ks()
    for other in ("original", "baseline"):
        if other in populations:
            p = compare_populations(pooled, populations[other].pooled_ks())
            result.p_values[f"generated>{other}"] = p
            logger.info("Pooled mean k generated %.2f vs %s %.2f (one-sided p %.3g)",
                        gen_stats.mean(), other, populations[other].mean(), p)
    return result


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _order(evaluation: GenerationEvaluation) -> list[str]:
    return [n for n in ("original", "generated", "baseline") if n in evaluation.populations]


def histogram_frame(evaluation: GenerationEvaluation, label: int | None = None) -> pd.DataFrame:
    """Counts per k for every population; label=None pools all classes."""
    k_max = evaluation.k_max
    frame = pd.DataFrame({"k": np.arange(1, k_max + 1)})
    for name in _order(evaluation):
        population = evaluation.populations[name]
        if label is None:
            frame[name] = sum((population.histogram(c, k_max) for c in range(NUM_CLASSES)),
                              np.zeros(k_max, dtype=np.int64))
        else:
            frame[name] = population.histogram(label, k_max)
    return frame


def to_uint8(images: np.ndarray) -> np.ndarray:
    """[-1, +1] -> 8-bit gray with ink (+1) drawn black."""
    return np.round((1.0 - np.clip(images, -1.0, 1.0)) * 127.5).astype(np.uint8)


def gallery_image(images: np.ndarray, gap: int = 2) -> Image.Image:
    strip = np.full((CANVAS, max(len(images), 1) * (CANVAS + gap) - gap), 255, dtype=np.uint8)
    for i, image in enumerate(to_uint8(images)):
        strip[:, i * (CANVAS + gap):i * (CANVAS + gap) + CANVAS] = image
    return Image.fromarray(strip)


def plot_histogram_overlays(evaluation: GenerationEvaluation, stem: Path) -> list[Path]:
    fig, axes = plt.subplots(4, 7, figsize=(20, 11), sharex=True)
    panels = [(letter_name(c), c) for c in range(NUM_CLASSES)] + [("pooled", None)]
    for (title, label), ax in zip(panels, axes.flat):
        frame = histogram_frame(evaluation, label)
        for name in _order(evaluation):
            ax.bar(frame["k"], frame[name], width=1.0, alpha=0.5, label=name)
        ax.set_title(title)
    for ax in axes.flat[len(panels):]:
        ax.axis("off")
    axes.flat[len(panels) - 1].legend(fontsize=7)
    fig.supxlabel("Defensibility k")
    fig.supylabel("Images")
    fig.tight_layout()
    return save_figure(fig, stem)


def evaluation_summary(evaluation: GenerationEvaluation) -> dict:
    summary = {
        "k_max": evaluation.k_max,
        "n_per_class": evaluation.n_per_class,
        "p_values": evaluation.p_values,
        "style_variance": {letter_name(c): v for c, v in sorted(evaluation.style_variance.items())},
        "gallery_k": {letter_name(c): ks for c, ks in sorted(evaluation.gallery_ks.items())},
        "populations": {},
    }
    for name in _order(evaluation):
        population = evaluation.populations[name]
        summary["populations"][name] = {
            "pooled_mean_k": population.mean(),
            "mean_k": {letter_name(c): population.mean(c) for c in sorted(population.ks)},
            "presented": {letter_name(c): n for c, n in sorted(population.presented.items())},
            "discarded": {letter_name(c): n for c, n in sorted(population.discarded.items())},
            "censored": {letter_name(c): n for c, n in sorted(population.censored.items())},
        }
    return summary


def write_evaluation(evaluation: GenerationEvaluation, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        for label in range(NUM_CLASSES):
            path = out / f"hist_{LETTERS[label]}.csv"
            histogram_frame(evaluation, label).to_csv(path, index=False, lineterminator="\n")
            written.append(path)
        path = out / "hist_pooled.csv"
        histogram_frame(evaluation).to_csv(path, index=False, lineterminator="\n")
        written.append(path)

        path = out / "generation_summary.json"
        path.write_text(json.dumps(evaluation_summary(evaluation), indent=2, sort_keys=True)
                        + "\n", encoding="utf-8")
        written.append(path)

        for label, images in sorted(evaluation.gallery.items()):
            path = out / f"gallery_{LETTERS[label]}.png"
            gallery_image(images).save(path)
            written.append(path)
    except OSError as exc:
        raise IoFailure(f"Cannot write generation evaluation to {out}: {exc}") from exc

    written += plot_histogram_overlays(evaluation, out / "histogram_overlays")
    logger.info("Wrote %d generation evaluation files to %s", len(written), out)
    return written
