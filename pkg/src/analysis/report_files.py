"""
CSV tables and rendered plots for the class-wise / class-pair-wise analysis.

Files written by export_report:
    confusion.csv                 26x26 counts, row = true class, column = misrecognized
    avg_defensibility.csv         26x26 mean k, empty where the pair count is too small
    avg_defensibility_mask.csv    26x26 0/1, 1 where avg_defensibility is defined
    class_k.csv                   long format: true class, k, censored flag
    class_summary.csv             per class: count, median, min, max, iqr, censored, accuracy
    top_confusions.csv / asymmetric_pairs.csv
    summary.json
    confusion_heatmap, avg_defensibility_heatmap, class_distribution  (.png and .svg)

Files written by export_attack_examples (needs the dataset and the classifier):
    attack_examples.csv           font, class, k and misrecognized class per gallery tile
    attack_examples               fragile / moderate / robust gallery (.png and .svg)
    attack_sequence               intermediate images of one attack (.png and .svg)
"""

import json
import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import seaborn  # noqa: E402

from src.analysis.matrices import (  # noqa: E402
    ClassDistribution,
    PairwiseMatrices,
    asymmetric_pairs,
    top_confusions,
)
from src.attack.ifgsm import AttackLog, attack_trajectory, fragility_examples  # noqa: E402
from src.errors import IoFailure, JoinFailure  # noqa: E402
from src.glyphs.dataset import LabeledDataset  # noqa: E402
from src.letters import LETTERS, letter_name  # noqa: E402

logger = logging.getLogger(__name__)

plt.rcParams["svg.hashsalt"] = "defletter"
VIOLIN_BANDWIDTH = "scott"
BANDS = ("fragile", "moderate", "robust")
SEQUENCE_FRAMES = 8


def save_figure(fig, stem: Path) -> list[Path]:
    """Write fig as <stem>.png and <stem>.svg without time-dependent metadata."""
    paths = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    try:
        fig.savefig(paths[0], dpi=150, bbox_inches="tight", metadata={"Software": None})
        fig.savefig(paths[1], bbox_inches="tight", metadata={"Date": None})
    except OSError as exc:
        raise IoFailure(f"Cannot write figure {stem}: {exc}") from exc
    finally:
        plt.close(fig)
    return paths


def matrix_frame(values: np.ndarray) -> pd.DataFrame:
    frame = pd.DataFrame(values, index=list(LETTERS), columns=list(LETTERS))
    frame.index.name = "true"
    return frame


def read_matrix_csv(path: str | Path) -> np.ndarray:
    return pd.read_csv(path, index_col=0).to_numpy()


def _write_csv(frame: pd.DataFrame, path: Path, index: bool = True) -> Path:
    try:
        frame.to_csv(path, index=index, na_rep="", lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc
    return path


def plot_heatmap(values: np.ndarray, mask: np.ndarray | None, title: str, stem: Path,
                 fmt: str, cbar_label: str) -> list[Path]:
    fig, ax = plt.subplots(figsize=(11, 9))
    empty = mask is not None and not mask.any()
    seaborn.heatmap(
        values,
        mask=None if mask is None else ~mask,
        vmin=0.0 if empty else None,
        vmax=1.0 if empty else None,
        annot=True,
        fmt=fmt,
        annot_kws={"fontsize": 5},
        cmap="YlGnBu",
        cbar_kws={"label": cbar_label},
        xticklabels=LETTERS,
        yticklabels=LETTERS,
        ax=ax,
    )
    ax.set(xlabel="Misrecognized class", ylabel="True class", title=title)
    return save_figure(fig, stem)


def plot_class_distribution(distributions: dict[int, ClassDistribution], stem: Path) -> list[Path]:
    """Violin per class with median/min/max ticks and accuracy on a second axis."""
    fig, ax = plt.subplots(figsize=(13, 5))
    labels = sorted(distributions)
    spread = [lab for lab in labels if len(set(distributions[lab].ks)) > 1]
    if spread:
        ax.violinplot([distributions[lab].ks for lab in spread], positions=spread,
                      showmedians=True, showextrema=True, bw_method=VIOLIN_BANDWIDTH)
    for lab in labels:
        if lab not in spread:
            ax.scatter([lab], [distributions[lab].median], color="C0", marker="_", s=200)
    ax.set_xticks(range(len(LETTERS)), LETTERS)
    ax.set_xlim(-0.7, len(LETTERS) - 0.3)
    ax.set_ylabel("Defensibility k")

    acc = [distributions[lab].accuracy for lab in labels]
    if not np.all(np.isnan(acc)):
        ax2 = ax.twinx()
        ax2.plot(labels, acc, color="red", marker="o", linewidth=1)
        ax2.set_ylabel("Test accuracy before attack", color="red")
        ax2.set_ylim(0, 1.05)
    ax.set_title("Defensibility per class")
    return save_figure(fig, stem)


def export_report(matrices: PairwiseMatrices, distributions: dict[int, ClassDistribution],
                  out_dir: str | Path) -> list[Path]:
    """Write every CSV and plot of the analysis into out_dir."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"Cannot create {out}: {exc}") from exc

    written = [
        _write_csv(matrix_frame(matrices.confusion), out / "confusion.csv"),
        _write_csv(matrix_frame(matrices.avg_defensibility), out / "avg_defensibility.csv"),
        _write_csv(matrix_frame(matrices.count_mask.astype(int)),
                   out / "avg_defensibility_mask.csv"),
    ]

    long_rows, summary_rows = [], []
    for label, dist in sorted(distributions.items()):
        censored_left = dist.censored
        # Censored records sit at the top of the sorted k list (k = k_max).
        for k in reversed(dist.ks):
            long_rows.append((letter_name(label), k, int(censored_left > 0)))
            censored_left -= 1
        summary_rows.append({
            "class": letter_name(label), "count": dist.count, "median": dist.median,
            "min": dist.min, "max": dist.max, "iqr": dist.iqr,
            "censored": dist.censored, "accuracy": dist.accuracy,
        })
    long_rows.sort()
    written.append(_write_csv(pd.DataFrame(long_rows, columns=["class", "k", "censored"]),
                              out / "class_k.csv", index=False))
    written.append(_write_csv(pd.DataFrame(summary_rows), out / "class_summary.csv", index=False))

    top = top_confusions(matrices.confusion)
    written.append(_write_csv(
        pd.DataFrame([(letter_name(i), letter_name(j), n) for i, j, n in top],
                     columns=["true", "misrecognized", "count"]),
        out / "top_confusions.csv", index=False))
    asym = asymmetric_pairs(matrices.confusion)
    written.append(_write_csv(
        pd.DataFrame([(letter_name(i), letter_name(j), a, b) for i, j, a, b in asym],
                     columns=["from", "to", "count_forward", "count_backward"]),
        out / "asymmetric_pairs.csv", index=False))

    summary = {
        "records": int(matrices.confusion.sum()) + matrices.censored_count,
        "misrecognized": int(matrices.confusion.sum()),
        "censored": matrices.censored_count,
        "discarded": matrices.discarded_count,
        "min_count": matrices.min_count,
        "median_k_by_class": {letter_name(c): d.median for c, d in sorted(distributions.items())},
    }
    summary_path = out / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(summary_path)

    written += plot_heatmap(matrices.confusion, None, "Confusion after attack",
                            out / "confusion_heatmap", "d", "Images")
    written += plot_heatmap(matrices.avg_defensibility, matrices.count_mask,
                            f"Average defensibility (pairs with > {matrices.min_count} images)",
                            out / "avg_defensibility_heatmap", ".1f", "Mean k")
    written += plot_class_distribution(distributions, out / "class_distribution")
    logger.info("Wrote %d analysis files to %s", len(written), out)
    return written


def _show(ax, image: np.ndarray, title: str) -> None:
    ax.imshow(image, cmap="gray_r", vmin=-1.0, vmax=1.0, interpolation="nearest")
    ax.set_title(title, fontsize=9)
    ax.set_axis_off()


def _original(ds: LabeledDataset, font_id: str, label: int) -> np.ndarray:
    index = ds.find(font_id, label)
    if index is None:
        raise JoinFailure(f"Dataset has no image for ({font_id!r}, {letter_name(label)})")
    return ds.images[index]


def plot_attack_examples(model, ds: LabeledDataset, log: AttackLog,
                         examples: dict[str, list], stem: Path) -> list[Path]:
    """One row per band; each example is its original next to the misrecognized image."""
    tiles = {}
    for band in BANDS:
        for record in examples[band]:
            original = _original(ds, record.font_id, record.true_label)
            attacked = attack_trajectory(model, original, record.true_label,
                                         log.config, steps=record.k)[-1][0]
            tiles.setdefault(band, []).append((record, original, attacked))

    columns = 2 * max(len(examples[band]) for band in BANDS)
    fig, axes = plt.subplots(len(BANDS), columns, figsize=(1.6 * columns, 5.4), squeeze=False)
    for ax in axes.flat:
        ax.set_axis_off()
    for row, band in enumerate(BANDS):
        axes[row, 0].text(-0.35, 0.5, band, transform=axes[row, 0].transAxes,
                          rotation=90, va="center", ha="center", fontsize=10)
        for i, (record, original, attacked) in enumerate(tiles.get(band, [])):
            true, mis = letter_name(record.true_label), letter_name(record.misrecognized_as)
            _show(axes[row, 2 * i], original, record.font_id[-14:])
            _show(axes[row, 2 * i + 1], attacked, f"{true}→({record.k})→{mis}")
    fig.suptitle(f"Attack examples (epsilon {log.config.epsilon:g})")
    return save_figure(fig, stem)


def plot_attack_sequence(model, ds: LabeledDataset, log: AttackLog, record,
                         stem: Path, frames: int = SEQUENCE_FRAMES) -> list[Path]:
    """Evenly spaced steps of one attack, from the original to the first misrecognition."""
    original = _original(ds, record.font_id, record.true_label)
    trajectory = attack_trajectory(model, original, record.true_label, log.config,
                                   steps=record.k)
    steps = np.unique(np.linspace(0, record.k, min(frames, record.k + 1)).round().astype(int))
    fig, axes = plt.subplots(1, len(steps), figsize=(1.8 * len(steps), 2.3), squeeze=False)
    for ax, t in zip(axes[0], steps):
        image, pred = trajectory[t]
        _show(ax, image, f"t={t}: {letter_name(pred)}")
    fig.suptitle(f"{record.font_id}: {letter_name(record.true_label)} misrecognized "
                 f"as {letter_name(record.misrecognized_as)} after {record.k} steps")
    return save_figure(fig, stem)


def export_attack_examples(model, ds: LabeledDataset, log: AttackLog, out_dir: str | Path,
                           per_band: int = 3, frames: int = SEQUENCE_FRAMES) -> list[Path]:
    """Gallery of fragile / moderate / robust images and the step sequence of one attack."""
    out = Path(out_dir)
    examples = fragility_examples(log, per_band)
    if not any(examples.values()):
        logger.info("No misrecognized records; skipping attack example figures")
        return []
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"Cannot create {out}: {exc}") from exc

    rows = [(band, r.font_id, letter_name(r.true_label), r.k, letter_name(r.misrecognized_as))
            for band in BANDS for r in examples[band]]
    written = [_write_csv(pd.DataFrame(rows, columns=["band", "font_id", "true", "k",
                                                      "misrecognized"]),
                          out / "attack_examples.csv", index=False)]
    written += plot_attack_examples(model, ds, log, examples, out / "attack_examples")
    # the moderate band is never empty when any record was misrecognized
    written += plot_attack_sequence(model, ds, log, examples["moderate"][0],
                                    out / "attack_sequence", frames)
    return written
