"""
Per-class deep regression of defensibility k from a non-attacked letter image.

Each of the 26 classes gets its own copy of the classifier CNN with a single
output unit, trained with MSE on the raw integer k and AdaDelta, using the
same early-stopping rule as the classifier.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
import torch  # noqa: E402
import torch.nn.functional as F  # noqa: E402
from scipy import stats  # noqa: E402

from src.analysis.report_files import save_figure  # noqa: E402
from src.attack.ifgsm import AttackLog  # noqa: E402
from src.classifier.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402
from src.classifier.network import LetterCNN  # noqa: E402
from src.classifier.training import (  # noqa: E402
    ClassifierConfig,
    fit_early_stopping,
    to_tensor,
)
from src.errors import ConfigError, EmptyClass, IoFailure, JoinFailure  # noqa: E402
from src.glyphs.dataset import LabeledDataset, split_fonts, validate_ratios  # noqa: E402
from src.glyphs.rasterize import BACKGROUND, INK  # noqa: E402
from src.letters import LETTERS, letter_index, letter_name  # noqa: E402

logger = logging.getLogger(__name__)

# About 800 / 100 / 200 images per class at full scale.
DEFAULT_REGRESSION_RATIOS = (8 / 11, 1 / 11, 2 / 11)


@dataclass(frozen=True)
class RegressionConfig(ClassifierConfig):
    ratios: tuple[float, float, float] = DEFAULT_REGRESSION_RATIOS
    split_seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        try:
            object.__setattr__(self, "ratios", validate_ratios(self.ratios))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class ClassSamples:
    images: np.ndarray
    ks: np.ndarray
    font_ids: tuple[str, ...]


@dataclass
class RegressionDataset:
    """class index -> split name -> samples (original images with measured k)."""

    classes: dict[int, dict[str, ClassSamples]]
    dataset_checksum: str = ""
    classifier_checksum: str = ""

    def samples(self, label, split: str) -> ClassSamples:
        label = letter_index(label)
        if label not in self.classes:
            raise EmptyClass(f"No regression data for class {letter_name(label)}")
        return self.classes[label][split]


@dataclass
class RegressorModel:
    label: int
    network: LetterCNN
    config: RegressionConfig
    metrics: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def build_regression_dataset(
    log: AttackLog,
    ds: LabeledDataset,
    ratios=DEFAULT_REGRESSION_RATIOS,
    seed: int = 0,
) -> RegressionDataset:
    """
    Join non-censored attack records back to their original images and split
    each class font-disjointly. Classes with fewer than three usable records
    are left out.
    """
    if log.dataset_checksum and log.dataset_checksum != ds.checksum():
        raise JoinFailure("Attack log was produced on a different dataset")

    by_class: dict[int, list[tuple[str, int, int]]] = {}
    for record in log.records:
        if record.censored:
            continue
        index = ds.find(record.font_id, record.true_label)
        if index is None:
            raise JoinFailure(
                f"No image for font {record.font_id!r}, class {letter_name(record.true_label)}"
            )
        by_class.setdefault(record.true_label, []).append((record.font_id, index, record.k))

    classes: dict[int, dict[str, ClassSamples]] = {}
    for label, rows in sorted(by_class.items()):
        fonts = sorted({f for f, _, _ in rows})
        if len(fonts) < 3:
            logger.warning("Class %s has only %d records; skipped", letter_name(label), len(rows))
            continue
        splits = split_fonts(fonts, ratios, seed + label)
        classes[label] = {}
        for split, members in splits.items():
            chosen = sorted((r for r in rows if r[0] in members), key=lambda r: r[0])
            images = ds.images[[i for _, i, _ in chosen]]
            if not np.isin(images, (INK, BACKGROUND)).all():
                raise ValueError("Regression inputs must be original binary images")
            classes[label][split] = ClassSamples(
                images=images,
                ks=np.array([k for _, _, k in chosen], dtype=np.float32),
                font_ids=tuple(f for f, _, _ in chosen),
            )
    if not classes:
        raise EmptyClass("No class has enough non-censored records for regression")
    return RegressionDataset(classes, ds.checksum(), log.classifier_checksum)


def _mse(output: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.mse_loss(output.squeeze(1), target)


def train_regressor(label, rds: RegressionDataset, cfg: RegressionConfig = RegressionConfig(),
                    progress: bool | None = None) -> RegressorModel:
    """Train the regressor of one class with early stopping on validation MSE."""
    label = letter_index(label)
    train, val = rds.samples(label, "train"), rds.samples(label, "val")
    if len(train.ks) == 0 or len(val.ks) == 0:
        raise EmptyClass(f"Class {letter_name(label)} has an empty train or val split")

    torch.manual_seed(cfg.seed)
    network = cfg.build_network(out_features=1)
    history, best_epoch = fit_early_stopping(
        network, _mse, (train.images, train.ks), (val.images, val.ks),
        cfg, torch.float32, f"regressor-{letter_name(label)}", progress,
    )
    model = RegressorModel(label, network, cfg, history=history, best_epoch=best_epoch)
    if len(rds.samples(label, "test").ks):
        result = evaluate_regressor(model, rds)
        model.metrics = {"test_pearson_r": result["pearson_r"], "test_mse": result["mse"],
                         "test_p_value": result["p_value"], "test_n": result["n"]}
    return model


def train_all_regressors(rds: RegressionDataset, cfg: RegressionConfig = RegressionConfig(),
                         classes=None, progress: bool | None = None) -> dict[int, RegressorModel]:
    """One regressor per class; classes that cannot be trained are logged and skipped."""
    wanted = sorted(rds.classes) if classes is None else [letter_index(c) for c in classes]
    models = {}
    for label in wanted:
        try:
            models[label] = train_regressor(label, rds, cfg, progress)
        except EmptyClass as exc:
            logger.warning("Skipping regressor for %s: %s", letter_name(label), exc)
    return models


def estimates(model: RegressorModel, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.network.eval()
    x = to_tensor(images, model.network)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(model.network(x[start:start + batch_size])[:, 0].cpu())
    return torch.cat(out).numpy().astype(np.float64) if out else np.zeros(0)


def estimate(model: RegressorModel, image: np.ndarray) -> float:
    """Estimated defensibility k-hat of one original image."""
    return float(estimates(model, np.asarray(image)[None])[0])


def pearson(ks: np.ndarray, estimates_: np.ndarray) -> tuple[float, float]:
    """(r, one-sided p-value for r > 0); NaN when undefined."""
    if len(ks) < 3 or np.ptp(ks) == 0 or np.ptp(estimates_) == 0:
        return float("nan"), float("nan")
    result = stats.pearsonr(ks, estimates_, alternative="greater")
    return float(result.statistic), float(result.pvalue)


def residuals_by_k(pairs: list[tuple[float, float]]) -> dict[int, float]:
    """Mean (k-hat - k) for each ground-truth k."""
    grouped: dict[int, list[float]] = {}
    for k, k_hat in pairs:
        grouped.setdefault(int(k), []).append(k_hat - k)
    return {k: float(np.mean(v)) for k, v in sorted(grouped.items())}


def evaluate_regressor(model: RegressorModel, rds: RegressionDataset, split: str = "test") -> dict:
    samples = rds.samples(model.label, split)
    if len(samples.ks) == 0:
        raise EmptyClass(f"Class {letter_name(model.label)} has an empty {split} split")
    predicted = estimates(model, samples.images)
    truth = samples.ks.astype(np.float64)
    r, p = pearson(truth, predicted)
    pairs = list(zip(truth.tolist(), predicted.tolist()))
    return {
        "pearson_r": r,
        "p_value": p,
        "mse": float(np.mean((predicted - truth) ** 2)),
        "n": len(truth),
        "yy_pairs": pairs,
        "residuals_by_k": residuals_by_k(pairs),
    }


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def save_regressor(model: RegressorModel, path: str | Path, provenance: dict | None = None):
    save_checkpoint(path, "regressor", asdict(model.config), model.network,
                    metrics=model.metrics, provenance=provenance,
                    extra={"label": letter_name(model.label), "history": model.history,
                           "best_epoch": model.best_epoch})


def load_regressor(path: str | Path) -> RegressorModel:
    payload = load_checkpoint(path, "regressor")
    config = RegressionConfig(**payload["config"])
    network = config.build_network(out_features=1)
    network.load_state_dict(payload["state_dict"])
    network.eval()
    extra = payload["extra"]
    return RegressorModel(letter_index(extra["label"]), network, config,
                          metrics=payload["metrics"], history=extra.get("history", []),
                          best_epoch=extra.get("best_epoch", 0))


def write_yy_csv(pairs: list[tuple[float, float]], path: str | Path) -> None:
    try:
        pd.DataFrame(pairs, columns=["k", "k_hat"]).to_csv(path, index=False, lineterminator="\n")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc


def plot_yy_grid(results: dict[int, dict], stem: Path) -> list[Path]:
    """One y-y scatter per class in a 4 x 7 grid."""
    fig, axes = plt.subplots(4, 7, figsize=(18, 11))
    for label, ax in zip(range(len(LETTERS)), axes.flat):
        ax.set_title(letter_name(label))
        result = results.get(label)
        if result is None:
            ax.text(0.5, 0.5, "not trained", ha="center", va="center", transform=ax.transAxes)
            continue
        ks, k_hats = zip(*result["yy_pairs"])
        ax.scatter(ks, k_hats, s=6, alpha=0.6)
        top = max(max(ks), max(k_hats)) + 1
        ax.plot([0, top], [0, top], color="gray", linewidth=0.8)
        ax.text(0.05, 0.9, f"r={result['pearson_r']:.2f}", transform=ax.transAxes, fontsize=8)
    for ax in axes.flat[len(LETTERS):]:
        ax.axis("off")
    fig.supxlabel("Measured k")
    fig.supylabel("Estimated k")
    fig.tight_layout()
    return save_figure(fig, stem)
