"""
Training and inference for the 26-class letter classifier.

The classifier is trained with negative log-likelihood over log-softmax
outputs, minimized by AdaDelta, and stopped once the validation loss has not
improved for `patience` epochs; the best-validation weights are restored.
"""

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.classifier.network import (
    LetterCNN,
    as_network,
    model_device,
    model_dtype,
    parameter_checksum,
)
from src.errors import ConfigError, DivergedTraining, EmptySplit
from src.glyphs.dataset import LabeledDataset
from src.glyphs.rasterize import CANVAS
from src.letters import NUM_CLASSES, letter_index
from src.logging_setup import progress_enabled

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassifierConfig:
    conv_channels: tuple[int, ...] = (32, 64)
    kernel: int = 3
    pool: int = 2
    fc_hidden: int = 128
    rho: float = 0.9
    lr: float = 1.0
    patience: int = 10
    max_epochs: int = 200
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be positive")
        if not 0.0 < self.rho < 1.0 or self.lr <= 0:
            raise ConfigError("AdaDelta needs 0 < rho < 1 and lr > 0")

    def build_network(self, out_features: int = NUM_CLASSES) -> LetterCNN:
        return LetterCNN(
            out_features=out_features,
            conv_channels=self.conv_channels,
            kernel=self.kernel,
            pool=self.pool,
            fc_hidden=self.fc_hidden,
        )


@dataclass
class ClassifierModel:
    network: LetterCNN
    config: ClassifierConfig
    metrics: dict = field(default_factory=dict)
    dataset_checksum: str = ""
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    per_class: dict[str, list[float]] = field(default_factory=dict)

    def parameter_checksum(self) -> str:
        return parameter_checksum(self.network)

    def config_dict(self) -> dict:
        return asdict(self.config)


# ---------------------------------------------------------------------------
# Generic early-stopping loop (also used by the regressors)
# ---------------------------------------------------------------------------

def to_tensor(images: np.ndarray, network: nn.Module) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=model_dtype(network))
    return x.reshape(-1, 1, CANVAS, CANVAS).to(model_device(network))


def fit_early_stopping(
    network: nn.Module,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    train: tuple[np.ndarray, np.ndarray],
    val: tuple[np.ndarray, np.ndarray],
    cfg: ClassifierConfig,
    target_dtype: torch.dtype,
    name: str,
    progress: bool | None = None,
) -> tuple[list[dict], int]:
    """
    Minibatch AdaDelta training with patience-based early stopping.

    loss_fn must use mean reduction. Returns (history, best_epoch); the
    network ends up holding the best-validation weights.
    """
    generator = torch.Generator().manual_seed(cfg.seed)
    optimizer = torch.optim.Adadelta(network.parameters(), lr=cfg.lr, rho=cfg.rho)
    x_train, y_train = to_tensor(train[0], network), torch.as_tensor(train[1], dtype=target_dtype)
    x_val, y_val = to_tensor(val[0], network), torch.as_tensor(val[1], dtype=target_dtype)
    y_train, y_val = y_train.to(x_train.device), y_val.to(x_val.device)

    best_loss, best_epoch, best_state = math.inf, 0, copy.deepcopy(network.state_dict())
    history: list[dict] = []
    epochs = tqdm(range(1, cfg.max_epochs + 1), desc=name, disable=not progress_enabled(progress))
    for epoch in epochs:
        network.train()
        order = torch.randperm(len(x_train), generator=generator)
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size].to(x_train.device)
            optimizer.zero_grad()
            loss = loss_fn(network(x_train[idx]), y_train[idx])
            if not torch.isfinite(loss):
                raise DivergedTraining(f"{name}: non-finite training loss at epoch {epoch}")
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)

        network.eval()
        with torch.no_grad():
            val_loss = batched_loss(network, loss_fn, x_val, y_val, cfg.batch_size)
        if not math.isfinite(val_loss):
            raise DivergedTraining(f"{name}: non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / seen, "val_loss": val_loss})
        logger.info("%s epoch %d: train loss %.4f, val loss %.4f",
                    name, epoch, total / seen, val_loss)

        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = copy.deepcopy(network.state_dict())
        elif epoch - best_epoch >= cfg.patience:
            logger.info("%s: no improvement for %d epochs, stopping", name, cfg.patience)
            break

    network.load_state_dict(best_state)
    network.eval()
    logger.info("%s: best epoch %d (val loss %.4f)", name, best_epoch, best_loss)
    return history, best_epoch


def batched_loss(network, loss_fn, x, y, batch_size: int) -> float:
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        total += loss_fn(network(xb), yb).item() * len(xb)
    return total / max(len(x), 1)


# ---------------------------------------------------------------------------
# Classifier operations
# ---------------------------------------------------------------------------

def train_classifier(
    ds: LabeledDataset,
    cfg: ClassifierConfig = ClassifierConfig(),
    progress: bool | None = None,
    device: torch.device | str = "cpu",
) -> ClassifierModel:
    """Train the letter classifier on ds's train split, early-stopping on val."""
    train_images, train_labels, _ = ds.subset("train")
    val_images, val_labels, _ = ds.subset("val")
    if len(train_labels) == 0 or len(val_labels) == 0:
        raise EmptySplit("train_classifier needs non-empty train and val splits")

    torch.manual_seed(cfg.seed)
    network = cfg.build_network().to(device)
    logger.info("Training classifier on %d images (val %d)", len(train_labels), len(val_labels))
    history, best_epoch = fit_early_stopping(
        network, F.cross_entropy, (train_images, train_labels), (val_images, val_labels),
        cfg, torch.long, "classifier", progress,
    )

    model = ClassifierModel(network, cfg, dataset_checksum=ds.checksum(),
                            history=history, best_epoch=best_epoch)
    for split in ("train", "val", "test"):
        has_split = split in ds.splits and len(ds.split_indices(split)) > 0
        model.metrics[f"{split}_acc"] = evaluate(model, ds, split) if has_split else float("nan")
        if has_split:
            model.per_class[split] = per_class_accuracy(model, ds, split).tolist()
    logger.info("Classifier accuracy train/val/test: %.3f / %.3f / %.3f",
                model.metrics["train_acc"], model.metrics["val_acc"], model.metrics["test_acc"])
    return model


def logits_of(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Logits for a stack of images, shape (N, classes)."""
    network = as_network(model)
    network.eval()
    x = to_tensor(images, network)
    out = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(network(x[start:start + batch_size]).cpu())
    if not out:
        return np.zeros((0, NUM_CLASSES))
    return torch.cat(out).numpy()


def predict(model, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    return logits_of(model, images, batch_size).argmax(axis=1)


def classify(model, image: np.ndarray) -> tuple[np.ndarray, int]:
    """Return (logits, predicted class index) for one 64x64 image."""
    image = np.asarray(image)
    if image.shape != (CANVAS, CANVAS):
        raise ValueError(f"Image must be {CANVAS}x{CANVAS}, got {image.shape}")
    logits = logits_of(model, image[None])[0]
    return logits, int(np.argmax(logits))


def input_gradient(model, image: np.ndarray, label) -> np.ndarray:
    """
    Gradient of the classification loss J(x, y) with respect to the input image.

    Computed in the network's own precision (use a double copy for gradient checks).
    """
    network = as_network(model)
    network.eval()
    x = to_tensor(np.asarray(image)[None], network).requires_grad_(True)
    y = torch.tensor([letter_index(label)], device=x.device)
    loss = F.cross_entropy(network(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return grad[0, 0].detach().cpu().numpy().astype(np.float64)


def gradient_check(
    model,
    image: np.ndarray,
    label,
    step: float = 1e-3,
    pixels: np.ndarray | None = None,
) -> float:
    """
    Relative error between input_gradient and central finite differences,
    both in double precision, over `pixels` (flat indices; default all).
    """
    network = copy.deepcopy(as_network(model)).double().eval()
    image = np.asarray(image, dtype=np.float64)
    analytic = input_gradient(network, image, label).reshape(-1)
    pixels = np.arange(image.size) if pixels is None else np.asarray(pixels)

    flat = image.reshape(-1)
    probes = np.repeat(flat[None], 2 * len(pixels), axis=0)
    probes[np.arange(len(pixels)), pixels] += step
    probes[len(pixels) + np.arange(len(pixels)), pixels] -= step
    y = torch.full((len(probes),), letter_index(label), dtype=torch.long)
    with torch.no_grad():
        losses = F.cross_entropy(network(to_tensor(probes, network)), y, reduction="none")
    losses = losses.numpy()
    numeric = (losses[:len(pixels)] - losses[len(pixels):]) / (2 * step)

    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic[pixels]), 1e-12)
    return float(np.linalg.norm(analytic[pixels] - numeric) / scale)


def evaluate(model, ds: LabeledDataset, split: str) -> float:
    """Fraction of images in `split` that classify as their label."""
    images, labels, _ = ds.subset(split)
    if len(labels) == 0:
        raise EmptySplit(f"Split {split!r} is empty")
    return float(np.mean(predict(model, images) == labels))


def per_class_accuracy(model, ds: LabeledDataset, split: str = "test") -> np.ndarray:
    """Accuracy per letter class; NaN for letters absent from the split."""
    images, labels, _ = ds.subset(split)
    if len(labels) == 0:
        raise EmptySplit(f"Split {split!r} is empty")
    correct = predict(model, images) == labels
    acc = np.full(NUM_CLASSES, np.nan)
    for c in range(NUM_CLASSES):
        mask = labels == c
        if mask.any():
            acc[c] = correct[mask].mean()
    return acc
