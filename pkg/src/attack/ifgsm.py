"""
FGSM / I-FGSM attacks and the defensibility measurement k(x).

One FGSM step moves every pixel by epsilon in the direction of the sign of
the input gradient of the classification loss, then clamps to [-1, +1]:

    x' = clamp(x + epsilon * sign(dJ/dx), -1, +1)

I-FGSM repeats the step; the defensibility k of a correctly classified image
is the number of steps until the classifier first changes its answer.
Pixels with exactly zero gradient stay put (sign(0) = 0).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from src.classifier.network import as_network, model_device, model_dtype, parameter_checksum
from src.errors import ConfigError, EmptySplit, NotCorrectlyClassified
from src.glyphs.dataset import LabeledDataset
from src.glyphs.rasterize import CANVAS
from src.letters import letter_index
from src.logging_setup import progress_enabled

logger = logging.getLogger(__name__)

GRADIENT_NOTE = (
    "steps follow sign(dJ/dx), the gradient of the loss with respect to the input image"
)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.02
    k_max: int = 100
    clamp_min: float = -1.0
    clamp_max: float = 1.0
    batch_size: int = 256

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.k_max < 1:
            raise ConfigError("k_max must be >= 1")
        if self.clamp_min >= self.clamp_max:
            raise ConfigError("clamp_min must be below clamp_max")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class AttackRecord:
    font_id: str
    true_label: int
    k: int
    misrecognized_as: int | None
    censored: bool
    final_image: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.censored:
            if self.misrecognized_as is not None:
                raise ValueError("A censored record has no misrecognized class")
        elif self.misrecognized_as is None or self.misrecognized_as == self.true_label:
            raise ValueError("A non-censored record needs a different misrecognized class")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class AttackLog:
    records: list[AttackRecord]
    config: AttackConfig
    classifier_checksum: str
    discarded_count: int = 0
    presented_count: int = 0
    dataset_checksum: str = ""
    split: str = ""

    @property
    def censored_count(self) -> int:
        return sum(r.censored for r in self.records)


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def _as_batch(images, network) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=model_dtype(network))
    return x.reshape(-1, 1, CANVAS, CANVAS).to(model_device(network))


def _fgsm(network, x: torch.Tensor, y: torch.Tensor, epsilon: float,
          lo: float, hi: float) -> torch.Tensor:
    x = x.detach().requires_grad_(True)
    loss = F.cross_entropy(network(x), y, reduction="sum")
    (grad,) = torch.autograd.grad(loss, x)
    return torch.clamp(x.detach() + epsilon * grad.sign(), lo, hi)


def fgsm_step(model, image: np.ndarray, label, epsilon: float,
              clamp: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """One FGSM step on one image."""
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    network = as_network(model)
    network.eval()
    x = _as_batch(np.asarray(image)[None], network)
    y = torch.tensor([letter_index(label)], device=x.device)
    return _fgsm(network, x, y, epsilon, *clamp)[0, 0].cpu().numpy()


def _predict(network, x: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return network(x).argmax(dim=1)


# ---------------------------------------------------------------------------
# I-FGSM
# ---------------------------------------------------------------------------

def _ifgsm_batch(network, x: torch.Tensor, y: torch.Tensor, cfg: AttackConfig):
    """
    Attack a batch of correctly classified images; each stops independently.

    Returns (k, misrecognized or -1, censored, final images).
    """
    x = x.clone()
    n = len(x)
    active = torch.ones(n, dtype=torch.bool, device=x.device)
    k = torch.full((n,), cfg.k_max, dtype=torch.long)
    misrecognized = torch.full((n,), -1, dtype=torch.long)

    for t in range(1, cfg.k_max + 1):
        idx = active.nonzero(as_tuple=True)[0]
        if idx.numel() == 0:
            break
        x[idx] = _fgsm(network, x[idx], y[idx], cfg.epsilon, cfg.clamp_min, cfg.clamp_max)
        pred = _predict(network, x[idx])
        flipped = pred != y[idx]
        done = idx[flipped]
        k[done.cpu()] = t
        misrecognized[done.cpu()] = pred[flipped].cpu()
        active[done] = False

    return k.numpy(), misrecognized.numpy(), active.cpu().numpy(), x.detach().cpu().numpy()


def measure_defensibility(model, image: np.ndarray, label, cfg: AttackConfig = AttackConfig(),
                          font_id: str = "", keep_image: bool = False) -> AttackRecord:
    """Number of I-FGSM steps until `image` is first misrecognized."""
    network = as_network(model)
    network.eval()
    label = letter_index(label)
    x = _as_batch(np.asarray(image)[None], network)
    y = torch.tensor([label], device=x.device)
    if _predict(network, x).item() != label:
        raise NotCorrectlyClassified(f"Image of class {label} is misrecognized before attack")
    k, mis, censored, final = _ifgsm_batch(network, x, y, cfg)
    return _record(font_id, label, k[0], mis[0], censored[0],
                   final[0, 0] if keep_image else None)


def _record(font_id, label, k, mis, censored, final) -> AttackRecord:
    return AttackRecord(
        font_id=font_id,
        true_label=int(label),
        k=int(k),
        misrecognized_as=None if censored else int(mis),
        censored=bool(censored),
        final_image=final,
    )


def attack_images(
    model,
    images: np.ndarray,
    labels: np.ndarray,
    font_ids,
    cfg: AttackConfig = AttackConfig(),
    keep_images: bool = False,
    progress: bool | None = None,
) -> tuple[list[AttackRecord], int]:
    """
    Attack a stack of images. Images misclassified before the attack are
    skipped; returns (records, discarded count).
    """
    network = as_network(model)
    network.eval()
    labels = np.asarray(labels, dtype=np.int64)
    font_ids = list(font_ids)
    records: list[AttackRecord] = []
    discarded = 0

    batches = range(0, len(labels), cfg.batch_size)
    for start in tqdm(batches, desc="attack", disable=not progress_enabled(progress)):
        x = _as_batch(images[start:start + cfg.batch_size], network)
        y = torch.as_tensor(labels[start:start + cfg.batch_size], device=x.device)
        correct = (_predict(network, x) == y).cpu().numpy()
        discarded += int((~correct).sum())
        keep = np.nonzero(correct)[0]
        if keep.size == 0:
            continue
        k, mis, censored, final = _ifgsm_batch(network, x[keep], y[keep], cfg)
        for j, i in enumerate(keep):
            records.append(_record(
                font_ids[start + i], labels[start + i], k[j], mis[j], censored[j],
                final[j, 0] if keep_images else None,
            ))
    return records, discarded


def attack_dataset(
    model,
    ds: LabeledDataset,
    split: str = "test",
    cfg: AttackConfig = AttackConfig(),
    keep_images: bool = False,
    progress: bool | None = None,
) -> AttackLog:
    """Attack every correctly classified image of one split."""
    images, labels, font_ids = ds.subset(split)
    if len(labels) == 0:
        raise EmptySplit(f"Split {split!r} is empty")
    logger.info("Attacking %d %s images (epsilon %.4g, k_max %d)",
                len(labels), split, cfg.epsilon, cfg.k_max)
    records, discarded = attack_images(model, images, labels, font_ids, cfg,
                                       keep_images, progress)
    log = AttackLog(
        records=records,
        config=cfg,
        classifier_checksum=parameter_checksum(model),
        discarded_count=discarded,
        presented_count=len(labels),
        dataset_checksum=ds.checksum(),
        split=split,
    )
    logger.info("Attack done: %d records, %d discarded, %d censored",
                len(records), discarded, log.censored_count)
    return log


# ---------------------------------------------------------------------------
# Inspection
# ---------------------------------------------------------------------------

def attack_trajectory(model, image: np.ndarray, label, cfg: AttackConfig = AttackConfig(),
                      steps: int | None = None) -> list[tuple[np.ndarray, int]]:
    """
    (image, predicted class) for t = 0, 1, ... .

    Stops at the first misrecognition unless `steps` asks for a fixed length.
    """
    network = as_network(model)
    network.eval()
    label = letter_index(label)
    x = _as_batch(np.asarray(image)[None], network)
    y = torch.tensor([label], device=x.device)
    pred = _predict(network, x).item()
    trajectory = [(x[0, 0].cpu().numpy(), pred)]
    limit = cfg.k_max if steps is None else steps
    for _ in range(limit):
        if steps is None and pred != label:
            break
        x = _fgsm(network, x, y, cfg.epsilon, cfg.clamp_min, cfg.clamp_max)
        pred = _predict(network, x).item()
        trajectory.append((x[0, 0].cpu().numpy(), pred))
    return trajectory


def replay_record(model, image: np.ndarray, record: AttackRecord,
                  cfg: AttackConfig = AttackConfig()) -> bool:
    """True when re-running the attack reproduces the record exactly."""
    trajectory = attack_trajectory(model, image, record.true_label, cfg, steps=record.k)
    preds = [p for _, p in trajectory]
    before = all(p == record.true_label for p in preds[:record.k])
    if record.censored:
        return before and preds[record.k] == record.true_label
    return before and preds[record.k] == record.misrecognized_as


def fragility_examples(log: AttackLog, per_band: int = 3) -> dict[str, list[AttackRecord]]:
    """Lowest-k, median-k and highest-k records (fragile / moderate / robust)."""
    ranked = sorted((r for r in log.records if not r.censored),
                    key=lambda r: (r.k, r.font_id, r.true_label))
    if not ranked:
        return {"fragile": [], "moderate": [], "robust": []}
    mid = len(ranked) // 2
    lo = max(0, mid - per_band // 2)
    return {
        "fragile": ranked[:per_band],
        "moderate": ranked[lo:lo + per_band],
        "robust": ranked[-per_band:][::-1],
    }
