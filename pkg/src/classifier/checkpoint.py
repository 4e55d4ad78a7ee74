"""
Checkpoint files for every trained network in the toolkit.

A checkpoint is a torch-saved dict:
    {format_version, kind, config, state_dict, metrics, provenance, extra}
"""

import logging
from pathlib import Path

import torch

from src.classifier.network import parameter_checksum
from src.classifier.training import ClassifierConfig, ClassifierModel
from src.errors import IoFailure

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    kind: str,
    config: dict,
    network: torch.nn.Module,
    metrics: dict | None = None,
    provenance: dict | None = None,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "state_dict": {k: v.detach().cpu() for k, v in network.state_dict().items()},
        "parameter_checksum": parameter_checksum(network),
        "metrics": metrics or {},
        "provenance": provenance or {},
        "extra": extra or {},
    }
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)
    except OSError as exc:
        raise IoFailure(f"Cannot write checkpoint {path}: {exc}") from exc
    logger.info("Saved %s checkpoint to %s", kind, path)


def load_checkpoint(path: str | Path, kind: str) -> dict:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except OSError as exc:
        raise IoFailure(f"Cannot read checkpoint {path}: {exc}") from exc
    if payload.get("kind") != kind:
        raise ValueError(f"{path} holds a {payload.get('kind')!r} checkpoint, not {kind!r}")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"Unsupported checkpoint version {payload.get('format_version')}")
    return payload


def save_classifier(model: ClassifierModel, path: str | Path, provenance: dict | None = None):
    save_checkpoint(
        path,
        "classifier",
        model.config_dict(),
        model.network,
        metrics=model.metrics,
        provenance=provenance,
        extra={
            "dataset_checksum": model.dataset_checksum,
            "history": model.history,
            "best_epoch": model.best_epoch,
            "per_class": model.per_class,
        },
    )


def load_classifier(path: str | Path) -> ClassifierModel:
    payload = load_checkpoint(path, "classifier")
    config = ClassifierConfig(**payload["config"])
    network = config.build_network()
    network.load_state_dict(payload["state_dict"])
    network.eval()
    extra = payload["extra"]
    return ClassifierModel(
        network=network,
        config=config,
        metrics=payload["metrics"],
        dataset_checksum=extra.get("dataset_checksum", ""),
        history=extra.get("history", []),
        best_epoch=extra.get("best_epoch", 0),
        per_class=extra.get("per_class", {}),
    )
