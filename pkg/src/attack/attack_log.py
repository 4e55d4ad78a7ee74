"""
Attack log files: one JSON header line followed by one JSON line per record.

Records are written sorted by (font_id, true_label) so the file only depends
on the set of records, not on attack order.
"""

import json
import logging
from pathlib import Path

from src.attack.ifgsm import GRADIENT_NOTE, AttackConfig, AttackLog, AttackRecord
from src.errors import IoFailure
from src.letters import letter_index, letter_name

logger = logging.getLogger(__name__)

LOG_VERSION = 1


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def record_to_dict(record: AttackRecord) -> dict:
    return {
        "font_id": record.font_id,
        "true_label": letter_name(record.true_label),
        "k": record.k,
        "misrecognized_as": (None if record.misrecognized_as is None
                             else letter_name(record.misrecognized_as)),
        "censored": record.censored,
    }


def record_from_dict(data: dict) -> AttackRecord:
    mis = data["misrecognized_as"]
    return AttackRecord(
        font_id=data["font_id"],
        true_label=letter_index(data["true_label"]),
        k=int(data["k"]),
        misrecognized_as=None if mis is None else letter_index(mis),
        censored=bool(data["censored"]),
    )


def save_attack_log(log: AttackLog, path: str | Path, provenance: dict | None = None) -> None:
    header = {
        "version": LOG_VERSION,
        "epsilon": log.config.epsilon,
        "k_max": log.config.k_max,
        "clamp": [log.config.clamp_min, log.config.clamp_max],
        "classifier_checksum": log.classifier_checksum,
        "dataset_checksum": log.dataset_checksum,
        "split": log.split,
        "discarded_count": log.discarded_count,
        "presented_count": log.presented_count,
        "gradient_variable": GRADIENT_NOTE,
        "provenance": provenance or {},
    }
    records = sorted(log.records, key=lambda r: (r.font_id, r.true_label))
    lines = [_dumps({"header": header})] + [_dumps(record_to_dict(r)) for r in records]
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Cannot write attack log {path}: {exc}") from exc
    logger.info("Wrote %d attack records to %s", len(records), path)


def load_attack_log(path: str | Path) -> AttackLog:
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise IoFailure(f"Cannot read attack log {path}: {exc}") from exc
    if not lines:
        raise ValueError(f"{path} is empty")
    header = json.loads(lines[0])["header"]
    clamp_min, clamp_max = header["clamp"]
    return AttackLog(
        records=[record_from_dict(json.loads(line)) for line in lines[1:] if line.strip()],
        config=AttackConfig(epsilon=header["epsilon"], k_max=header["k_max"],
                            clamp_min=clamp_min, clamp_max=clamp_max),
        classifier_checksum=header["classifier_checksum"],
        discarded_count=header["discarded_count"],
        presented_count=header["presented_count"],
        dataset_checksum=header["dataset_checksum"],
        split=header["split"],
    )


def log_header(path: str | Path) -> dict:
    """Only the header line of an attack log."""
    with open(path, encoding="utf-8") as f:
        return json.loads(f.readline())["header"]
