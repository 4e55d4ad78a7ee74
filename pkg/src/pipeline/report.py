"""
report.md: one human-readable page over whatever stages have run.

Stages without artifacts are rendered as "not run".
"""

import json
import logging
import math
from pathlib import Path

import pandas as pd

from src.attack.attack_log import log_header
from src.classifier.checkpoint import load_checkpoint
from src.errors import IoFailure, MissingArtifact
from src.letters import LETTERS

logger = logging.getLogger(__name__)

NOT_RUN = "_not run_"
REPORT_NAME = "report.md"


def _fmt(value) -> str:
    if isinstance(value, float):
        return "n/a" if math.isnan(value) else f"{value:.4g}"
    return str(value)


def _table(headers: list[str], rows: list[list]) -> list[str]:
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    lines += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return lines + [""]


def _json(path: Path) -> dict | None:
    return json.loads(path.read_text(encoding="utf-8")) if path.is_file() else None


def _image(out_dir: Path, rel: str, alt: str) -> list[str]:
    return [f"![{alt}]({rel})", ""] if (out_dir / rel).is_file() else []


def _provenance_section(out_dir: Path) -> list[str]:
    rows = []
    for manifest in sorted(out_dir.glob("*/provenance.json")):
        header = json.loads(manifest.read_text(encoding="utf-8"))["header"]
        inputs = ", ".join(f"{Path(k).name}:{v[:12]}" for k, v in header["inputs"].items())
        rows.append([header["stage"], header["toolkit_version"], header["seed"], inputs or "-"])
    if not rows:
        return [NOT_RUN, ""]
    return _table(["stage", "version", "seed", "inputs (sha256 prefix)"], rows)


def _classifier_section(out_dir: Path) -> list[str]:
    checkpoint = out_dir / "classifier" / "classifier.pt"
    if not checkpoint.is_file():
        return [NOT_RUN, ""]
    metrics = load_checkpoint(checkpoint, "classifier")["metrics"]
    lines = _table(["split", "accuracy"],
                   [[split, metrics.get(f"{split}_acc", float("nan"))]
                    for split in ("train", "val", "test")])
    per_class = out_dir / "classifier" / "per_class_accuracy.csv"
    if per_class.is_file():
        frame = pd.read_csv(per_class)
        lines += _table(list(LETTERS), [[float(a) for a in frame["accuracy"]]])
    return lines


def _analysis_section(out_dir: Path) -> list[str]:
    summary = _json(out_dir / "analysis" / "summary.json")
    if summary is None:
        return [NOT_RUN, ""]
    lines = _table(
        ["records", "misrecognized", "censored", "discarded", "pair threshold"],
        [[summary["records"], summary["misrecognized"], summary["censored"],
          summary["discarded"], f"> {summary['min_count']}"]],
    )
    attack_log = out_dir / "attack" / "attack_log.jsonl"
    if attack_log.is_file():
        header = log_header(attack_log)
        lines[:0] = [f"Attack: epsilon {header['epsilon']:g}, k_max {header['k_max']}, "
                     f"{header['split']} split", ""]
    top = out_dir / "analysis" / "top_confusions.csv"
    if top.is_file():
        frame = pd.read_csv(top)
        lines += ["Most frequent confusions:", ""]
        lines += _table(["true", "misrecognized", "count"], frame.values.tolist())
    lines += _image(out_dir, "analysis/confusion_heatmap.png", "confusion after attack")
    lines += _image(out_dir, "analysis/avg_defensibility_heatmap.png", "average defensibility")
    lines += _image(out_dir, "analysis/class_distribution.png", "defensibility per class")
    lines += _image(out_dir, "analysis/attack_examples.png", "fragile, moderate and robust letters")
    lines += _image(out_dir, "analysis/attack_sequence.png", "one attack step by step")
    return lines


def _regression_section(out_dir: Path) -> list[str]:
    summary = _json(out_dir / "regressor" / "regression_summary.json")
    if summary is None:
        return [NOT_RUN, ""]
    rows = [[letter, s["n"], s["pearson_r"], s["p_value"], s["mse"]]
            for letter, s in sorted(summary.items())]
    significant = sum(1 for _, _, r, p, _ in rows
                      if not math.isnan(r) and r > 0 and p < 0.01)
    lines = [f"Classes with r > 0 at p < 0.01: {significant} of {len(rows)}", ""]
    lines += _table(["class", "n", "pearson r", "p (r > 0)", "mse"], rows)
    return lines + _image(out_dir, "regressor/yy_grid.png", "measured vs estimated k")


def _generation_section(out_dir: Path) -> list[str]:
    summary = _json(out_dir / "eval-generated" / "generation_summary.json")
    if summary is None:
        return [NOT_RUN, ""]
    rows = []
    for name, population in summary["populations"].items():
        rows.append([name, population["pooled_mean_k"],
                     sum(population["presented"].values()),
                     sum(population["discarded"].values())])
    lines = _table(["population", "pooled mean k", "presented", "discarded"], rows)
    if summary["p_values"]:
        lines += _table(["comparison", "one-sided p"],
                        [[k, v] for k, v in sorted(summary["p_values"].items())])
    lines += _image(out_dir, "eval-generated/histogram_overlays.png", "k histograms")
    galleries = [f"![{letter}](eval-generated/gallery_{letter}.png)" for letter in LETTERS
                 if (out_dir / "eval-generated" / f"gallery_{letter}.png").is_file()]
    if galleries:
        lines += ["Most defensible generated letters per class:", ""] + galleries + [""]
    return lines


SECTIONS = (
    ("Provenance", _provenance_section),
    ("Classifier", _classifier_section),
    ("Defensibility analysis", _analysis_section),
    ("Defensibility regression", _regression_section),
    ("Generated letters", _generation_section),
)


def write_report(out_dir: str | Path) -> Path:
    """Assemble report.md inside out_dir from the artifacts found there."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir() or not any(out_dir.glob("*/provenance.json")):
        raise MissingArtifact(f"No stage artifacts under {out_dir}")
    lines = ["# Defensive letter report", ""]
    for title, section in SECTIONS:
        lines += [f"## {title}", ""] + section(out_dir)
    path = out_dir / REPORT_NAME
    try:
        path.write_text("\n".join(lines).rstrip("\n") + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc
    logger.info("Wrote %s", path)
    return path
