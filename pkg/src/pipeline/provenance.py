"""
Provenance headers and per-stage manifests.

Every stage directory holds a provenance.json manifest:

    {"header": {toolkit_version, stage, seed, inputs, config, wall_clock},
     "outputs": {relative path: sha256}}

Data artifacts (dataset, checkpoints, attack log) embed `header.artifact_dict()`,
the same header without the wall-clock, so they stay byte-reproducible.
"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from src import __version__
from src.errors import IoFailure, MissingArtifact
from src.glyphs.storage import file_checksum

logger = logging.getLogger(__name__)

MANIFEST_NAME = "provenance.json"


@dataclass
class ProvenanceHeader:
    stage: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    toolkit_version: str = __version__
    wall_clock: str = ""

    def artifact_dict(self) -> dict:
        return {
            "toolkit_version": self.toolkit_version,
            "stage": self.stage,
            "seed": self.seed,
            "inputs": dict(sorted(self.inputs.items())),
            "config": self.config,
        }

    def to_dict(self) -> dict:
        return {**self.artifact_dict(), "wall_clock": self.wall_clock}


def checksums(out_dir: Path, relative_paths) -> dict[str, str]:
    """sha256 of each file, keyed by its path relative to out_dir."""
    out = {}
    for rel in sorted(relative_paths):
        path = out_dir / rel
        if not path.is_file():
            raise MissingArtifact(f"Expected artifact {path} does not exist")
        out[rel] = file_checksum(path)
    return out


def make_header(stage: str, seed: int, out_dir: Path, inputs, config: dict) -> ProvenanceHeader:
    return ProvenanceHeader(
        stage=stage,
        seed=seed,
        inputs=checksums(out_dir, inputs),
        config=config,
        wall_clock=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def write_manifest(stage_dir: Path, header: ProvenanceHeader, outputs: dict[str, str]) -> Path:
    path = stage_dir / MANIFEST_NAME
    manifest = {"header": header.to_dict(), "outputs": dict(sorted(outputs.items()))}
    try:
        stage_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"Cannot write {path}: {exc}") from exc
    logger.debug("Wrote manifest %s", path)
    return path


def read_manifest(stage_dir: Path) -> dict:
    path = stage_dir / MANIFEST_NAME
    if not path.is_file():
        raise MissingArtifact(f"Stage {stage_dir.name!r} has not been run ({path} missing)")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoFailure(f"Cannot read {path}: {exc}") from exc
