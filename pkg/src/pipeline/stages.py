"""
Stage runner for the experiment chain.

Output directory layout (one sub-directory per stage, each with provenance.json):

    dataset/dataset.bin
    classifier/classifier.pt, per_class_accuracy.csv
    attack/attack_log.jsonl
    analysis/...                      see src.analysis.report_files
    regressor/<L>.pt, yy_<L>.csv, yy_grid.png/.svg, regression_summary.json
    gan-step1/generator.pt, discriminator.pt, losses.csv, checkpoints/
    gan-step2/generator.pt, step2_history.csv
    eval-generated/...                see src.generator.evaluation
    report.md

A stage refuses to run when an upstream artifact is missing (MissingArtifact)
or has changed since the stage that consumed it was produced (StaleArtifact).
`force=True` turns staleness into a warning.
"""

import json
import logging
import warnings
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import pandas as pd
import torch

from src.analysis.matrices import class_distributions, conservation_check, pairwise_matrices
from src.analysis.report_files import export_attack_examples, export_report
from src.attack.attack_log import load_attack_log, save_attack_log
from src.attack.ifgsm import attack_dataset
from src.classifier.checkpoint import load_classifier, save_classifier
from src.classifier.training import per_class_accuracy, train_classifier
from src.errors import IoFailure, MissingArtifact, ModeCollapseWarning, StaleArtifact
from src.generator.cgan import (
    finetune_generator_step2,
    load_discriminator,
    load_generator,
    save_discriminator,
    save_generator,
    train_cgan_step1,
)
from src.generator.evaluation import evaluate_generated, write_evaluation
from src.glyphs.dataset import build_dataset, ingest_png_directory
from src.glyphs.storage import file_checksum, load_dataset, save_dataset
from src.letters import LETTERS, letter_name
from src.logging_setup import default_device
from src.pipeline.config import ExperimentConfig
from src.pipeline.provenance import ProvenanceHeader, make_header, read_manifest, write_manifest
from src.pipeline.report import write_report
from src.regression.regressor import (
    build_regression_dataset,
    evaluate_regressor,
    plot_yy_grid,
    save_regressor,
    train_all_regressors,
    write_yy_csv,
)

logger = logging.getLogger(__name__)

STAGES = (
    "dataset", "classifier", "attack", "analyze", "regressor",
    "gan-step1", "gan-step2", "eval-generated", "report",
)

STAGE_DIRS = {
    "dataset": "dataset",
    "classifier": "classifier",
    "attack": "attack",
    "analyze": "analysis",
    "regressor": "regressor",
    "gan-step1": "gan-step1",
    "gan-step2": "gan-step2",
    "eval-generated": "eval-generated",
}

DATASET = "dataset/dataset.bin"
CLASSIFIER = "classifier/classifier.pt"
ATTACK_LOG = "attack/attack_log.jsonl"
STEP1_G = "gan-step1/generator.pt"
STEP1_D = "gan-step1/discriminator.pt"
STEP2_G = "gan-step2/generator.pt"

# stage -> (upstream stages, input files)
DEPENDENCIES: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    "dataset": ((), ()),
    "classifier": (("dataset",), (DATASET,)),
    "attack": (("dataset", "classifier"), (DATASET, CLASSIFIER)),
    "analyze": (("dataset", "classifier", "attack"), (DATASET, CLASSIFIER, ATTACK_LOG)),
    "regressor": (("dataset", "attack"), (DATASET, ATTACK_LOG)),
    "gan-step1": (("dataset",), (DATASET,)),
    "gan-step2": (("classifier", "gan-step1"), (CLASSIFIER, STEP1_G, STEP1_D)),
    "eval-generated": (("dataset", "classifier", "gan-step1", "gan-step2"),
                       (DATASET, CLASSIFIER, STEP1_G, STEP2_G)),
    "report": ((), ()),
}


@dataclass
class StageContext:
    config: ExperimentConfig
    out_dir: Path
    progress: bool | None = None
    force: bool = False

    def path(self, rel: str) -> Path:
        return self.out_dir / rel

    def rel(self, path: Path) -> str:
        return path.relative_to(self.out_dir).as_posix()


def upstream_stages(stage: str) -> list[str]:
    """Transitive upstream stages in pipeline order."""
    seen: set[str] = set()
    pending = list(DEPENDENCIES[stage][0])
    while pending:
        name = pending.pop()
        if name not in seen:
            seen.add(name)
            pending.extend(DEPENDENCIES[name][0])
    return [s for s in STAGES if s in seen]


def verify_upstream(out_dir: Path, stage: str) -> None:
    """Raise MissingArtifact / StaleArtifact unless every upstream artifact is current."""
    for upstream in upstream_stages(stage):
        manifest = read_manifest(out_dir / STAGE_DIRS[upstream])
        for rel, digest in manifest["outputs"].items():
            if not (out_dir / rel).is_file():
                raise MissingArtifact(f"{rel} (from stage {upstream!r}) is missing")
            if file_checksum(out_dir / rel) != digest:
                raise StaleArtifact(f"{rel} changed after stage {upstream!r} wrote it")
        for rel, digest in manifest["header"]["inputs"].items():
            if not (out_dir / rel).is_file() or file_checksum(out_dir / rel) != digest:
                raise StaleArtifact(
                    f"Stage {upstream!r} was produced from a different {rel}; re-run it or --force"
                )


# ---------------------------------------------------------------------------
# Stage bodies: each returns the files it wrote
# ---------------------------------------------------------------------------

def _run_dataset(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    cfg = ctx.config.dataset
    if cfg.png_dir is not None:
        ds = ingest_png_directory(cfg.png_dir, cfg.ratios, cfg.seed)
    else:
        ds = build_dataset(cfg.font_dir, cfg.ratios, cfg.seed, workers=cfg.workers,
                           progress=ctx.progress)
    save_dataset(ds, ctx.path(DATASET))
    return [ctx.path(DATASET)]


def _run_classifier(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    ds = load_dataset(ctx.path(DATASET))
    model = train_classifier(ds, ctx.config.classifier, ctx.progress, default_device())
    model.network.cpu()
    save_classifier(model, ctx.path(CLASSIFIER), header.artifact_dict())
    accuracy = ctx.path("classifier/per_class_accuracy.csv")
    pd.DataFrame({"class": list(LETTERS), "accuracy": per_class_accuracy(model, ds, "test")}) \
        .to_csv(accuracy, index=False, na_rep="", lineterminator="\n")
    return [ctx.path(CLASSIFIER), accuracy]


def _run_attack(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    ds = load_dataset(ctx.path(DATASET))
    model = load_classifier(ctx.path(CLASSIFIER))
    if model.dataset_checksum != ds.checksum():
        message = "Classifier was trained on a different dataset"
        if not ctx.force:
            raise StaleArtifact(message)
        logger.warning("%s (continuing because of --force)", message)
    log = attack_dataset(model, ds, ctx.config.attack_split, ctx.config.attack,
                         progress=ctx.progress)
    save_attack_log(log, ctx.path(ATTACK_LOG), header.artifact_dict())
    return [ctx.path(ATTACK_LOG)]


def _run_analyze(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    ds = load_dataset(ctx.path(DATASET))
    model = load_classifier(ctx.path(CLASSIFIER))
    log = load_attack_log(ctx.path(ATTACK_LOG))
    if not conservation_check(log):
        logger.warning("Attack log counts do not add up to the %d presented images",
                       log.presented_count)
    matrices = pairwise_matrices(log, ctx.config.analysis.min_count)
    distributions = class_distributions(log, per_class_accuracy(model, ds, log.split))
    out = ctx.path(STAGE_DIRS["analyze"])
    written = export_report(matrices, distributions, out)
    return written + export_attack_examples(model, ds, log, out)


def _run_regressor(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    cfg = ctx.config.regression
    out = ctx.path(STAGE_DIRS["regressor"])
    out.mkdir(parents=True, exist_ok=True)
    rds = build_regression_dataset(load_attack_log(ctx.path(ATTACK_LOG)),
                                   load_dataset(ctx.path(DATASET)), cfg.ratios, cfg.split_seed)
    models = train_all_regressors(rds, cfg, progress=ctx.progress)
    written, results, summary = [], {}, {}
    for label, model in sorted(models.items()):
        letter = letter_name(label)
        save_regressor(model, out / f"{letter}.pt", header.artifact_dict())
        results[label] = evaluate_regressor(model, rds)
        write_yy_csv(results[label]["yy_pairs"], out / f"yy_{letter}.csv")
        written += [out / f"{letter}.pt", out / f"yy_{letter}.csv"]
        summary[letter] = {key: results[label][key] for key in ("pearson_r", "p_value", "mse", "n")}
        summary[letter]["residuals_by_k"] = {
            str(k): v for k, v in results[label]["residuals_by_k"].items()
        }
    summary_path = out / "regression_summary.json"
    summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(summary_path)
    written += plot_yy_grid(results, out / "yy_grid")
    return written


def _run_gan_step1(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    out = ctx.path(STAGE_DIRS["gan-step1"])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ModeCollapseWarning)
        generator, discriminator = train_cgan_step1(
            load_dataset(ctx.path(DATASET)), ctx.config.gan, out / "checkpoints", ctx.progress)
    for warning in caught:
        logger.warning("gan-step1: %s", warning.message)
    save_generator(generator, ctx.path(STEP1_G), header.artifact_dict())
    save_discriminator(discriminator, ctx.path(STEP1_D), header.artifact_dict())
    losses = out / "losses.csv"
    pd.DataFrame(generator.history).to_csv(losses, index=False, lineterminator="\n")
    return [ctx.path(STEP1_G), ctx.path(STEP1_D), losses]


def _run_gan_step2(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    generator = finetune_generator_step2(
        load_generator(ctx.path(STEP1_G)),
        load_classifier(ctx.path(CLASSIFIER)),
        ctx.config.gan,
        discriminator=load_discriminator(ctx.path(STEP1_D)),
        progress=ctx.progress,
    )
    save_generator(generator, ctx.path(STEP2_G), header.artifact_dict())
    history = ctx.path("gan-step2/step2_history.csv")
    pd.DataFrame(generator.history).to_csv(history, index=False, lineterminator="\n")
    return [ctx.path(STEP2_G), history]


def _run_eval_generated(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    cfg = ctx.config.evaluation
    evaluation = evaluate_generated(
        load_generator(ctx.path(STEP2_G)),
        load_classifier(ctx.path(CLASSIFIER)),
        ctx.config.attack,
        n_per_class=cfg.n_per_class,
        originals=load_dataset(ctx.path(DATASET)),
        split=cfg.split,
        baseline=load_generator(ctx.path(STEP1_G)) if cfg.baseline else None,
        seed=cfg.seed,
        progress=ctx.progress,
    )
    return write_evaluation(evaluation, ctx.path(STAGE_DIRS["eval-generated"]))


def _run_report(ctx: StageContext, header: ProvenanceHeader) -> list[Path]:
    return [write_report(ctx.out_dir)]


RUNNERS: dict[str, Callable[[StageContext, ProvenanceHeader], list[Path]]] = {
    "dataset": _run_dataset,
    "classifier": _run_classifier,
    "attack": _run_attack,
    "analyze": _run_analyze,
    "regressor": _run_regressor,
    "gan-step1": _run_gan_step1,
    "gan-step2": _run_gan_step2,
    "eval-generated": _run_eval_generated,
    "report": _run_report,
}


def run_stage(config: ExperimentConfig, stage: str, force: bool = False,
              progress: bool | None = None) -> list[Path]:
    """Run one stage after checking its upstream artifacts; returns the files written."""
    if stage not in RUNNERS:
        raise ValueError(f"Unknown stage {stage!r}; expected one of {', '.join(STAGES)}")
    out_dir = Path(config.out_dir)
    ctx = StageContext(config, out_dir, progress, force)
    try:
        verify_upstream(out_dir, stage)
    except StaleArtifact as exc:
        if not force:
            raise
        logger.warning("%s (continuing because of --force)", exc)

    torch.manual_seed(config.seed)
    header = make_header(stage, config.seed, out_dir, DEPENDENCIES[stage][1], config.echo())
    if stage in STAGE_DIRS:
        try:
            ctx.path(STAGE_DIRS[stage]).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IoFailure(f"Cannot create {ctx.path(STAGE_DIRS[stage])}: {exc}") from exc

    logger.info("Running stage %s", stage)
    written = RUNNERS[stage](ctx, header)
    if stage in STAGE_DIRS:
        outputs = {ctx.rel(p): file_checksum(p) for p in written}
        write_manifest(ctx.path(STAGE_DIRS[stage]), header, outputs)
    logger.info("Stage %s wrote %d files", stage, len(written))
    return written


def run_all(config: ExperimentConfig, force: bool = False, progress: bool | None = None,
            stages=STAGES) -> dict[str, list[Path]]:
    """Run stages in pipeline order."""
    return {stage: run_stage(config, stage, force, progress)
            for stage in STAGES if stage in stages}
