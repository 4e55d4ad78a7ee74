"""
defletter command line.

Exit codes: 0 success, 1 usage or configuration error, 2 stage failure,
3 stale artifact.
"""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from src.analysis.matrices import DEFAULT_MIN_COUNT, class_distributions, pairwise_matrices
from src.analysis.report_files import export_attack_examples, export_report
from src.attack.attack_log import load_attack_log, save_attack_log
from src.attack.ifgsm import AttackConfig, attack_dataset
from src.classifier.checkpoint import load_classifier, save_classifier
from src.classifier.training import ClassifierConfig, per_class_accuracy, train_classifier
from src.errors import ConfigError, DefletterError, StaleArtifact
from src.generator.cgan import (
    GanConfig,
    finetune_generator_step2,
    load_discriminator,
    load_generator,
    save_discriminator,
    save_generator,
    train_cgan_step1,
)
from src.generator.evaluation import evaluate_generated, write_evaluation
from src.glyphs.dataset import DEFAULT_RATIOS, build_dataset, ingest_png_directory
from src.glyphs.storage import load_dataset, save_dataset
from src.letters import letter_name
from src.logging_setup import configure_logging, default_device, load_environment
from src.pipeline.config import load_config
from src.pipeline.report import write_report
from src.pipeline.stages import STAGES, run_all, run_stage
from src.regression.regressor import (
    RegressionConfig,
    build_regression_dataset,
    evaluate_regressor,
    plot_yy_grid,
    save_regressor,
    train_all_regressors,
    write_yy_csv,
)

logger = logging.getLogger("defletter")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE, EXIT_STALE = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_run(args) -> None:
    config = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    stages = args.only or STAGES
    run_all(config, force=args.force, progress=args.progress, stages=stages)


def cmd_stage(args) -> None:
    config = load_config(args.config, {"seed": args.seed, "out_dir": args.out})
    run_stage(config, args.name, force=args.force, progress=args.progress)


def cmd_build_dataset(args) -> None:
    ratios = tuple(args.ratios)
    if args.png_dir:
        ds = ingest_png_directory(args.png_dir, ratios, args.seed)
    else:
        ds = build_dataset(args.fonts, ratios, args.seed, workers=args.workers,
                           progress=args.progress)
    digest = save_dataset(ds, args.out)
    print(f"{len(ds)} images written to {args.out} (sha256 {digest})")


def cmd_train_classifier(args) -> None:
    cfg = ClassifierConfig(seed=args.seed, max_epochs=args.max_epochs, patience=args.patience)
    ds = load_dataset(args.dataset)
    model = train_classifier(ds, cfg, args.progress, default_device())
    model.network.cpu()
    save_classifier(model, args.out, {"dataset": ds.checksum()})
    print(" ".join(f"{k}={v:.4f}" for k, v in model.metrics.items()))


def cmd_attack(args) -> None:
    cfg = AttackConfig(epsilon=args.epsilon, k_max=args.k_max)
    model = load_classifier(args.model)
    ds = load_dataset(args.dataset)
    if model.dataset_checksum != ds.checksum() and not args.force:
        raise StaleArtifact(f"{args.model} was trained on a different dataset than {args.dataset}")
    log = attack_dataset(model, ds, args.split, cfg, progress=args.progress)
    save_attack_log(log, args.out, {"dataset": ds.checksum(),
                                    "classifier": model.parameter_checksum()})
    print(f"{len(log.records)} records ({log.censored_count} censored, "
          f"{log.discarded_count} discarded) written to {args.out}")


def cmd_analyze(args) -> None:
    log = load_attack_log(args.log)
    model = load_classifier(args.model)
    split = log.split or "test"
    ds = load_dataset(args.dataset) if args.dataset else None
    if ds is not None:
        accuracy = per_class_accuracy(model, ds, split)
    elif split in model.per_class:
        accuracy = np.asarray(model.per_class[split], dtype=np.float64)
    else:
        logger.warning("Checkpoint has no %s accuracy; pass --dataset to compute it", split)
        accuracy = None
    written = export_report(pairwise_matrices(log, args.min_count),
                            class_distributions(log, accuracy), args.out)
    if ds is not None:
        written += export_attack_examples(model, ds, log, args.out)
    print(f"{len(written)} files written to {args.out}")


def cmd_train_regressor(args) -> None:
    cfg = RegressionConfig(seed=args.seed, max_epochs=args.max_epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rds = build_regression_dataset(load_attack_log(args.log), load_dataset(args.dataset),
                                   cfg.ratios, cfg.split_seed)
    models = train_all_regressors(rds, cfg, classes=args.classes, progress=args.progress)
    results = {}
    for label, model in models.items():
        save_regressor(model, out / f"{letter_name(label)}.pt")
        results[label] = evaluate_regressor(model, rds)
        write_yy_csv(results[label]["yy_pairs"], out / f"yy_{letter_name(label)}.csv")
        print(f"{letter_name(label)}: r={results[label]['pearson_r']:.3f} "
              f"p={results[label]['p_value']:.3g} n={results[label]['n']}")
    plot_yy_grid(results, out / "yy_grid")


def cmd_train_gan(args) -> None:
    cfg = GanConfig(seed=args.seed, step1_epochs=args.epochs)
    out = Path(args.out)
    generator, discriminator = train_cgan_step1(load_dataset(args.dataset), cfg,
                                                out / "checkpoints", args.progress)
    save_generator(generator, out / "generator.pt")
    save_discriminator(discriminator, out / "discriminator.pt")


def cmd_finetune_gan(args) -> None:
    generator = load_generator(args.generator)
    cfg = replace(generator.config, step2_iterations=args.iterations,
                  step2_adversarial_weight=args.adversarial_weight)
    discriminator = load_discriminator(args.discriminator) if args.discriminator else None
    tuned = finetune_generator_step2(generator, load_classifier(args.classifier), cfg,
                                     discriminator, args.progress)
    save_generator(tuned, args.out)
    metrics = tuned.metrics
    print(f"probe L_C {metrics['probe_loss_c_before']:.4f} -> {metrics['probe_loss_c_after']:.4f}")


def cmd_eval_generated(args) -> None:
    evaluation = evaluate_generated(
        load_generator(args.generator),
        load_classifier(args.classifier),
        AttackConfig(epsilon=args.epsilon, k_max=args.k_max),
        n_per_class=args.n_per_class,
        originals=load_dataset(args.dataset) if args.dataset else None,
        split=args.split,
        baseline=load_generator(args.baseline) if args.baseline else None,
        seed=args.seed,
        progress=args.progress,
    )
    write_evaluation(evaluation, args.out)
    for name, population in evaluation.populations.items():
        print(f"{name}: pooled mean k {population.mean():.2f}")


def cmd_report(args) -> None:
    print(write_report(args.out))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="defletter", description="Defensive letter toolkit")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    parser.add_argument("--no-progress", dest="progress", action="store_false", default=None,
                        help="disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("run", cmd_run, "run the whole experiment from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.add_argument("--only", nargs="+", choices=STAGES, help="run only these stages")

    p = add("stage", cmd_stage, "run one stage of a config file")
    p.add_argument("name", choices=STAGES)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")

    p = add("build-dataset", cmd_build_dataset, "rasterize fonts into a dataset file")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--fonts")
    source.add_argument("--png-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=float, nargs=3, default=DEFAULT_RATIOS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)

    p = add("train-classifier", cmd_train_classifier, "train the letter classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=ClassifierConfig.max_epochs)
    p.add_argument("--patience", type=int, default=ClassifierConfig.patience)

    p = add("attack", cmd_attack, "measure defensibility k of every test image")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--epsilon", type=float, default=AttackConfig.epsilon)
    p.add_argument("--k-max", type=int, default=AttackConfig.k_max)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")

    p = add("analyze", cmd_analyze, "confusion / defensibility matrices and plots")
    p.add_argument("--log", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", help="recomputes accuracy and adds the attack example figures")
    p.add_argument("--min-count", type=int, default=DEFAULT_MIN_COUNT)
    p.add_argument("--out", required=True)

    p = add("train-regressor", cmd_train_regressor, "train the 26 defensibility regressors")
    p.add_argument("--log", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", nargs="+", help="letters to train (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=RegressionConfig.max_epochs)

    p = add("train-gan", cmd_train_gan, "step 1: conditional GAN training")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=GanConfig.step1_epochs)
    p.add_argument("--seed", type=int, default=0)

    p = add("finetune-gan", cmd_finetune_gan, "step 2: fine-tune G against the classifier")
    p.add_argument("--generator", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--discriminator")
    p.add_argument("--iterations", type=int, default=GanConfig.step2_iterations)
    p.add_argument("--adversarial-weight", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = add("eval-generated", cmd_eval_generated, "attack generated and original letters")
    p.add_argument("--generator", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--dataset", help="source of original images")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--baseline", help="step-1 generator for comparison")
    p.add_argument("--n-per-class", type=int, default=1000)
    p.add_argument("--epsilon", type=float, default=AttackConfig.epsilon)
    p.add_argument("--k-max", type=int, default=AttackConfig.k_max)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "assemble report.md from an output directory")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    load_environment()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    configure_logging(args.log_level)

    try:
        args.func(args)
    except ConfigError as exc:
        logger.error("Configuration error: %s", exc)
        return EXIT_USAGE
    except StaleArtifact as exc:
        logger.error("Stale artifact: %s", exc)
        return EXIT_STALE
    except (DefletterError, ValueError, OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
