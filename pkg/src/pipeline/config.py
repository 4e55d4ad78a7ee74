"""
Experiment configuration: one TOML file drives every stage.

    seed = 0
    out_dir = "runs/desk"

    [dataset]        font_dir or png_dir, ratios, workers
    [classifier]     ClassifierConfig fields
    [attack]         AttackConfig fields, split
    [analysis]       min_count
    [regression]     RegressionConfig fields
    [gan]            GanConfig fields
    [evaluation]     n_per_class, split, baseline

A section that sets no `seed` inherits the top-level one.
"""

import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from src.analysis.matrices import DEFAULT_MIN_COUNT
from src.attack.ifgsm import AttackConfig
from src.classifier.training import ClassifierConfig
from src.errors import ConfigError
from src.generator.cgan import GanConfig
from src.glyphs.dataset import DEFAULT_RATIOS, SPLITS, validate_ratios
from src.regression.regressor import RegressionConfig

SEEDED_SECTIONS = ("dataset", "classifier", "regression", "gan", "evaluation")


@dataclass(frozen=True)
class DatasetConfig:
    font_dir: str | None = None
    png_dir: str | None = None
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if (self.font_dir is None) == (self.png_dir is None):
            raise ConfigError("[dataset] needs exactly one of font_dir or png_dir")
        try:
            object.__setattr__(self, "ratios", validate_ratios(self.ratios))
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


@dataclass(frozen=True)
class AnalysisConfig:
    min_count: int = DEFAULT_MIN_COUNT

    def __post_init__(self):
        if self.min_count < 0:
            raise ConfigError("min_count must be >= 0")


@dataclass(frozen=True)
class EvaluationConfig:
    n_per_class: int = 1000
    split: str = "test"
    baseline: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    out_dir: Path = Path("runs/default")
    seed: int = 0
    attack_split: str = "test"
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    base_dir: Path | None = field(default=None, compare=False)

    def echo(self) -> dict:
        """
        Plain, JSON-ready copy used in provenance headers.

        out_dir is left out; font and PNG directories are relative to the
        config file.
        """
        data = asdict(self)
        del data["out_dir"], data["base_dir"]
        for key in ("font_dir", "png_dir"):
            if data["dataset"][key] is not None:
                data["dataset"][key] = self._portable(data["dataset"][key])
        return data

    def _portable(self, path: str) -> str:
        p = Path(path)
        if not p.is_absolute():
            return p.as_posix()
        if self.base_dir is None:
            return p.name
        return Path(os.path.relpath(p, Path(self.base_dir).resolve())).as_posix()


def _section(cls, values: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in [{name}]: {', '.join(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"Bad [{name}] section: {exc}") from exc


def config_from_dict(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in data.items()}
    seed = int(data.get("seed", 0))
    for name in SEEDED_SECTIONS:
        data.setdefault(name, {}).setdefault("seed", seed)
    attack = dict(data.get("attack", {}))
    attack_split = attack.pop("split", "test")
    if attack_split not in SPLITS:
        raise ConfigError(f"[attack] split must be one of {SPLITS}")

    dataset = data.get("dataset", {})
    if base_dir is not None:
        for key in ("font_dir", "png_dir"):
            if dataset.get(key) is not None:
                dataset[key] = str((base_dir / dataset[key]).resolve())

    out_dir = Path(data.get("out_dir", "runs/default"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    known = {"seed", "out_dir", "dataset", "classifier", "attack", "analysis",
             "regression", "gan", "evaluation"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown top-level key(s): {', '.join(unknown)}")

    return ExperimentConfig(
        dataset=_section(DatasetConfig, dataset, "dataset"),
        out_dir=out_dir,
        seed=seed,
        attack_split=attack_split,
        classifier=_section(ClassifierConfig, data.get("classifier", {}), "classifier"),
        attack=_section(AttackConfig, attack, "attack"),
        analysis=_section(AnalysisConfig, data.get("analysis", {}), "analysis"),
        regression=_section(RegressionConfig, data.get("regression", {}), "regression"),
        gan=_section(GanConfig, data.get("gan", {}), "gan"),
        evaluation=_section(EvaluationConfig, data.get("evaluation", {}), "evaluation"),
        base_dir=base_dir,
    )


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """
    Read a TOML experiment file. `overrides` holds CLI values ({"seed": 3,
    "out_dir": "..."}); a seed override reseeds every section.
    """
    path = Path(path)
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "seed":
            data["seed"] = value
            for name in SEEDED_SECTIONS:
                data.setdefault(name, {})["seed"] = value
        elif key == "out_dir":
            data["out_dir"] = str(Path(value).resolve())
        else:
            raise ConfigError(f"Unknown override {key!r}")
    return config_from_dict(data, base_dir=path.parent)
