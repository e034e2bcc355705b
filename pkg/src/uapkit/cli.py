"""Command-line entry point: train target classifiers, train universal
perturbations against them, and run the evaluation studies.

Every run gets its own timestamped directory under the output root and a copy
of the fully resolved config, so results remain attributable to their exact
settings. Exit codes: 0 success, 1 bad usage or config, 2 runtime fault.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import yaml

from . import backbone, evaluation, trainer
from .errors import FileFormatError
from .generator import GeneratorArch, make_seed_pattern

OUTPUT_ROOT_ENV = "UAPKIT_OUTPUT_ROOT"

# Named budget presets: (epsilon, tau). v1 is additive noise only, v2 trades
# noise amplitude for geometric slack, v3 allows both at full strength.
BUDGET_PRESETS = {
    "v1": (0.04, 0.0),
    "v2": (0.03, 0.1),
    "v3": (0.04, 0.1),
}


class ConfigError(Exception):
    """Invalid configuration file or flag values."""


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | cifar10 | image_folder
    path: str | None = None
    resolution: int = 32
    train_size: int = 10000
    heldout_size: int = 2000
    seed: int = 7


@dataclass
class TargetConfig:
    preset: str = "convnet4"
    checkpoint: str | None = None
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class AttackConfig:
    epsilon: float = 0.04
    tau: float = 0.0
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    seed: int = 0
    loss_variant: str = "scaled_ce"
    pattern_policy: str = "resample"
    base_width: int = 64
    num_resnet_blocks: int = 2


@dataclass
class EvalConfig:
    artifact: str | None = None
    artifacts: list[str] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    epsilons: list[float] = field(default_factory=lambda: [0.0, 0.01, 0.02, 0.03, 0.04])
    taus: list[float] = field(default_factory=lambda: [0.0, 0.05, 0.1, 0.15])
    sizes: list[int] = field(default_factory=lambda: [500, 2000, 10000])
    count: int = 4


@dataclass
class OutputConfig:
    root: str = "outputs"
    tag: str = "run"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = {
    "data": DataConfig,
    "target": TargetConfig,
    "attack": AttackConfig,
    "eval": EvalConfig,
    "output": OutputConfig,
}


def _coerce(value, default, key: str):
    """Check a raw YAML value against the type of the section default."""
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def _build_section(cls, raw: dict, section: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in section {section!r}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for name in raw:
        kwargs[name] = _coerce(raw[name], getattr(defaults, name), f"{section}.{name}")
    return dataclasses.replace(defaults, **kwargs)


def load_config(path: str | Path | None) -> RunConfig:
    """Load a YAML config file onto the defaults; unknown keys are an error."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {', '.join(sorted(unknown))}")
    sections = {
        name: _build_section(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()
    }
    return RunConfig(**sections)


def validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.data.kind not in ("synthetic", "cifar10", "image_folder"):
        raise ConfigError(f"data.kind must be synthetic, cifar10, or image_folder, got {cfg.data.kind!r}")
    if cfg.data.kind != "synthetic" and not cfg.data.path:
        raise ConfigError(f"data.path is required for data.kind={cfg.data.kind!r}")
    if cfg.data.train_size < 1 or cfg.data.heldout_size < 1:
        raise ConfigError("data.train_size and data.heldout_size must be positive")
    if cfg.target.preset not in backbone.MODEL_PRESETS:
        raise ConfigError(
            f"target.preset must be one of {backbone.MODEL_PRESETS}, got {cfg.target.preset!r}"
        )
    try:
        _attack_train_config(cfg.attack)
        backbone.ClassifierHyper(
            epochs=cfg.target.epochs,
            batch_size=cfg.target.batch_size,
            learning_rate=cfg.target.learning_rate,
            weight_decay=cfg.target.weight_decay,
            seed=cfg.target.seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def _attack_train_config(a: AttackConfig) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        epochs=a.epochs,
        batch_size=a.batch_size,
        epsilon=a.epsilon,
        tau=a.tau,
        learning_rate=a.learning_rate,
        weight_decay=a.weight_decay,
        seed=a.seed,
        loss_variant=a.loss_variant,
        pattern_policy=a.pattern_policy,
    )


def _generator_arch(cfg: RunConfig, shape: tuple[int, int, int]) -> GeneratorArch:
    c, h, w = shape
    return GeneratorArch(
        in_channels=c,
        height=h,
        width=w,
        base_width=cfg.attack.base_width,
        num_resnet_blocks=cfg.attack.num_resnet_blocks,
    )


def _load_data(cfg: RunConfig) -> tuple[backbone.LabeledDataset, backbone.LabeledDataset]:
    d = cfg.data
    if d.kind == "synthetic":
        return backbone.make_synthetic_dataset(d.train_size, d.heldout_size, d.resolution, d.seed)
    if d.kind == "cifar10":
        train, test = backbone.ingest_cifar10(d.path)
        if d.train_size < len(train):
            train = train.take(d.train_size)
        if d.heldout_size < len(test):
            test = test.take(d.heldout_size)
        return train, test
    full = backbone.ingest_image_folder(d.path, d.resolution)
    if len(full) < d.heldout_size + 1:
        raise ConfigError(
            f"image folder has {len(full)} images, cannot hold out {d.heldout_size}"
        )
    import numpy as np

    order = np.random.default_rng(d.seed).permutation(len(full))
    shuffled = full.subset(order)
    heldout = backbone.LabeledDataset(
        shuffled.images[: d.heldout_size], shuffled.labels[: d.heldout_size],
        "heldout", full.num_classes,
    )
    rest = backbone.LabeledDataset(
        shuffled.images[d.heldout_size :], shuffled.labels[d.heldout_size :],
        "train", full.num_classes,
    )
    if d.train_size < len(rest):
        rest = rest.take(d.train_size)
    return rest, heldout


def _require_checkpoint(cfg: RunConfig) -> backbone.TargetModel:
    if not cfg.target.checkpoint:
        raise ConfigError("target.checkpoint is required (train one with `uapkit train-target`)")
    return backbone.load_checkpoint(cfg.target.checkpoint)


def _require_artifact(path: str | None) -> trainer.UniversalPerturbation:
    if not path:
        raise ConfigError("eval.artifact is required (produce one with `uapkit attack`)")
    return trainer.load_perturbation(path)


def _make_run_dir(cfg: RunConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV) or cfg.output.root)
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S.%f")
    base = root / f"{stamp}-{cfg.output.tag}"
    run_dir = base
    suffix = 1
    while run_dir.exists():
        run_dir = Path(f"{base}-{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


def _write_resolved_config(cfg: RunConfig, command: str, run_dir: Path) -> None:
    resolved = {"command": command, **dataclasses.asdict(cfg)}
    (run_dir / "config.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False))


# ---------------------------------------------------------------------------
# Commands


def cmd_train_target(cfg: RunConfig, run_dir: Path) -> dict:
    train, heldout = _load_data(cfg)
    c = train.shape[0]
    model = backbone.build_small_cnn(cfg.target.preset, cfg.target.seed, in_channels=c)
    hyper = backbone.ClassifierHyper(
        epochs=cfg.target.epochs,
        batch_size=cfg.target.batch_size,
        learning_rate=cfg.target.learning_rate,
        weight_decay=cfg.target.weight_decay,
        seed=cfg.target.seed,
    )
    backbone.train_classifier(model, train, hyper, heldout, verbose=True)
    train_acc = backbone.accuracy(model, train)
    heldout_acc = backbone.accuracy(model, heldout)
    ckpt = run_dir / "classifier.ntc"
    backbone.save_checkpoint(model, ckpt)
    import csv

    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerow(["train_accuracy", f"{train_acc:.6f}"])
        writer.writerow(["heldout_accuracy", f"{heldout_acc:.6f}"])
    print(f"model {model.identifier}: train acc {train_acc:.4f}, heldout acc {heldout_acc:.4f}")
    print(f"checkpoint: {ckpt}")
    return {"checkpoint": ckpt, "heldout_accuracy": heldout_acc}


def cmd_attack(cfg: RunConfig, run_dir: Path) -> dict:
    if cfg.attack.epsilon == 0.0 and cfg.attack.tau == 0.0:
        print("warning: epsilon=0 and tau=0 yield the identity perturbation", file=sys.stderr)
    train_ds, heldout = _load_data(cfg)
    target = _require_checkpoint(cfg)
    tcfg = _attack_train_config(cfg.attack)
    arch = _generator_arch(cfg, train_ds.shape)
    gen, log = trainer.train(train_ds, target, tcfg, arch=arch, heldout=heldout, verbose=True)
    pattern = make_seed_pattern(arch, tcfg.seed)
    pert = trainer.freeze_perturbation(gen, pattern, tcfg.budget, target.identifier)
    artifact = run_dir / "perturbation.guap"
    trainer.save_perturbation(pert, artifact)
    trainer.save_generator(gen, run_dir / "generator.ntc")
    log.to_csv(run_dir / "trainlog.csv")
    print(f"final heldout asr: {log.final_heldout_asr:.4f}")
    print(f"artifact: {artifact}")
    return {"artifact": artifact, "heldout_asr": log.final_heldout_asr}


def cmd_eval(cfg: RunConfig, run_dir: Path) -> dict:
    _, heldout = _load_data(cfg)
    target = _require_checkpoint(cfg)
    pert = _require_artifact(cfg.eval.artifact)
    report = evaluation.evaluate(pert, heldout, target)
    evaluation.write_eval_csv(report, run_dir / "eval.csv")
    for name, value in report.rows():
        print(f"{name}: {value:.6f}")
    return {"report": report}


def cmd_transfer(cfg: RunConfig, run_dir: Path) -> dict:
    if not cfg.eval.artifacts or not cfg.eval.checkpoints:
        raise ConfigError("transfer needs eval.artifacts and eval.checkpoints (one per model)")
    if len(cfg.eval.artifacts) != len(cfg.eval.checkpoints):
        raise ConfigError("eval.artifacts and eval.checkpoints must pair up one to one")
    _, heldout = _load_data(cfg)
    perts = [_require_artifact(p) for p in cfg.eval.artifacts]
    models = [backbone.load_checkpoint(p) for p in cfg.eval.checkpoints]
    matrix = evaluation.transfer_matrix(perts, models, heldout)
    evaluation.write_transfer_csv(matrix, run_dir / "transfer.csv")
    evaluation.save_transfer_heatmap(matrix, run_dir / "transfer.png")
    for line in (run_dir / "transfer.csv").read_text().splitlines():
        print(line)
    for err in matrix.errors:
        print(f"warning: {err}", file=sys.stderr)
    return {"matrix": matrix}


def cmd_ablate(cfg: RunConfig, run_dir: Path) -> dict:
    train_ds, heldout = _load_data(cfg)
    target = _require_checkpoint(cfg)
    tcfg = _attack_train_config(cfg.attack)
    arch = _generator_arch(cfg, train_ds.shape)
    grid = evaluation.ablation_grid(
        train_ds, target, tcfg, heldout, cfg.eval.epsilons, cfg.eval.taus, arch=arch, verbose=True
    )
    evaluation.write_grid_csv(grid, run_dir / "ablation.csv")
    evaluation.save_grid_heatmap(grid, run_dir / "ablation.png")
    for err in grid.errors:
        print(f"warning: {err}", file=sys.stderr)
    return {"grid": grid}


def cmd_sample_study(cfg: RunConfig, run_dir: Path) -> dict:
    train_ds, heldout = _load_data(cfg)
    target = _require_checkpoint(cfg)
    tcfg = _attack_train_config(cfg.attack)
    arch = _generator_arch(cfg, train_ds.shape)
    points = evaluation.sample_size_study(
        train_ds, target, tcfg, heldout, cfg.eval.sizes, arch=arch, verbose=True
    )
    evaluation.write_curve_csv(points, run_dir / "samplestudy.csv")
    evaluation.save_curve_png(points, run_dir / "samplestudy.png")
    return {"points": points}


def cmd_export_images(cfg: RunConfig, run_dir: Path) -> dict:
    _, heldout = _load_data(cfg)
    pert = _require_artifact(cfg.eval.artifact)
    written = evaluation.export_image_triplets(pert, heldout, run_dir / "images", cfg.eval.count)
    print(f"wrote {len(written)} images to {run_dir / 'images'}")
    return {"written": written}


_COMMANDS = {
    "train-target": cmd_train_target,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "ablate": cmd_ablate,
    "sample-study": cmd_sample_study,
    "export-images": cmd_export_images,
}


# ---------------------------------------------------------------------------
# Argument parsing


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors; this tool reserves 2 for runtime
    # faults, so remap bad usage to exit code 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file (defaults apply if omitted)")
    p.add_argument("--output-root", help="output root directory (default: outputs)")
    p.add_argument("--tag", help="run directory name suffix")
    p.add_argument("--data-kind", choices=["synthetic", "cifar10", "image_folder"])
    p.add_argument("--data-path", help="dataset directory for cifar10/image_folder")
    p.add_argument("--train-size", type=int)
    p.add_argument("--heldout-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="uapkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-target", parents=[], help="train and checkpoint a target classifier")
    _add_common(p)
    p.add_argument("--preset", choices=list(backbone.MODEL_PRESETS), help="classifier preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("attack", help="train a universal perturbation against a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="target classifier checkpoint")
    p.add_argument("--preset", choices=sorted(BUDGET_PRESETS), help="budget preset")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-variant", choices=list(trainer.LOSS_VARIANTS))
    p.add_argument("--base-width", type=int)

    p = sub.add_parser("eval", help="evaluate a perturbation artifact on heldout data")
    _add_common(p)
    p.add_argument("--checkpoint", help="target classifier checkpoint")
    p.add_argument("--artifact", help="perturbation artifact")

    p = sub.add_parser("transfer", help="cross-model transfer matrix")
    _add_common(p)
    p.add_argument("--artifacts", nargs="+", help="perturbation artifacts, one per model")
    p.add_argument("--checkpoints", nargs="+", help="classifier checkpoints, one per model")

    p = sub.add_parser("ablate", help="budget ablation grid")
    _add_common(p)
    p.add_argument("--checkpoint", help="target classifier checkpoint")
    p.add_argument("--epsilons", nargs="+", type=float)
    p.add_argument("--taus", nargs="+", type=float)
    p.add_argument("--epochs", type=int, help="attack epochs per cell")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sample-study", help="success rate vs training set size")
    _add_common(p)
    p.add_argument("--checkpoint", help="target classifier checkpoint")
    p.add_argument("--sizes", nargs="+", type=int)
    p.add_argument("--epochs", type=int, help="attack epochs per run")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("export-images", help="write clean/warped/final PNG triplets")
    _add_common(p)
    p.add_argument("--artifact", help="perturbation artifact")
    p.add_argument("--count", type=int)

    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    a = vars(args)

    def maybe(section: str, name: str, key: str | None = None):
        value = a.get(key or name)
        if value is not None:
            setattr(getattr(cfg, section), name, value)

    maybe("output", "root", "output_root")
    maybe("output", "tag")
    maybe("data", "kind", "data_kind")
    maybe("data", "path", "data_path")
    maybe("data", "train_size")
    maybe("data", "heldout_size")
    command = args.command
    if command == "train-target":
        maybe("target", "preset")
        maybe("target", "epochs")
        maybe("target", "seed")
    elif command == "attack":
        maybe("target", "checkpoint")
        if a.get("preset"):
            cfg.attack.epsilon, cfg.attack.tau = BUDGET_PRESETS[a["preset"]]
        maybe("attack", "epsilon")
        maybe("attack", "tau")
        maybe("attack", "epochs")
        maybe("attack", "seed")
        maybe("attack", "loss_variant")
        maybe("attack", "base_width")
    elif command in ("eval", "export-images"):
        maybe("target", "checkpoint")
        maybe("eval", "artifact")
        maybe("eval", "count")
    elif command == "transfer":
        maybe("eval", "artifacts")
        maybe("eval", "checkpoints")
    elif command in ("ablate", "sample-study"):
        maybe("target", "checkpoint")
        maybe("eval", "epsilons")
        maybe("eval", "taus")
        maybe("eval", "sizes")
        maybe("attack", "epochs")
        maybe("attack", "seed")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # raised by -h (code 0) or by _Parser.error (code 1)
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        validate_config(cfg)
        run_dir = _make_run_dir(cfg)
        _write_resolved_config(cfg, args.command, run_dir)
        print(f"run directory: {run_dir}")
        _COMMANDS[args.command](cfg, run_dir)
        return 0
    except (ConfigError, FileNotFoundError) as exc:
        print(f"uapkit: error: {exc}", file=sys.stderr)
        return 1
    except (FileFormatError, ValueError, RuntimeError, OSError) as exc:
        print(f"uapkit: fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
