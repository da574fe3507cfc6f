"""Command-line entry point.

Commands: ``dart train|eval|ablate|gradcheck --config <path> [--key value]``.
Configuration is a flat key=value file; command-line flags override file
values. All randomness flows from the single ``seed`` key through derived
streams (init, sampling, data generation, probe), so runs are bitwise
reproducible.

Exit codes: 0 success, 1 configuration error, 2 data/IO error,
3 numeric failure.
"""

import argparse
import math
import os
import sys
from dataclasses import dataclass, field, replace

from dart import data as dd
from dart import evaluation as ev
from dart import gradcheck as gc
from dart import model as dm
from dart import training as tr
from dart.errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    NumericError,
)
from dart.rng import STREAM_DATA, STREAM_INIT, Prng, derive_seed

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_LOG_LEVELS = ("quiet", "info", "debug")


def _log_level() -> str:
    level = os.environ.get("DART_LOG", "info").lower()
    return level if level in _LOG_LEVELS else "info"


def log(level: str, message: str) -> None:
    if _LOG_LEVELS.index(level) <= _LOG_LEVELS.index(_log_level()):
        print(message, file=sys.stderr)


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class TaskConfig:
    kind: str = "blobs"
    classes: int = 3
    per_class: int = 100
    dim: int = 2
    spread: float = 1.1
    rotation: float = math.pi / 5
    translation: tuple[float, ...] = (1.5, -1.0)
    scale: float = 1.0
    label_noise: float = 0.0
    normalization: str = "source"
    images: str = ""
    labels: str = ""
    subsample: int = 0

    def validate(self) -> None:
        if self.kind not in ("blobs", "idx"):
            raise ConfigError(f"task.kind must be blobs or idx, got {self.kind!r}")
        if self.kind == "blobs":
            if self.classes < 2:
                raise ConfigError("task.classes must be >= 2")
            if self.per_class < 1:
                raise ConfigError("task.per_class must be >= 1")
            if self.dim < 2:
                raise ConfigError("task.dim must be >= 2")
            if self.spread < 0:
                raise ConfigError("task.spread must be >= 0")
        else:
            if not self.images or not self.labels:
                raise ConfigError("task.kind=idx requires task.images and task.labels")
        if self.scale <= 0:
            raise ConfigError("task.scale must be > 0")
        if not 0.0 <= self.label_noise < 1.0:
            raise ConfigError("task.label_noise must lie in [0, 1)")
        if self.normalization not in ("source", "none"):
            raise ConfigError(
                f"task.normalization must be source or none, got {self.normalization!r}"
            )
        if self.subsample < 0:
            raise ConfigError("task.subsample must be >= 0")


@dataclass
class RunConfig:
    command: str = ""
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    out_dir: str = "runs"
    overwrite: bool = False
    checkpoint: str = ""
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {raw!r}")


def _parse_hidden(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if raw in ("", "-"):
        return ()
    try:
        return tuple(int(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"hidden must be a comma list of integers: {raw!r}") from exc


def _parse_floats(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    try:
        return tuple(float(part) for part in raw.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers: {raw!r}") from exc


def _parse_ints(raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in raw.strip().split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers: {raw!r}") from exc


def _parse_optional_int(raw: str) -> int | None:
    raw = raw.strip()
    if raw in ("", "-", "none"):
        return None
    return int(raw)


# key -> (section, attribute, converter); sections address RunConfig parts
_KEYS = {
    "alpha": ("train", "alpha", float),
    "beta": ("train", "beta", float),
    "eta0": ("train", "eta0", float),
    "gamma_lr": ("train", "gamma_lr", float),
    "lr_decay_interval": ("train", "lr_decay_interval", int),
    "lambda0": ("train", "lambda0", float),
    "gamma_lambda": ("train", "gamma_lambda", float),
    "steps": ("train", "total_steps", int),
    "batch": ("train", "batch_size", int),
    "seed": ("train", "seed", int),
    "hidden": ("train", "hidden", _parse_hidden),
    "feature_dim": ("train", "feature_dim", int),
    "residual_hidden": ("train", "residual_hidden", _parse_optional_int),
    "domain_hidden": ("train", "domain_hidden", int),
    "stop_pseudo_label_grad": ("train", "stop_pseudo_label_grad", _parse_bool),
    "harden_pseudo_labels": ("train", "harden_pseudo_labels", _parse_bool),
    "momentum": ("train", "momentum", float),
    "variant": ("train", "variant", str),
    "log_every": ("train", "log_every", int),
    "task.kind": ("task", "kind", str),
    "task.classes": ("task", "classes", int),
    "task.per_class": ("task", "per_class", int),
    "task.dim": ("task", "dim", int),
    "task.spread": ("task", "spread", float),
    "task.rotation": ("task", "rotation", float),
    "task.translation": ("task", "translation", _parse_floats),
    "task.scale": ("task", "scale", float),
    "task.label_noise": ("task", "label_noise", float),
    "task.normalization": ("task", "normalization", str),
    "task.images": ("task", "images", str),
    "task.labels": ("task", "labels", str),
    "task.subsample": ("task", "subsample", int),
    "out": ("run", "out_dir", str),
    "overwrite": ("run", "overwrite", _parse_bool),
    "checkpoint": ("run", "checkpoint", str),
    "seeds": ("run", "seeds", _parse_ints),
}


def _assign(cfg: RunConfig, key: str, raw: str) -> None:
    if key not in _KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    section, attr, convert = _KEYS[key]
    try:
        value = convert(raw.strip())
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    target = {"train": cfg.train, "task": cfg.task, "run": cfg}[section]
    setattr(target, attr, value)


def _read_config_file(cfg: RunConfig, path: str) -> None:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise DataFormatError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{path}:{lineno}: expected key=value, got {stripped!r}"
            )
        key, raw = stripped.split("=", 1)
        _assign(cfg, key.strip(), raw)


def build_arg_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dart",
        description="Adversarial domain adaptation with joint feature-label "
                    "alignment and a residual source classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "ablate", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", default="", help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        p.add_argument("--alpha", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--eta0", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--variant")
        p.add_argument("--seeds", help="comma list for ablate")
        p.add_argument("--checkpoint", help="checkpoint path for eval")
        p.add_argument("--out", help="output directory")
        p.add_argument("--overwrite", action="store_true", default=None)
    return parser


def parse_config(argv: list[str]) -> RunConfig:
    args = build_arg_parser().parse_args(argv)
    cfg = RunConfig(command=args.command)
    if args.config:
        _read_config_file(cfg, args.config)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(cfg, key.strip(), raw)
    # dedicated flags win over both file and --set values
    for key, flag in (
        ("alpha", args.alpha), ("beta", args.beta), ("eta0", args.eta0),
        ("steps", args.steps), ("batch", args.batch), ("seed", args.seed),
        ("variant", args.variant), ("seeds", args.seeds),
        ("checkpoint", args.checkpoint), ("out", args.out),
    ):
        if flag is not None:
            _assign(cfg, key, str(flag))
    if args.overwrite is not None:
        cfg.overwrite = True
    cfg.task.validate()
    cfg.train.validate()
    return cfg


# ---------------------------------------------------------------------------
# Task construction


def build_task(cfg: RunConfig) -> ev.Task:
    """Builds the dataset pair and patches the width keys the model needs."""
    task_cfg = cfg.task
    seed = cfg.train.seed
    if task_cfg.kind == "blobs":
        translation = list(task_cfg.translation)
        if len(translation) < task_cfg.dim:
            translation += [0.0] * (task_cfg.dim - len(translation))
        task = ev.make_blobs_task(
            seed=seed,
            classes=task_cfg.classes,
            per_class=task_cfg.per_class,
            dim=task_cfg.dim,
            spread=task_cfg.spread,
            rotation=task_cfg.rotation,
            translation=tuple(translation),
            scale=task_cfg.scale,
            label_noise=task_cfg.label_noise,
            normalization=task_cfg.normalization,
        )
        cfg.train.input_dim = task_cfg.dim
        cfg.train.class_count = task_cfg.classes
        return task

    source = dd.load_idx(task_cfg.images, task_cfg.labels)
    rng = Prng(derive_seed(seed, STREAM_DATA))
    if task_cfg.subsample:
        source = dd.subsample(source, task_cfg.subsample, rng)
    translation = list(task_cfg.translation)
    translation += [0.0] * (source.dim - len(translation))
    spec = dd.ShiftSpec(
        task_cfg.rotation, tuple(translation), task_cfg.scale,
        task_cfg.label_noise,
    )
    target = dd.apply_shift(source, spec, rng)
    src, tgt = dd.normalize_pair(source, target, mode=task_cfg.normalization)
    cfg.train.input_dim = source.dim
    cfg.train.class_count = source.class_count
    return ev.Task(source=src, target=tgt, name=f"idx-s{seed}")


def _prepare_out_dir(cfg: RunConfig, filenames: list[str]) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    if not cfg.overwrite:
        for name in filenames:
            path = os.path.join(cfg.out_dir, name)
            if os.path.exists(path):
                raise ConfigError(
                    f"refusing to overwrite {path}; pass --overwrite to allow"
                )
    return cfg.out_dir


# ---------------------------------------------------------------------------
# Commands


def cmd_train(cfg: RunConfig) -> int:
    task = build_task(cfg)
    out = _prepare_out_dir(cfg, ["metrics.csv", "model.ckpt"])
    run_cfg = cfg.train.effective()
    model = tr.build_model(run_cfg, Prng(derive_seed(run_cfg.seed, STREAM_INIT)))
    metrics_path = os.path.join(out, "metrics.csv")
    report = tr.train_loop(model, task.source, task.target, run_cfg,
                           metrics_path=metrics_path)
    ckpt_path = os.path.join(out, "model.ckpt")
    dm.save_checkpoint(report.model, ckpt_path)
    if report.history:
        last = report.history[-1]
        log("info", f"step {last.step}: loss_total={last.loss_total:.6f} "
                    f"loss_y={last.loss_y:.6f}")
    log("info", f"wrote {metrics_path} and {ckpt_path}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if not cfg.checkpoint:
        raise ConfigError("eval needs a checkpoint (checkpoint=... or --checkpoint)")
    model = dm.load_checkpoint(cfg.checkpoint)
    task = build_task(cfg)
    if model.input_dim != cfg.train.input_dim:
        raise ConfigError(
            f"checkpoint input width {model.input_dim} does not match "
            f"task width {cfg.train.input_dim}"
        )
    report = ev.evaluate_model(model, task, cfg.train.seed, cfg.train.variant)
    out = _prepare_out_dir(cfg, ["report.txt"])
    report_path = os.path.join(out, "report.txt")
    with open(report_path, "w", encoding="ascii") as fh:
        fh.write(ev.serialize_report(report))
    ev.append_results_csv(os.path.join(out, "results.csv"), [report])
    log("info", f"target accuracy {report.target_accuracy:.4f}, "
                f"a_distance {report.a_distance:+.4f}")
    print(ev.serialize_report(report), end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    out = _prepare_out_dir(cfg, ["results.csv", "reports.txt"])
    reports = []
    for seed in cfg.seeds:
        run = RunConfig(command="ablate", train=replace(cfg.train, seed=seed),
                        task=cfg.task, out_dir=cfg.out_dir,
                        overwrite=cfg.overwrite)
        task = build_task(run)
        for variant in tr.VARIANTS:
            log("debug", f"ablate: variant={variant} seed={seed}")
            reports.append(ev.run_ablation(variant, task, run.train))
    results_path = os.path.join(out, "results.csv")
    if cfg.overwrite and os.path.exists(results_path):
        os.remove(results_path)
    ev.append_results_csv(results_path, reports)
    with open(os.path.join(out, "reports.txt"), "w", encoding="ascii") as fh:
        for r in reports:
            fh.write(ev.serialize_report(r) + "\n")
    log("info", f"wrote {results_path} ({len(reports)} rows)")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    report = gc.run_gradcheck(seed=cfg.train.seed)
    print(f"max relative error {report.max_rel_err:.3e} over "
          f"{report.checked} parameters (worst: {report.worst_param})")
    if not report.passed:
        raise NumericError(
            f"gradient check failed: {report.max_rel_err:.3e} >= "
            f"{report.tolerance:.0e} at {report.worst_param}"
        )
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        return _COMMANDS[cfg.command](cfg)
    except ConfigError as exc:
        log("quiet", f"configuration error: {exc}")
        return EXIT_CONFIG
    except ContractError as exc:
        log("quiet", f"invalid request: {exc}")
        return EXIT_CONFIG
    except (DataFormatError, OSError) as exc:
        log("quiet", f"data error: {exc}")
        return EXIT_DATA
    except NumericError as exc:
        log("quiet", f"numeric failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
