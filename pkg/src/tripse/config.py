"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Unknown keys are rejected. Every
key has a default, so an empty file is a valid configuration.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

from .backbone import BackboneConfig, ConfigError
from .train import TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    # data
    dataset: str = "synthetic"
    fer_csv: str = ""
    val_split: str = "PublicTest"
    synth_classes: int = 7
    synth_per_class: int = 200
    synth_eval_per_class: int = 20
    synth_noise: float = 0.1
    image_size: int = 32
    max_samples_per_split: int = 0
    # model
    widths: str = "16,32,64,128"
    depths: str = "1,1,1,1"
    downsample: str = "0,1,1,1"
    stem_stride: int = 1
    attention: str = "none"
    se_ratio: int = 0
    kernel_size: int = 7
    # training
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    min_lr: float = 1e-6
    scheduler: str = "plateau"
    patience: int = 3
    step_period: int = 10
    lr_factor: float = 0.1
    plateau_metric: str = "val_acc"
    augment: bool = True
    hflip_prob: float = 0.5
    rotation_min: float = -30.0
    rotation_max: float = 30.0
    drop_last: bool = False
    checkpoint_every: int = 10
    record_time: bool = False
    stop_at_train_acc: float = 0.0


DOCS = {
    "seed": "master seed for initialisation, shuffling and augmentation",
    "output_dir": "directory receiving metrics, checkpoints and the resolved config",
    "dataset": "synthetic | fer2013",
    "fer_csv": "path to fer2013.csv (dataset = fer2013)",
    "val_split": "split used for validation: Training | PublicTest | PrivateTest",
    "synth_classes": "number of synthetic classes",
    "synth_per_class": "synthetic training samples per class",
    "synth_eval_per_class": "synthetic PublicTest/PrivateTest samples per class",
    "synth_noise": "uniform noise amplitude of synthetic images",
    "image_size": "square network input size (images are resized to it)",
    "max_samples_per_split": "keep only the first N samples of each split (0 = all)",
    "widths": "comma-separated channel widths of the four stages",
    "depths": "comma-separated residual blocks per stage",
    "downsample": "comma-separated 0/1 flags: stage starts with a stride-2 block",
    "stem_stride": "stride of the stem convolution",
    "attention": "none | se | ta | tripse1 | tripse2 | tripse3 | tripse4",
    "se_ratio": "SE reduction ratio; 0 picks the variant default (1 for tripse4, else 16)",
    "kernel_size": "odd gate-convolution kernel size of triplet branches",
    "epochs": "number of training epochs",
    "batch_size": "training batch size",
    "lr": "initial learning rate",
    "min_lr": "learning-rate floor",
    "scheduler": "plateau | step",
    "patience": "plateau: non-improving epochs before a drop",
    "step_period": "step: epochs between drops",
    "lr_factor": "multiplicative learning-rate drop",
    "plateau_metric": "val_acc | train_loss",
    "augment": "random horizontal flip and rotation on the training split",
    "hflip_prob": "horizontal flip probability",
    "rotation_min": "minimum rotation in degrees",
    "rotation_max": "maximum rotation in degrees",
    "drop_last": "drop the final incomplete training batch",
    "checkpoint_every": "write epoch_NNN.tsew every this many epochs (0 = never); last.tsew is always written",
    "record_time": "write wall-clock seconds into the metrics CSV (breaks byte-identical reruns)",
    "stop_at_train_acc": "stop once training accuracy reaches this value (0 = off)",
}

_FIELDS = {f.name: f for f in fields(RunConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        key = normalize_key(key)
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def resolve(file_text: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file, then string overrides."""
    values = parse_config_text(file_text) if file_text else {}
    for key, raw in (overrides or {}).items():
        key = normalize_key(key)
        if key not in _FIELDS:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _convert(key, str(raw))
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def dump(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"# {DOCS[f.name]}")
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def _ints(key: str, raw: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {raw!r}") from None


def validate(cfg: RunConfig):
    if cfg.dataset not in ("synthetic", "fer2013"):
        raise ConfigError(f"dataset must be synthetic or fer2013, got {cfg.dataset!r}")
    if cfg.scheduler not in ("plateau", "step"):
        raise ConfigError(f"scheduler must be plateau or step, got {cfg.scheduler!r}")
    if cfg.plateau_metric not in ("val_acc", "train_loss"):
        raise ConfigError("plateau_metric must be val_acc or train_loss")
    if cfg.val_split not in ("Training", "PublicTest", "PrivateTest"):
        raise ConfigError(f"unknown val_split {cfg.val_split!r}")
    if cfg.epochs < 0 or cfg.batch_size < 1 or cfg.se_ratio < 0 or cfg.max_samples_per_split < 0:
        raise ConfigError("epochs >= 0, batch_size >= 1, se_ratio >= 0 and max_samples_per_split >= 0 are required")
    if cfg.rotation_min > cfg.rotation_max:
        raise ConfigError("rotation_min must not exceed rotation_max")
    if cfg.kernel_size % 2 == 0:
        raise ConfigError("kernel_size must be odd")
    backbone_config(cfg)


def num_classes(cfg: RunConfig) -> int:
    return 7 if cfg.dataset == "fer2013" else cfg.synth_classes


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    return BackboneConfig(
        in_channels=1,
        num_classes=num_classes(cfg),
        widths=_ints("widths", cfg.widths),
        depths=_ints("depths", cfg.depths),
        downsample=tuple(bool(v) for v in _ints("downsample", cfg.downsample)),
        stem_stride=cfg.stem_stride,
        attention=cfg.attention,
        reduction=cfg.se_ratio or None,
        kernel_size=cfg.kernel_size,
        input_size=(cfg.image_size, cfg.image_size),
        seed=cfg.seed,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        min_lr=cfg.min_lr,
        scheduler=cfg.scheduler,
        patience=cfg.patience,
        step_period=cfg.step_period,
        lr_factor=cfg.lr_factor,
        plateau_metric=cfg.plateau_metric,
        seed=cfg.seed,
        augment=cfg.augment,
        hflip_prob=cfg.hflip_prob,
        rotation=(cfg.rotation_min, cfg.rotation_max),
        drop_last=cfg.drop_last,
        record_time=cfg.record_time,
        stop_at_train_acc=cfg.stop_at_train_acc or None,
    )
