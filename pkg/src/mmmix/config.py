"""Run configuration and its flat ``key = value`` file format.

Keys are dot-namespaced (``train.batch_size``, ``mix.beta``, ``loss.terms``);
unknown or repeated keys are errors. ``#`` starts a comment.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .geometry import NUM_SHAPES

MIX_MODES = ("none", "fm", "im", "fm_im")
STAGE_MODES = ("one", "two")
LOSS_TERMS = ("text", "image", "point")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    num_classes: int = 8
    points_per_cloud: int = 256
    fps_points: int = 256
    train_size: int = 800
    eval_size: int = 200
    jitter: float = 0.01
    sigma_image: float = 0.1
    dim: int = 32
    hidden: int = 64
    batch_size: int = 200
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    lr0: float = 1e-3
    lr_gamma: float = 0.955
    weight_decay: float = 1e-4
    stage_mode: str = "two"
    beta: float = 1.0
    mix_mode: str = "fm_im"
    renormalize_mixed: bool = True
    loss_terms: tuple[str, ...] = LOSS_TERMS
    tau_init: float = 0.07
    tau_min: float = 0.01
    tau_max: float = 100.0
    literal_eq4: bool = False
    probe_epochs: int = 100
    probe_lr: float = 1e-2
    probe_batch_size: int = 64

    def __post_init__(self):
        validate(self)

    @property
    def uses_fm(self) -> bool:
        return self.mix_mode in ("fm", "fm_im")

    @property
    def uses_im(self) -> bool:
        return self.mix_mode in ("im", "fm_im")

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


KEYS = {
    "seed": "seed",
    "data.num_classes": "num_classes",
    "data.points_per_cloud": "points_per_cloud",
    "data.fps_points": "fps_points",
    "data.train_size": "train_size",
    "data.eval_size": "eval_size",
    "data.jitter": "jitter",
    "frozen.sigma_image": "sigma_image",
    "model.dim": "dim",
    "model.hidden": "hidden",
    "train.batch_size": "batch_size",
    "train.epochs_stage1": "epochs_stage1",
    "train.epochs_stage2": "epochs_stage2",
    "train.lr0": "lr0",
    "train.lr_gamma": "lr_gamma",
    "train.weight_decay": "weight_decay",
    "train.stage_mode": "stage_mode",
    "mix.beta": "beta",
    "mix.mode": "mix_mode",
    "mix.renormalize": "renormalize_mixed",
    "loss.terms": "loss_terms",
    "loss.tau_init": "tau_init",
    "loss.tau_min": "tau_min",
    "loss.tau_max": "tau_max",
    "loss.literal_eq4": "literal_eq4",
    "probe.epochs": "probe_epochs",
    "probe.lr": "probe_lr",
    "probe.batch_size": "probe_batch_size",
}
_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def validate(cfg: TrainConfig) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(2 <= cfg.num_classes <= NUM_SHAPES, f"data.num_classes must be in 2..{NUM_SHAPES}")
    need(cfg.points_per_cloud >= 8, "data.points_per_cloud must be >= 8")
    need(1 <= cfg.fps_points <= cfg.points_per_cloud, "data.fps_points must be in 1..data.points_per_cloud")
    need(cfg.train_size >= 0 and cfg.eval_size >= 0, "dataset sizes must be non-negative")
    need(cfg.jitter >= 0 and cfg.sigma_image >= 0, "noise levels must be non-negative")
    need(cfg.dim >= 8 and cfg.hidden >= 4, "model.dim must be >= 8 and model.hidden >= 4")
    need(cfg.batch_size >= 2, "train.batch_size must be >= 2")
    need(cfg.epochs_stage1 >= 0 and cfg.epochs_stage2 >= 0, "epoch counts must be non-negative")
    need(cfg.lr0 > 0, "train.lr0 must be positive")
    need(0 < cfg.lr_gamma <= 1, "train.lr_gamma must lie in (0, 1]")
    need(cfg.weight_decay >= 0, "train.weight_decay must be non-negative")
    need(cfg.stage_mode in STAGE_MODES, f"train.stage_mode must be one of {STAGE_MODES}")
    need(cfg.beta > 0, "mix.beta must be positive")
    need(cfg.mix_mode in MIX_MODES, f"mix.mode must be one of {MIX_MODES}")
    need(len(cfg.loss_terms) > 0, "loss.terms must not be empty")
    need(set(cfg.loss_terms) <= set(LOSS_TERMS), f"loss.terms entries must be among {LOSS_TERMS}")
    need(len(set(cfg.loss_terms)) == len(cfg.loss_terms), "loss.terms has duplicates")
    need(0 < cfg.tau_min <= cfg.tau_init <= cfg.tau_max, "need 0 < loss.tau_min <= loss.tau_init <= loss.tau_max")
    need(cfg.probe_epochs >= 0 and cfg.probe_lr > 0 and cfg.probe_batch_size >= 1, "invalid probe settings")


def _parse_value(key: str, field: str, raw: str):
    kind = _FIELD_TYPES[field]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("tuple"):
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        return raw
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {key} (expected {kind})") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    values = {}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: key {key!r} given twice")
        seen.add(key)
        values[KEYS[key]] = _parse_value(key, KEYS[key], raw)
    return replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def format_config(cfg: TrainConfig) -> str:
    vals = asdict(cfg)
    lines = []
    for key, name in KEYS.items():
        v = vals[name]
        if isinstance(v, tuple):
            v = ",".join(v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
