"""Run configuration stored as INI text.

Sections and keys (every key optional; missing keys take the defaults below)::

    [run]    task, seed, out_dir
    [model]  every ModelConfig field (bins and max_points are the codec M and N)
    [codec]  strategy, shuffle_mode, shuffle_pct
    [data]   source ("synthetic" or an annotation file path), train_samples,
             val_samples, scene_size, min_shapes, max_shapes
    [optim]  epochs, batch_size, lr, decay_epochs, decay_factor, ema_decay, eval_every,
             hard_weight (draw weight of samples whose referent shares its colour)

Tuples are written comma-separated.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .codec import TASKS, ShuffleMode
from .data import SceneConfig
from .model import ModelConfig
from .train import TrainConfig

PROFILE_DIR = Path(__file__).parent / "profiles"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "rec"
    seed: int = 0
    out_dir: str = "runs"
    model: ModelConfig = field(default_factory=ModelConfig)
    strategy: str = "uniform"
    shuffle_mode: str = "none"
    shuffle_pct: float = 0.0
    source: str = "synthetic"
    train_samples: int = 15000
    val_samples: int = 500
    scene_size: int = 64
    min_shapes: int = 1
    max_shapes: int = 3
    epochs: int = 24
    batch_size: int = 32
    lr: float = 1e-3
    decay_epochs: tuple = (20,)
    decay_factor: float = 0.1
    ema_decay: float = 0.0
    eval_every: int = 0
    hard_weight: float = 3.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.model.max_points < 3:
            raise ConfigError(f"need at least 3 contour points, got {self.model.max_points}")
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        ShuffleMode(self.shuffle_mode, self.shuffle_pct)

    @property
    def shuffle(self) -> ShuffleMode:
        return ShuffleMode(self.shuffle_mode, self.shuffle_pct)

    def scene(self) -> SceneConfig:
        """Scene settings; shape radii scale with the canvas (defaults are for 64 px)."""
        base, k = SceneConfig(), self.scene_size / 64.0
        return SceneConfig(size=self.scene_size, min_shapes=self.min_shapes, max_shapes=self.max_shapes,
                           small_radius=tuple(r * k for r in base.small_radius),
                           large_radius=tuple(r * k for r in base.large_radius))

    def train_config(self) -> TrainConfig:
        return TrainConfig(task=self.task, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           decay_epochs=self.decay_epochs, decay_factor=self.decay_factor,
                           ema_decay=self.ema_decay, strategy=self.strategy, shuffle=self.shuffle,
                           seed=self.seed, eval_every=self.eval_every, hard_weight=self.hard_weight)


_SECTIONS = {
    "run": ("task", "seed", "out_dir"),
    "codec": ("strategy", "shuffle_mode", "shuffle_pct"),
    "data": ("source", "train_samples", "val_samples", "scene_size", "min_shapes", "max_shapes"),
    "optim": ("epochs", "batch_size", "lr", "decay_epochs", "decay_factor", "ema_decay", "eval_every",
              "hard_weight"),
}


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text: str, like):
    if isinstance(like, bool):
        if text.lower() not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(like, tuple):
        elem = type(like[0]) if like else float
        return tuple(elem(x) for x in text.split(",") if x.strip())
    return type(like)(text)


def dumps(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser()
    for section, keys in _SECTIONS.items():
        cp[section] = {k: _fmt(getattr(cfg, k)) for k in keys}
    cp["model"] = {f.name: _fmt(getattr(cfg.model, f.name)) for f in fields(ModelConfig)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads(text: str) -> RunConfig:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    unknown = set(cp.sections()) - set(_SECTIONS) - {"model"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    base, mbase = RunConfig(), ModelConfig()
    kw = {}
    try:
        for section, keys in _SECTIONS.items():
            if section not in cp:
                continue
            extra = set(cp[section]) - set(keys)
            if extra:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
            for k, v in cp[section].items():
                kw[k] = _parse(v, getattr(base, k))
        mkw = {}
        if "model" in cp:
            names = {f.name for f in fields(ModelConfig)}
            extra = set(cp["model"]) - names
            if extra:
                raise ConfigError(f"unknown keys in [model]: {sorted(extra)}")
            for k, v in cp["model"].items():
                mkw[k] = _parse(v, getattr(mbase, k))
        return RunConfig(model=ModelConfig(**mkw), **kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load(path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")


def profile(name: str) -> RunConfig:
    """A shipped profile: ``toy`` or ``paper``."""
    path = PROFILE_DIR / f"{name}.cfg"
    if not path.exists():
        raise ConfigError(f"no profile named {name!r}")
    return load(path)
