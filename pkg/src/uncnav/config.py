"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from . import policy as P
from . import training as TR
from . import world as W
from .evaluation import AgentSettings

ABLATIONS = {
    "none": (True, True, True),
    "no-fu": (False, True, True),
    "no-at": (True, False, True),
    "no-cbam": (True, True, False),
    "no-fu-at": (False, False, True),
    "no-at-cbam": (True, False, False),
}
ABLATION_ALIASES = {"full": "none"}
# the six rows of the ablation sweep: full model, single ablations, two pairs
GRID_ROWS = ("none", "no-fu", "no-at", "no-cbam", "no-fu-at", "no-at-cbam")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    scenes_dir: str = ""  # defaults to <out>/scenes
    # scenes
    n_train_scenes: int = 21
    n_val_scenes: int = 14
    scene_size: int = 12
    wall_density: float = 0.25
    # sensor and episodes
    width: int = 64
    fov: float = W.DEFAULT_FOV
    max_steps: int = 800
    success_radius: float = W.SUCCESS_RADIUS
    # radiance field
    pos_freqs: int = 8
    dir_freqs: int = 4
    hidden: int = 64
    feat_dim: int = 16
    n_samples: int = 32
    beta_min: float = 0.01
    field_lr: float = 1e-3
    field_train_steps: int = 4
    ray_batch: int = 256
    # policy
    use_f_u: bool = True
    use_aux: bool = True
    use_cbam: bool = True
    lambda_aux: float = 0.5
    # training
    episodes: int = 300
    train_mode: str = "aggregate"
    expert_start: float = 1.0
    expert_end: float = 0.25
    anneal_fraction: float = 0.5
    policy_lr: float = 1e-3
    updates_per_episode: int = 2
    minibatch: int = 32
    dataset_capacity: int = 4000
    train_tiers: str = "easy"
    train_max_steps: int = 60
    detach_field: bool = True
    checkpoint_every: int = 25
    # evaluation
    episodes_per_tier: int = 10
    eval_tiers: str = "easy,medium,hard"
    action_mode: str = "sample"
    workers: int = 1
    dump_viz: int = 0

    def __post_init__(self):
        self.validate()

    # -- validation ------------------------------------------------------

    def validate(self) -> None:
        try:
            self.agent_settings()
            self.field_settings_check()
            self.policy_config()
            self.train_settings()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.n_train_scenes < 1 or self.n_val_scenes < 1:
            raise ConfigError("scene counts must be positive")
        if self.scene_size < 8:
            raise ConfigError("scene_size must be at least 8")
        if not 0.0 <= self.wall_density < 1.0:
            raise ConfigError("wall_density must lie in [0, 1)")
        if self.episodes_per_tier < 1:
            raise ConfigError("episodes_per_tier must be positive")
        bad = [t for t in self.tier_list(self.eval_tiers) if t not in W.TIERS]
        if bad:
            raise ConfigError(f"unknown eval tiers {bad}")
        if self.action_mode not in ("sample", "greedy"):
            raise ConfigError("action_mode must be sample or greedy")
        if self.workers < 1 or self.dump_viz < 0:
            raise ConfigError("workers must be >= 1 and dump_viz >= 0")

    def field_settings_check(self) -> None:
        if self.n_samples < 2 or self.beta_min <= 0 or self.field_lr < 0:
            raise ValueError("need n_samples >= 2, beta_min > 0 and field_lr >= 0")
        if min(self.pos_freqs, self.dir_freqs) < 0 or min(self.hidden, self.feat_dim) < 1:
            raise ValueError("field sizes must be positive")

    # -- module settings -------------------------------------------------

    @staticmethod
    def tier_list(text: str) -> tuple[str, ...]:
        return tuple(t.strip() for t in text.split(",") if t.strip())

    def agent_settings(self) -> AgentSettings:
        return AgentSettings(
            width=self.width, fov=self.fov, max_steps=self.max_steps, success_radius=self.success_radius,
            train_steps=self.field_train_steps, ray_batch=self.ray_batch, field_lr=self.field_lr,
            n_samples=self.n_samples, pos_freqs=self.pos_freqs, dir_freqs=self.dir_freqs,
            hidden=self.hidden, feat_dim=self.feat_dim, beta_min=self.beta_min,
        )

    def policy_config(self) -> P.PolicyConfig:
        return P.PolicyConfig(width=self.width, feat_dim=self.feat_dim, use_f_u=self.use_f_u,
                              use_aux=self.use_aux, use_cbam=self.use_cbam, lambda_aux=self.lambda_aux)

    def train_settings(self) -> TR.TrainSettings:
        return TR.TrainSettings(
            episodes=self.episodes, mode=self.train_mode, expert_start=self.expert_start,
            expert_end=self.expert_end, anneal_fraction=self.anneal_fraction, policy_lr=self.policy_lr,
            updates_per_episode=self.updates_per_episode, minibatch=self.minibatch,
            dataset_capacity=self.dataset_capacity, tiers=self.tier_list(self.train_tiers),
            max_steps=self.train_max_steps, detach_field=self.detach_field,
            checkpoint_every=self.checkpoint_every,
        )

    def with_ablation(self, name: str) -> "RunConfig":
        fu, at, cbam = ABLATIONS[canonical_ablation(name)]
        return dataclasses.replace(self, use_f_u=fu, use_aux=at, use_cbam=cbam)

    @property
    def ablation_name(self) -> str:
        flags = (self.use_f_u, self.use_aux, self.use_cbam)
        for name, f in ABLATIONS.items():
            if f == flags:
                return name
        return self.policy_config().flags()

    @property
    def scene_path(self) -> Path:
        return Path(self.scenes_dir) if self.scenes_dir else Path(self.out) / "scenes"

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {format_value(v)}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def canonical_ablation(name: str) -> str:
    name = ABLATION_ALIASES.get(name, name)
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {sorted(ABLATIONS)}")
    return name


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_value(name: str, text: str, kind):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            val = float(text)
            if not math.isfinite(val):
                raise ValueError(text)
            return val
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {getattr(kind, '__name__', kind)}") from None
    return text


def _field_types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def parse_pairs(pairs: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply string ``{key: value}`` overrides on top of ``base`` (defaults if None)."""
    types = _field_types()
    unknown = sorted(set(pairs) - set(types))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values = dataclasses.asdict(base) if base is not None else {}
    for k, v in pairs.items():
        values[k] = parse_value(k, v, types[k])
    return RunConfig(**values)


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in pairs:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        pairs[k] = v
    return parse_pairs(pairs, base)


def load(path, base: RunConfig | None = None) -> RunConfig:
    return parse_text(Path(path).read_text(), base)
