"""Experiment configuration: a TOML document with one named key per hyperparameter."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import tomli
import tomli_w

from .datasets import DEFAULT_MSP_SETS, MspSpec, MultiIndexSpec
from .network import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataSection:
    input_dim: int = 30
    sets: tuple = DEFAULT_MSP_SETS
    coefficients: tuple = ()
    latent_dim: int = 3
    max_degree: int = 5
    noise_std: float = 0.0
    task_seed: int = 0
    m_grid: tuple = (250, 500, 1000, 2000, 4000)
    test_size: int = 1000


@dataclass(frozen=True)
class NetworkSection:
    hidden_layers: int = 4
    width: int = 400
    output_dim: int = 1
    activation: str = "relu"
    parameterization: str = "mup"
    readout_activation: bool = True


@dataclass(frozen=True)
class TrainSection:
    base_lr: float = 0.05
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 5000
    grad_clip: float = 1.0
    optimizer: str = "adamw"
    schedule: str = "cosine"
    loss: str = "mse"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # total optimizer steps per run; 0 keeps the full epoch count at every m
    step_budget: int = 10000
    dtype: str = "float32"


@dataclass(frozen=True)
class MetricsSection:
    ntk: bool = True
    ck: bool = True
    superposition: bool = True
    cumulative_power: bool = False
    ntk_max_m: int = 4000
    ntk_centered: bool = False
    ridge_scale: float = 1e-6
    probe_cap: int = 2000
    ck_cap: int = 2000
    ck_eps: float = 0.95
    critical_eps: float = 0.1
    zero_tol: float = 1e-3
    hist_bins: int = 20
    # a run whose final training loss stays above this fraction of the label
    # variance is flagged as slow rather than reported as a valid point
    slow_loss_fraction: float = 0.05
    save_artifacts: bool = True


@dataclass(frozen=True)
class SweepSection:
    widths: tuple = ()
    hidden_layers: tuple = ()
    base_lrs: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    task: str = "msp"
    seed: int = 0
    repeats: int = 1
    seeds: tuple = ()
    gammas: tuple = (1.0,)
    shuffle: bool = False
    threads: int = 1
    out: str = "runs"
    data: DataSection = field(default_factory=DataSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def __post_init__(self):
        validate(self)

    @property
    def repeat_seeds(self) -> tuple:
        if self.seeds:
            return tuple(int(s) for s in self.seeds)
        return tuple(self.seed + r for r in range(self.repeats))

    def data_spec(self):
        d = self.data
        if self.task == "msp":
            return MspSpec(d.input_dim, d.sets, d.coefficients or None)
        return MultiIndexSpec(d.input_dim, d.latent_dim, d.max_degree, d.noise_std, d.task_seed)

    def network_config(self, gamma: float = 1.0, width: int | None = None,
                       hidden_layers: int | None = None) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            input_dim=self.data.input_dim,
            width=n.width if width is None else int(width),
            depth=(n.hidden_layers if hidden_layers is None else int(hidden_layers)) + 1,
            output_dim=n.output_dim,
            activation=n.activation,
            gamma=float(gamma),
            parameterization=n.parameterization,
            readout_activation=n.readout_activation,
        )

    def train_config(self, m: int, seed: int, base_lr: float | None = None) -> TrainConfig:
        t = self.train
        return TrainConfig(
            base_lr=t.base_lr if base_lr is None else float(base_lr),
            weight_decay=t.weight_decay,
            batch_size=t.batch_size,
            epochs=scaled_epochs(m, t.batch_size, t.epochs, t.step_budget),
            grad_clip=t.grad_clip,
            loss=t.loss,
            schedule=t.schedule,
            optimizer=t.optimizer,
            seed=int(seed),
            beta1=t.beta1,
            beta2=t.beta2,
            eps=t.eps,
            dtype=t.dtype,
        )


def scaled_epochs(m: int, batch_size: int, epochs: int, step_budget: int) -> int:
    """Epoch count that keeps ``epochs * ceil(m / batch)`` near ``step_budget`` (capped at ``epochs``)."""
    if step_budget <= 0:
        return epochs
    per_epoch = math.ceil(m / batch_size)
    return max(1, min(epochs, round(step_budget / per_epoch)))


def validate(cfg: ExperimentConfig) -> None:
    if cfg.task not in ("msp", "multi_index"):
        raise ConfigError(f"task must be 'msp' or 'multi_index', got {cfg.task!r}")
    grid = list(cfg.data.m_grid)
    if not grid or any(int(m) < 1 for m in grid):
        raise ConfigError("m_grid must be a non-empty list of positive sizes")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("m_grid must be strictly increasing")
    if cfg.data.test_size < 1:
        raise ConfigError("test_size must be >= 1")
    if cfg.repeats < 1:
        raise ConfigError("repeats must be >= 1")
    if cfg.seeds and len(cfg.seeds) != cfg.repeats:
        raise ConfigError("seeds must list one seed per repeat")
    if not cfg.gammas or any(not g > 0 for g in cfg.gammas):
        raise ConfigError("gammas must be a non-empty list of positive values")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    if cfg.network.hidden_layers < 0 or cfg.network.width < 1:
        raise ConfigError("hidden_layers must be >= 0 and width >= 1")
    if not 0 < cfg.metrics.critical_eps < 1:
        raise ConfigError("critical_eps must lie in (0, 1)")
    if not 0 < cfg.metrics.ck_eps < 1:
        raise ConfigError("ck_eps must lie in (0, 1)")
    if cfg.train.step_budget < 0:
        raise ConfigError("step_budget must be >= 0")
    # build the derived objects once so bad values surface at load time
    cfg.data_spec()
    cfg.network_config(cfg.gammas[0])
    cfg.train_config(grid[0], 0)


_SECTIONS = {"data": DataSection, "network": NetworkSection, "train": TrainSection,
             "metrics": MetricsSection, "sweep": SweepSection}


def _coerce(value, default):
    if isinstance(default, tuple):
        return tuple(_coerce(v, None) if isinstance(v, list) else v for v in value)
    if isinstance(value, list):
        return tuple(_coerce(v, None) if isinstance(v, list) else v for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    return value


def _build(cls, raw: dict, where: str):
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    defaults = cls()
    kwargs = {}
    for k, v in raw.items():
        kwargs[k] = _coerce(v, getattr(defaults, k))
    return replace(defaults, **kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    sections = {}
    for key, cls in _SECTIONS.items():
        sub = raw.pop(key, {})
        if not isinstance(sub, dict):
            raise ConfigError(f"[{key}] must be a table")
        sections[key] = _build(cls, sub, f"[{key}]")
    top = {f.name for f in fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = set(raw) - top
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    kwargs = {k: _coerce(v, getattr(ExperimentConfig, k, None)) for k, v in raw.items()}
    if "gammas" in kwargs:
        kwargs["gammas"] = tuple(float(g) for g in kwargs["gammas"])
    return ExperimentConfig(**kwargs, **sections)


def load_config(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(raw)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (tuple, list)):
        return [_plain(v) for v in obj]
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _plain(asdict(cfg))


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def save_config(cfg: ExperimentConfig, path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(dump_config(cfg))
    return p


def config_hash(cfg: ExperimentConfig) -> str:
    """Digest of everything that affects results (output location and thread count excluded)."""
    d = config_to_dict(cfg)
    d.pop("out", None)
    d.pop("threads", None)
    return hashlib.sha256(tomli_w.dumps(d).encode()).hexdigest()[:16]
