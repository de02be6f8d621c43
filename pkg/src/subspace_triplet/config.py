"""Plain-text ``key = value`` configuration with typed fields.

Blank lines and ``#`` comments are ignored. Tuples are written as
comma-separated values (``hidden_dims = 64,64``) and booleans as
``true``/``false``. Unknown keys are an error.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .synthetic import SyntheticSpec
from .training import MINING_REGIMES, TrainConfig

MINING_CHOICES = MINING_REGIMES + ("none",)
PARTITION_CHOICES = ("kmeans", "random")


@dataclass
class PipelineConfig:
    seed: int = 0
    # synthetic data
    num_identities: int = 1000
    samples_per_identity: int = 20
    samples_per_identity_max: int = 0  # >0 draws counts uniformly from [samples_per_identity, max]
    heldout_per_identity: int = 5
    unseen_identities: int = 0  # 0 picks a third of num_identities, i.e. 25% of evaluation identities
    d_in: int = 32
    num_superclusters: int = 10
    sigma_within: float = 0.05
    sigma_between: float = 0.06
    label_flip_rate: float = 0.0
    noisy_identity_fraction: float = 0.0
    # network and optimizer
    hidden_dims: tuple = (64,)
    embedding_dim: int = 16
    momentum: float = 0.9
    lr_floor: float = 1e-4
    logit_scale: float = 16.0
    cls_batch_size: int = 64
    cls_lr: float = 0.1
    cls_epochs_per_rate: int = 3
    triplet_batch_size: int = 32
    triplet_lr: float = 0.01
    triplet_epochs_per_rate: int = 2
    margin: float = 0.4
    top_k: int = 3
    semi_hard: bool = False
    joint_lambda: float = 1.0
    reinit_head: bool = False
    # pipeline stages
    cleaning: bool = True
    init_subset_fraction: float = 1.0
    retrain_from_init: bool = False
    mining: str = "subspace"
    partition: str = "kmeans"
    num_subspaces: int = 10
    kmeans_max_iter: int = 100
    renormalize_centroids: bool = False
    # evaluation
    confidence: str = "identity"
    retrieval_mode: str = "hierarchical"
    verification_pairs: int = 2000
    num_thresholds: int = 101

    def validate(self) -> "PipelineConfig":
        if self.mining not in MINING_CHOICES:
            raise ConfigError(f"mining must be one of {MINING_CHOICES}")
        if self.partition not in PARTITION_CHOICES:
            raise ConfigError(f"partition must be one of {PARTITION_CHOICES}")
        if self.confidence not in ("identity", "sample"):
            raise ConfigError("confidence must be identity or sample")
        if self.retrieval_mode not in ("hierarchical", "flat"):
            raise ConfigError("retrieval_mode must be hierarchical or flat")
        if self.num_subspaces < 1:
            raise ConfigError("num_subspaces must be positive")
        if self.verification_pairs < 1 or self.num_thresholds < 2:
            raise ConfigError("need at least one pair and two thresholds")
        self.synthetic_spec().validate()
        self.train_config().mining()
        return self

    def synthetic_spec(self) -> SyntheticSpec:
        count = self.samples_per_identity
        if self.samples_per_identity_max > 0:
            count = (self.samples_per_identity, self.samples_per_identity_max)
        unseen = self.unseen_identities or -(-self.num_identities // 3)
        return SyntheticSpec(
            num_identities=self.num_identities,
            samples_per_identity=count,
            heldout_per_identity=self.heldout_per_identity,
            d_in=self.d_in,
            num_superclusters=self.num_superclusters,
            sigma_within=self.sigma_within,
            sigma_between=self.sigma_between,
            label_flip_rate=self.label_flip_rate,
            noisy_identity_fraction=self.noisy_identity_fraction,
            unseen_identities=unseen,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.to_dict().items() if k in names})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden_dims"] = tuple(d["hidden_dims"])
        return d

    def snapshot(self) -> dict:
        d = self.to_dict()
        d["hidden_dims"] = list(d["hidden_dims"])
        return d

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}


def field_type(name: str) -> type:
    default = _FIELDS[name].default
    return type(default)


def parse_value(name: str, text: str):
    """Convert ``text`` to the type of config field ``name``."""
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    kind = field_type(name)
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is tuple:
            return tuple(int(t) for t in text.split(",") if t.strip())
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = parse_value(key, value)
    return values


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or strings)."""
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        values[key] = parse_value(key, value) if isinstance(value, str) else value
    return PipelineConfig(**values).validate()


def format_config(config: PipelineConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
