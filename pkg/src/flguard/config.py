"""Experiment configuration: a flat TOML document of ``key = value`` lines.

Every key is optional; see ``ExperimentConfig`` for names and defaults.
Unknown keys and out-of-range values raise ``ConfigError`` naming the key.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .attacks import ATTACK_KINDS, KNOWLEDGE, PERTURBATIONS, AttackConfig, TriggerSpec
from .data import KINDS, PartitionSpec
from .defense import FEATURE_SCALINGS, INLIER_REFERENCES, GuardParams
from .engine import DEFENSES, DefenseConfig, Hyper
from .nn import ACTIVATIONS, ModelSpec


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    # dataset
    num_classes: int = 10
    dims: int = 20
    train_per_class: int = 300
    test_per_class: int = 100
    aux_size: int = 50
    separation: float = 4.0
    # partition
    partition: str = "iid"
    partition_degree: float = 0.0
    # model
    layer_widths: list[int] = field(default_factory=lambda: [20, 32, 16, 10])
    hidden_activation: str = "relu"
    # federation
    n_clients: int = 100
    per_round: int = 10
    rounds: int = 50
    n_malicious: int = 20
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    # attack
    attack: str = "none"
    poison_rate: float = 0.5
    trigger_indices: list[int] = field(default_factory=lambda: [0, 1, 2, 3])
    trigger_values: list[float] = field(default_factory=lambda: [20.0, -20.0, 20.0, -20.0])
    target_label: int = 0
    scale_gamma: float = 10.0
    signflip_gamma: float = 1.0
    perturbation: str = "inverse_std"
    knowledge: str = "partial"
    adaptive_lambda: float = 1.0
    adaptive_rho: float = 1.0
    adaptive_eta: float = 1.0
    adaptive_benign_k: int = 5
    adaptive_lr: float = 0.01
    # defense
    defense: str = "geminiguard"
    tau_temp: float = 0.5
    layers: list[int] = field(default_factory=list)
    n_layers: int = 3
    k_max: int = 0
    bandwidth: str | float = "median"
    tau_inlier: str | float = "mad"
    inlier_reference: str = "benign"
    feature_scaling: str = "block"
    kmeans_restarts: int = 3
    trim_k: int = 2
    krum_f: int = -1
    # run
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self) -> None:
        validate(self)

    # component views
    def model_spec(self) -> ModelSpec:
        return ModelSpec(tuple(self.layer_widths), self.hidden_activation)

    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.partition, self.partition_degree)

    def hyper(self) -> Hyper:
        return Hyper(self.local_epochs, self.batch_size, self.lr, self.momentum)

    def trigger(self) -> TriggerSpec:
        return TriggerSpec(tuple(self.trigger_indices), tuple(self.trigger_values), self.target_label)

    def attack_config(self) -> AttackConfig:
        needs_trigger = self.attack in ("backdoor", "backdoor_distributed", "scaling_backdoor", "adaptive")
        return AttackConfig(
            kind=self.attack,
            poison_rate=self.poison_rate,
            trigger=self.trigger() if needs_trigger else None,
            scale_gamma=self.scale_gamma,
            signflip_gamma=self.signflip_gamma,
            perturbation=self.perturbation,
            knowledge=self.knowledge,
            adaptive_lambda=self.adaptive_lambda,
            adaptive_rho=self.adaptive_rho,
            adaptive_eta=self.adaptive_eta,
            adaptive_benign_k=self.adaptive_benign_k,
            adaptive_lr=self.adaptive_lr,
        )

    def guard_params(self) -> GuardParams:
        return GuardParams(
            tau_temp=self.tau_temp,
            layer_selector=tuple(self.layers) if self.layers else None,
            n_layers=self.n_layers,
            k_max=self.k_max or None,
            bandwidth=self.bandwidth,
            tau_inlier=self.tau_inlier,
            inlier_reference=self.inlier_reference,
            feature_scaling=self.feature_scaling,
            n_init=self.kmeans_restarts,
        )

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig(
            self.defense, self.guard_params(), self.trim_k, None if self.krum_f < 0 else self.krum_f
        )

    def with_values(self, **changes) -> ExperimentConfig:
        return replace(self, **changes)

    def digest(self) -> str:
        return hashlib.sha256(serialize_config(self).encode("utf-8")).hexdigest()[:12]


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _require(cond: bool, key: str, message: str) -> None:
    if not cond:
        raise ConfigError(key, message)


def validate(c: ExperimentConfig) -> None:
    for key in ("num_classes", "dims", "train_per_class", "test_per_class", "n_clients", "per_round",
                "rounds", "local_epochs", "batch_size", "adaptive_benign_k", "n_layers", "kmeans_restarts"):
        _require(getattr(c, key) >= 1, key, "must be >= 1")
    _require(c.aux_size >= 2, "aux_size", "must be >= 2")
    _require(c.separation > 0, "separation", "must be > 0")
    _require(c.partition in KINDS, "partition", f"must be one of {KINDS}")
    _require(len(c.layer_widths) >= 3 and min(c.layer_widths) >= 1, "layer_widths",
             "needs >= 3 positive widths")
    _require(c.layer_widths[0] == c.dims, "layer_widths", "input width must equal dims")
    _require(c.layer_widths[-1] == c.num_classes, "layer_widths", "output width must equal num_classes")
    _require(c.hidden_activation in ACTIVATIONS, "hidden_activation", f"must be one of {ACTIVATIONS}")
    _require(c.per_round <= c.n_clients, "per_round", "cannot exceed n_clients")
    _require(0 <= c.n_malicious and 2 * c.n_malicious < c.n_clients, "n_malicious",
             "must be >= 0 and fewer than half of n_clients")
    _require(c.lr >= 0, "lr", "must be >= 0")
    _require(0 <= c.momentum < 1, "momentum", "must lie in [0, 1)")
    _require(c.attack in ATTACK_KINDS, "attack", f"must be one of {ATTACK_KINDS}")
    _require(0.0 <= c.poison_rate <= 1.0, "poison_rate", "must lie in [0, 1]")
    _require(len(c.trigger_indices) >= 1 and len(set(c.trigger_indices)) == len(c.trigger_indices)
             and min(c.trigger_indices) >= 0 and max(c.trigger_indices) < c.dims,
             "trigger_indices", "must be distinct input coordinates")
    _require(len(c.trigger_values) in (1, len(c.trigger_indices)), "trigger_values",
             "needs one value, or one per trigger index")
    _require(0 <= c.target_label < c.num_classes, "target_label", "must be a class index")
    _require(c.scale_gamma > 0, "scale_gamma", "must be > 0")
    _require(c.signflip_gamma > 0, "signflip_gamma", "must be > 0")
    _require(c.perturbation in PERTURBATIONS, "perturbation", f"must be one of {PERTURBATIONS}")
    _require(c.knowledge in KNOWLEDGE, "knowledge", f"must be one of {KNOWLEDGE}")
    for key in ("adaptive_lambda", "adaptive_rho", "adaptive_eta"):
        _require(getattr(c, key) >= 0, key, "must be >= 0")
    _require(c.adaptive_lr > 0, "adaptive_lr", "must be > 0")
    _require(c.defense in DEFENSES, "defense", f"must be one of {DEFENSES}")
    _require(c.tau_temp > 0, "tau_temp", "must be > 0")
    n_hidden = len(c.layer_widths) - 2
    _require(all(0 <= i < n_hidden for i in c.layers), "layers", f"hidden layer indices are 0..{n_hidden - 1}")
    _require(c.k_max == 0 or c.k_max >= 2, "k_max", "must be 0 (auto) or >= 2")
    _require(c.bandwidth == "median" or (not isinstance(c.bandwidth, str) and c.bandwidth > 0),
             "bandwidth", "must be \"median\" or a positive number")
    _require(c.tau_inlier == "mad" or (not isinstance(c.tau_inlier, str) and c.tau_inlier >= 0),
             "tau_inlier", "must be \"mad\" or a non-negative number")
    _require(c.inlier_reference in INLIER_REFERENCES, "inlier_reference", f"must be one of {INLIER_REFERENCES}")
    _require(c.feature_scaling in FEATURE_SCALINGS, "feature_scaling", f"must be one of {FEATURE_SCALINGS}")
    _require(c.trim_k >= 0, "trim_k", "must be >= 0")
    if c.defense == "trimmed_mean":
        _require(c.per_round > 2 * c.trim_k, "trim_k", "per_round must exceed 2 * trim_k")
    if c.defense == "krum":
        _require(c.per_round >= 3, "per_round", "Krum needs at least 3 clients per round")
    _require(c.aux_size <= c.num_classes * c.test_per_class, "aux_size", "cannot exceed the held-out pool")
    try:
        c.partition_spec().validate(c.num_classes, c.n_clients)
    except ValueError as exc:
        raise ConfigError("partition_degree", str(exc)) from None


def _coerce(key: str, value):
    ftype = str(_FIELDS[key].type)
    if ftype.startswith("list"):
        if not isinstance(value, list):
            raise ConfigError(key, "must be a list")
        elem = int if "int" in ftype else float
        try:
            out = [elem(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(key, f"list entries must be {elem.__name__}") from None
        if elem is int and any(isinstance(v, float) and v != int(v) for v in value):
            raise ConfigError(key, "list entries must be integers")
        return out
    if ftype == "str | float":
        if isinstance(value, str):
            return value
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, "must be a string or a number")
        return float(value)
    if ftype == "str":
        if not isinstance(value, str):
            raise ConfigError(key, "must be a string")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"must be {ftype}")
    if ftype == "int":
        if value != int(value):
            raise ConfigError(key, "must be an integer")
        return int(value)
    return float(value)


def config_from_dict(doc: dict) -> ExperimentConfig:
    values = {}
    for key, value in doc.items():
        if key not in _FIELDS:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, value)
    return ExperimentConfig(**values)


def parse_config(text: str) -> ExperimentConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<document>", f"malformed TOML: {exc}") from None
    for key, value in doc.items():
        if isinstance(value, dict):
            raise ConfigError(key, "tables are not supported; use flat keys")
    return config_from_dict(doc)


def serialize_config(config: ExperimentConfig) -> str:
    return tomli_w.dumps(asdict(config))


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
