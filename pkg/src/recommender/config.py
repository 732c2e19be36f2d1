from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, List, Optional, Type, TypeVar

from .exceptions import ValidationError

T = TypeVar("T")


@dataclass
class HyperParams:
    """Model and optimisation hyper-parameters.

    Defaults are the published ones; ``config.yaml`` scales them down for desk runs.
    """
    lambda1: float = 0.1          # weight of the invariance penalty
    lambda2: float = 0.05         # weight of the consistency loss
    alpha: float = 0.6            # semantic vs. stability blend in retrieval
    beta: float = 0.5             # counterfactual weight inside the consistency loss
    gamma: float = 0.2            # counterfactual margin
    k: int = 20                   # retrieved evidence per query
    dim: int = 128
    max_len: int = 20             # context truncation length
    n_neg: int = 16               # sampled negatives for the encoder loss
    n_neg_stage2: int = 4         # sampled negatives for the ranker loss
    lr: float = 1e-4
    batch_size: int = 256
    t1: int = 5
    t2: int = 20
    tau_cite: float = 0.03
    temp_cite: float = 0.01
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.1
    max_examples_per_epoch: int = 0   # 0 keeps every example
    freeze_irm_in_stage2: bool = False
    stability_users: int = 200
    eval_negatives: int = 100
    full_catalog: bool = False
    max_eval_cases: int = 0           # per environment, 0 keeps every case
    key_selection: str = "attention"  # 'attention' or 'leave_one_out'

    def validate(self) -> None:
        """Validate hyper-parameters."""
        for name in ("lambda1", "lambda2", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValidationError("bad-hyperparams", f"{name} must be greater than or equal to 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("bad-hyperparams", "alpha must be in [0, 1]")
        if self.k < 0:
            raise ValidationError("bad-hyperparams", "k must be greater than or equal to 0")
        for name in ("dim", "max_len", "n_neg", "n_neg_stage2", "batch_size", "stability_users", "eval_negatives"):
            if getattr(self, name) < 1:
                raise ValidationError("bad-hyperparams", f"{name} must be greater than 0")
        if self.lr <= 0:
            raise ValidationError("bad-hyperparams", "lr must be greater than 0")
        if self.t1 < 0 or self.t2 < 0:
            raise ValidationError("bad-hyperparams", "t1 and t2 must be greater than or equal to 0")
        if not 0.0 < self.tau_cite < 1.0:
            raise ValidationError("bad-hyperparams", "tau_cite must be in (0, 1)")
        if self.temp_cite <= 0:
            raise ValidationError("bad-hyperparams", "temp_cite must be greater than 0")
        if self.max_examples_per_epoch < 0 or self.max_eval_cases < 0:
            raise ValidationError("bad-hyperparams", "example caps must be greater than or equal to 0")
        valid_selections = ["attention", "leave_one_out"]
        if self.key_selection not in valid_selections:
            raise ValidationError("bad-hyperparams", f"Invalid key_selection. Must be one of: {', '.join(valid_selections)}")


@dataclass
class SynthConfig:
    """Configuration of the synthetic multi-environment benchmark."""
    num_users: int = 2000
    num_items: int = 1000
    num_envs: int = 4
    num_train_envs: int = 2
    interactions_per_user: int = 40
    stable_dim: int = 8
    spurious_dim: int = 8
    spurious_strength: List[float] = field(default_factory=lambda: [0.9, 0.6, 0.9, 0.9])
    shift_intensity: float = 0.5
    env_shares: List[float] = field(default_factory=lambda: [0.4, 0.3, 0.15, 0.15])
    affinity_scale: float = 3.0
    n_attributes: int = 4
    attr_levels: int = 4
    kg_links_per_item: int = 2
    history_evidence_per_user: int = 20
    seed: int = 7

    def validate(self, dim: Optional[int] = None) -> None:
        """Validate generator settings; ``dim`` is the model embedding size when known."""
        if self.num_envs < 2:
            raise ValidationError("bad-config", "num_envs must be at least 2")
        if not 1 <= self.num_train_envs <= self.num_envs:
            raise ValidationError("bad-config", "num_train_envs must be in [1, num_envs]")
        if self.num_users < 1 or self.num_items < 2:
            raise ValidationError("bad-config", "need at least 1 user and 2 items")
        if self.interactions_per_user < 2 * self.num_envs:
            raise ValidationError("bad-config", "interactions_per_user must allow 2 interactions per environment")
        if self.stable_dim < 1 or self.spurious_dim < 0:
            raise ValidationError("bad-config", "stable_dim must be >= 1 and spurious_dim >= 0")
        if dim is not None and self.stable_dim + self.spurious_dim > dim:
            raise ValidationError("bad-config", "stable_dim + spurious_dim must not exceed the embedding dimension")
        if len(self.spurious_strength) != self.num_envs:
            raise ValidationError("bad-config", "spurious_strength needs one value per environment")
        if any(not 0.0 <= s <= 1.0 for s in self.spurious_strength):
            raise ValidationError("bad-config", "spurious_strength values must be in [0, 1]")
        if not 0.0 <= self.shift_intensity <= 1.0:
            raise ValidationError("bad-config", "shift_intensity must be in [0, 1]")
        if len(self.env_shares) != self.num_envs or any(s <= 0 for s in self.env_shares):
            raise ValidationError("bad-config", "env_shares needs one positive value per environment")
        if self.affinity_scale <= 0:
            raise ValidationError("bad-config", "affinity_scale must be greater than 0")
        if self.n_attributes < 1 or self.attr_levels < 2:
            raise ValidationError("bad-config", "need at least 1 attribute with 2 levels")
        if self.kg_links_per_item < 0 or self.history_evidence_per_user < 1:
            raise ValidationError("bad-config", "kg_links_per_item must be >= 0 and history_evidence_per_user >= 1")


@dataclass
class SplitConfig:
    """Which environments are seen during training."""
    train_envs: List[int] = field(default_factory=lambda: [0, 1])

    def validate(self) -> None:
        """Validate split settings."""
        if not self.train_envs:
            raise ValidationError("bad-config", "train_envs must not be empty")
        if any(e < 0 for e in self.train_envs):
            raise ValidationError("bad-config", "train_envs must be non-negative environment ids")
        if len(set(self.train_envs)) != len(self.train_envs):
            raise ValidationError("bad-config", "train_envs must not contain duplicates")


@dataclass
class GlobalConfig:
    """Global configuration settings."""
    output_dir: str = "runs"
    logging_config: dict = None

    def __post_init__(self):
        """Set default logging configuration if none provided."""
        if self.logging_config is None:
            self.logging_config = {
                'version': 1,
                'disable_existing_loggers': False,
                'formatters': {
                    'standard': {
                        'format': '%(asctime)s - %(levelname)s - %(message)s'
                    },
                    'json': {
                        '()': 'pythonjsonlogger.jsonlogger.JsonFormatter',
                        'format': '%(asctime)s %(name)s %(levelname)s %(message)s'
                    },
                },
                'handlers': {
                    'console': {
                        'class': 'logging.StreamHandler',
                        'formatter': 'standard',
                        'level': 'INFO',
                        'stream': 'ext://sys.stderr',
                    },
                    'file': {
                        'class': 'logging.handlers.RotatingFileHandler',
                        'filename': 'logs/recommender.log',
                        'formatter': 'json',
                        'level': 'DEBUG',
                        'maxBytes': 10485760,  # 10MB
                        'backupCount': 5,
                    },
                },
                'loggers': {
                    '': {
                        'handlers': ['console', 'file'],
                        'level': 'INFO',
                        'propagate': True
                    }
                }
            }

    def validate(self) -> None:
        """Validate global configuration."""
        if not self.output_dir:
            raise ValidationError("bad-config", "Output directory is required")
        if not isinstance(self.logging_config, dict):
            raise ValidationError("bad-config", "logging_config must be a mapping")


@dataclass
class RunConfig:
    """Fully resolved configuration of one command invocation."""
    settings: GlobalConfig = field(default_factory=GlobalConfig)
    hyperparams: HyperParams = field(default_factory=HyperParams)
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitConfig = field(default_factory=SplitConfig)

    def validate(self) -> None:
        """Validate every section."""
        self.settings.validate()
        self.hyperparams.validate()
        self.synth.validate(self.hyperparams.dim)
        self.split.validate()

    def to_dict(self) -> Dict[str, Any]:
        """Plain-dict echo of the resolved configuration (logging config omitted)."""
        return {
            "settings": {"output_dir": self.settings.output_dir},
            "hyperparams": asdict(self.hyperparams),
            "synth": asdict(self.synth),
            "split": asdict(self.split),
        }


def build_section(cls: Type[T], section: str, data: Optional[Dict[str, Any]]) -> T:
    """Instantiate a config dataclass, rejecting keys it does not declare."""
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError("unknown-config-key", f"{section}.{unknown[0]}")
    return cls(**data)


def build_run_config(raw: Optional[Dict[str, Any]]) -> RunConfig:
    """Build a RunConfig from a parsed YAML document."""
    raw = dict(raw or {})
    sections = {"settings", "hyperparams", "synth", "split"}
    unknown = sorted(set(raw) - sections)
    if unknown:
        raise ValidationError("unknown-config-key", unknown[0])
    return RunConfig(
        settings=build_section(GlobalConfig, "settings", raw.get("settings")),
        hyperparams=build_section(HyperParams, "hyperparams", raw.get("hyperparams")),
        synth=build_section(SynthConfig, "synth", raw.get("synth")),
        split=build_section(SplitConfig, "split", raw.get("split")),
    )
