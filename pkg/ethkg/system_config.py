"""
Run configuration for ETH training, evaluation and analysis.
"""

from dataclasses import (
    asdict,
    dataclass,
    field,
    fields,
)
from enum import Enum
import multiprocessing
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Type,
    TypeVar,
)

from ethkg.errors import InvalidArgumentError


class GammaKind(Enum):
    """Optional activation inside the tangent transforms"""

    RELU = "relu"
    IDENTITY = "identity"


class BetaMode(Enum):
    """How the hyperbolic/Euclidean mixing coefficient is produced"""

    QUERY_SPECIFIC = "query_specific"
    FIXED_ZERO = "fixed_zero"
    FIXED_ONE = "fixed_one"
    PER_RELATION_LEARNED = "per_relation_learned"


class LossKind(Enum):
    """Training objective"""

    SOFTMAX_CE = "softmax_ce"
    BINARY_CE = "binary_ce"


class FilterSetting(Enum):
    """Ranking filter used at evaluation time"""

    RAW = "raw"
    TIME = "time"


E = TypeVar("E", bound=Enum)

RRELU_LOWER = 1.0 / 8.0
RRELU_UPPER = 1.0 / 3.0


@dataclass
class EthConfig:
    """Model hyperparameters and ablation switches"""

    d: int = 200
    w: int = 200
    layers: int = 2
    m: int = 10
    gamma_kind: GammaKind = GammaKind.RELU
    beta_mode: BetaMode = BetaMode.QUERY_SPECIFIC
    enable_semantic_encoder: bool = True
    enable_tangent_transform: bool = True
    enable_query_transform: bool = True
    loss_kind: LossKind = LossKind.SOFTMAX_CE

    def __post_init__(self):
        for name in ("d", "w", "layers", "m"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.d < 2:
            raise InvalidArgumentError("d must be >= 2 for layer normalization")
        self.gamma_kind = _enum(GammaKind, self.gamma_kind)
        self.beta_mode = _enum(BetaMode, self.beta_mode)
        self.loss_kind = _enum(LossKind, self.loss_kind)

    def to_dict(self) -> Dict[str, Any]:
        """Get the configuration as a JSON-ready dictionary"""
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EthConfig":
        """Build a config from a dictionary, ignoring unknown keys"""
        return cls(**_known(cls, data))


@dataclass
class TrainConfig:
    """Optimizer and schedule settings"""

    lr: float = 0.001
    max_epochs: int = 50
    patience: int = 5
    grad_clip_norm: Optional[float] = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise InvalidArgumentError("lr must be > 0")
        if self.patience < 1:
            raise InvalidArgumentError("patience must be >= 1")
        if self.max_epochs < 1:
            raise InvalidArgumentError("max_epochs must be >= 1")

    def to_dict(self) -> Dict[str, Any]:
        """Get the configuration as a JSON-ready dictionary"""
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainConfig":
        """Build a config from a dictionary, ignoring unknown keys"""
        return cls(**_known(cls, data))


@dataclass
class DatasetPaths:
    """Locations of the four dataset files, or a directory holding them"""

    root: Optional[str] = None
    train: Optional[str] = None
    valid: Optional[str] = None
    test: Optional[str] = None
    stat: Optional[str] = None


@dataclass
class RunConfig:
    """Everything one CLI invocation needs, after merging file and flags"""

    model: EthConfig = field(default_factory=EthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: DatasetPaths = field(default_factory=DatasetPaths)
    synthetic: Optional[str] = None
    preset: Optional[str] = None
    m_grid: List[int] = field(default_factory=list)
    out_dir: str = "runs/eth"
    workers: int = 0

    def to_dict(self) -> Dict[str, Any]:
        """Get the configuration as a JSON-ready dictionary"""
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        """Build a run config from a nested dictionary"""
        top = _known(cls, data)
        top["model"] = EthConfig.from_dict(data.get("model", {}))
        top["train"] = TrainConfig.from_dict(data.get("train", {}))
        top["paths"] = DatasetPaths(**_known(DatasetPaths, data.get("paths", {})))
        return cls(**top)


# Dataset-specific settings reported for the four benchmark datasets
PRESETS: Dict[str, Dict[str, Any]] = {
    "icews14": {"d": 200, "w": 200, "layers": 2, "m": 10, "gamma_kind": "relu"},
    "icews0515": {"d": 200, "w": 200, "layers": 2, "m": 24, "gamma_kind": "identity"},
    "yago": {"d": 200, "w": 200, "layers": 1, "m": 2, "gamma_kind": "relu"},
    "wiki": {"d": 200, "w": 200, "layers": 1, "m": 2, "gamma_kind": "relu"},
}


def preset_config(name: str) -> EthConfig:
    """Get the model config of a named dataset preset"""
    if name not in PRESETS:
        raise InvalidArgumentError(
            f"unknown preset '{name}', expected one of {sorted(PRESETS)}"
        )
    return EthConfig.from_dict(PRESETS[name])


def default_workers() -> int:
    """Worker threads for evaluation: half the logical cores, at least one"""
    return max(1, multiprocessing.cpu_count() // 2)


def _enum(kind: Type[E], value: Any) -> E:
    try:
        return kind(value)
    except ValueError as e:
        choices = [member.value for member in kind]
        raise InvalidArgumentError(
            f"invalid {kind.__name__} '{value}', expected one of {choices}"
        ) from e


def _known(cls: type, data: Dict[str, Any]) -> Dict[str, Any]:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in data.items() if k in names}


def _plain(value: Any) -> Any:
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
