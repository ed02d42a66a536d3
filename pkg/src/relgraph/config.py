"""Model and training configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field


ABLATION_FLAGS = ("decouple_off", "sparse_off", "hierarchical_off",
                  "unit_level_off", "sequence_d1")


@dataclass
class ModelConfig:
    """Hyperparameters shared by the graph predictor, feature predictor
    and decoders, plus the ablation switches."""

    vocab_size: int
    d_g: int = 128          # encoder channel width
    d_a: int = 64           # per-head affinity projection width
    d_f: int = 128          # feature width
    d_dec: int = 0          # decoder state width; 0 means d_f
    n_layers: int = 2
    n_heads: int = 4
    n_conv: int = 2
    kernel_width: int = 3
    context_len: int = 3
    composition: str = "gru"    # "gru" | "linear"
    decouple_off: bool = False
    sparse_off: bool = False
    hierarchical_off: bool = False
    unit_level_off: bool = False
    sequence_d1: bool = False

    def __post_init__(self):
        if self.d_dec <= 0:
            self.d_dec = self.d_f
        if self.hierarchical_off:
            self.n_layers = 1
        if self.sequence_d1:
            self.context_len = 1
        for name in ("vocab_size", "d_g", "d_a", "d_f", "d_dec", "n_layers",
                     "n_heads", "n_conv", "kernel_width", "context_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.composition not in ("gru", "linear"):
            raise ValueError(f"unknown composition {self.composition!r}")
        if self.decouple_off and self.d_g != self.d_f:
            # coupled keys/queries are linear maps of the features
            raise ValueError("decouple_off requires d_g == d_f")

    @property
    def affinity_mode(self) -> str:
        return "softmax" if self.sparse_off else "squared_relu"


@dataclass
class TrainConfig:
    """Unsupervised pretraining configuration (JSON-addressable)."""

    tokenization: str = "char"      # "char" | "word"
    seq_len: int = 32
    batch_size: int = 8
    max_vocab: int = 256
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 5.0
    total_steps: int = 500
    seed: int = 0
    checkpoint_interval: int = 0    # 0 disables periodic checkpoints
    model: ModelConfig = field(default_factory=lambda: ModelConfig(vocab_size=256))

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = _from_dict(ModelConfig, self.model)
        if self.tokenization not in ("char", "word"):
            raise ValueError(f"unknown tokenization {self.tokenization!r}")
        for name in ("seq_len", "batch_size", "max_vocab", "total_steps"):
            if getattr(self, name) < 0 or (name != "total_steps" and getattr(self, name) == 0):
                raise ValueError(f"TrainConfig.{name} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("TrainConfig.learning_rate must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return cls(**d)
