"""Audio and text encoders mapping into a shared unit-sphere embedding space."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from clapaug import kernels
from clapaug.errors import ConfigError, ShapeError, StateError
from clapaug.nn import Dense, L2Normalize, LayerStack, ReLU, as_tensor
from clapaug.tokenizer import tokenize


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int = 64
    vocab_buckets: int = 32768
    token_embed_dim: int = 64
    hidden_dim: int = 128
    embed_dim: int = 64
    temperature_init: float = 1 / 0.07
    temperature_max: float = 100.0
    seed: int = 0

    def __post_init__(self):
        for name in ("feature_dim", "vocab_buckets", "token_embed_dim", "hidden_dim", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if not 0 < self.temperature_init <= self.temperature_max:
            raise ConfigError("temperature_init must lie in (0, temperature_max]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


class EmbeddingBag:
    """Token embedding table followed by a mean over each caption's tokens."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator | None = None):
        self.vocab = vocab
        self.dim = dim
        self.weight = rng.normal(0.0, 0.02, size=(vocab, dim)) if rng is not None else np.zeros((vocab, dim))
        self.grad_weight = np.zeros_like(self.weight)
        self._ids = None
        self._offsets = None

    def forward(self, sequences: list[tuple[int, ...]]) -> np.ndarray:
        lengths = [len(s) for s in sequences]
        offsets = np.zeros(len(sequences) + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        ids = np.fromiter((t for s in sequences for t in s), dtype=np.int64, count=int(offsets[-1]))
        self._ids, self._offsets = ids, offsets
        return kernels.embedding_bag_forward(self.weight, ids, offsets)

    def backward(self, g: np.ndarray) -> None:
        if self._ids is None:
            raise StateError("EmbeddingBag.backward called before forward")
        self.grad_weight.fill(0.0)
        kernels.embedding_bag_backward(self.grad_weight, np.ascontiguousarray(g), self._ids, self._offsets)


def _mlp(in_dim: int, cfg: ModelConfig, rng) -> LayerStack:
    return LayerStack([
        Dense(in_dim, cfg.hidden_dim, rng),
        ReLU(),
        Dense(cfg.hidden_dim, cfg.embed_dim, rng),
        L2Normalize(),
    ])


class DualEncoder:
    """Audio MLP and bag-of-tokens text MLP, plus a learnable log-temperature."""

    def __init__(self, config: ModelConfig, init: bool = True):
        self.config = config
        rng = np.random.default_rng(config.seed) if init else None
        self.audio = _mlp(config.feature_dim, config, rng)
        self.embedding = EmbeddingBag(config.vocab_buckets, config.token_embed_dim, rng)
        self.text = _mlp(config.token_embed_dim, config, rng)
        self.log_temperature = np.array([[math.log(config.temperature_init)]])
        self.grad_log_temperature = np.zeros((1, 1))

    @property
    def temperature(self) -> float:
        return min(math.exp(float(self.log_temperature[0, 0])), self.config.temperature_max)

    def clamp_temperature(self) -> None:
        self.log_temperature[0, 0] = min(float(self.log_temperature[0, 0]),
                                         math.log(self.config.temperature_max))

    def named_parameters(self) -> list[tuple[str, np.ndarray, np.ndarray]]:
        """All ``(name, param, grad)`` triples in checkpoint order."""
        out = list(self.audio.parameters("audio."))
        out.append(("text.embedding", self.embedding.weight, self.embedding.grad_weight))
        out.extend(self.text.parameters("text."))
        out.append(("log_temperature", self.log_temperature, self.grad_log_temperature))
        return out

    def params(self) -> dict[str, np.ndarray]:
        return {n: p for n, p, _ in self.named_parameters()}

    def grads(self) -> dict[str, np.ndarray]:
        return {n: g for n, _, g in self.named_parameters()}

    def encode_audio(self, features) -> np.ndarray:
        x = as_tensor(features, "features")
        if x.shape[1] != self.config.feature_dim:
            raise ShapeError(f"features have {x.shape[1]} columns, model expects {self.config.feature_dim}")
        return self.audio.forward(x)

    def encode_text(self, captions: list[str]) -> np.ndarray:
        if not captions:
            raise ShapeError("encode_text needs at least one caption")
        seqs = [tokenize(c, self.config.vocab_buckets) for c in captions]
        return self.text.forward(self.embedding.forward(seqs))

    def backward_audio(self, g: np.ndarray) -> None:
        self.audio.backward(g)

    def backward_text(self, g: np.ndarray) -> None:
        self.embedding.backward(self.text.backward(g))


def encode_audio(model: DualEncoder, features) -> np.ndarray:
    return model.encode_audio(features)


def encode_text(model: DualEncoder, captions: list[str]) -> np.ndarray:
    return model.encode_text(captions)
