"""Toy decoder-stack shapes, per-layer projection weights, seeded inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError
from .rope import RopeParams


@dataclass(frozen=True)
class ModelConfig:
    """Shape of a multi-head attention stack; embed_dim == n_heads * head_dim."""

    n_layers: int
    n_heads: int
    head_dim: int
    embed_dim: int
    rope_base: float = 10000.0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "head_dim", "embed_dim"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.head_dim % 2 != 0:
            raise ValidationError(f"head_dim must be even, got {self.head_dim}")
        if self.embed_dim != self.head_dim * self.n_heads:
            raise ShapeError(
                f"embed_dim {self.embed_dim} != head_dim*n_heads "
                f"{self.head_dim * self.n_heads}"
            )
        if not self.rope_base > 1.0:
            raise ValidationError("rope_base must be > 1")

    @classmethod
    def create(cls, n_layers: int, n_heads: int, head_dim: int,
               rope_base: float = 10000.0) -> "ModelConfig":
        return cls(n_layers, n_heads, head_dim, head_dim * n_heads, rope_base)

    @property
    def rope(self) -> RopeParams:
        return RopeParams(head_dim=self.head_dim, base=self.rope_base)

    @property
    def kv_width(self) -> int:
        """Width of the key (or value) projection output: n_heads * head_dim."""
        return self.n_heads * self.head_dim

    @property
    def full_cache_width(self) -> int:
        """Per-token per-layer cache width of the unmodified stack."""
        return 2 * self.kv_width

    def head_slice(self, h: int) -> slice:
        return slice(h * self.head_dim, (h + 1) * self.head_dim)


@dataclass(frozen=True)
class LayerWeights:
    """Projections of one layer: wq, wk, wv are d x (n_h*d_h); wo is (n_h*d_h) x d."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray


@dataclass(frozen=True)
class AttentionWeights:
    layers: tuple[LayerWeights, ...]

    def validate(self, cfg: ModelConfig) -> None:
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        proj = (cfg.embed_dim, cfg.kv_width)
        out = (cfg.kv_width, cfg.embed_dim)
        for i, lw in enumerate(self.layers):
            for name, mat, want in (
                ("wq", lw.wq, proj),
                ("wk", lw.wk, proj),
                ("wv", lw.wv, proj),
                ("wo", lw.wo, out),
            ):
                if mat.shape != want:
                    raise ShapeError(f"layer {i} {name}: shape {mat.shape}, expected {want}")
                if not np.isfinite(mat).all():
                    raise ShapeError(f"layer {i} {name}: non-finite entries")


def random_weights(cfg: ModelConfig, seed: int) -> AttentionWeights:
    """Seeded Gaussian weights with entry variance 1/d; draw order is fixed."""
    rng = np.random.default_rng(seed)
    scale = cfg.embed_dim ** -0.5
    layers = []
    for _ in range(cfg.n_layers):
        wq = rng.standard_normal((cfg.embed_dim, cfg.kv_width)) * scale
        wk = rng.standard_normal((cfg.embed_dim, cfg.kv_width)) * scale
        wv = rng.standard_normal((cfg.embed_dim, cfg.kv_width)) * scale
        wo = rng.standard_normal((cfg.kv_width, cfg.embed_dim)) * scale
        layers.append(LayerWeights(wq=wq, wk=wk, wv=wv, wo=wo))
    return AttentionWeights(layers=tuple(layers))


def random_tokens(cfg: ModelConfig, seed: int, length: int) -> np.ndarray:
    """Seeded Gaussian token embeddings of shape (length, d), variance 1/d."""
    if length < 1:
        raise ValidationError("token sequence length must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((length, cfg.embed_dim)) * cfg.embed_dim ** -0.5
