"""AdaptMLP bottleneck adapters, prompt tokens, and per-mode freeze policies."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Rng, Tensor

if TYPE_CHECKING:
    from .vit import VitConfig

MODES = ("full", "linear", "vpt", "adaptformer")
INSERTIONS = ("parallel", "sequential")


class ConfigError(ValueError):
    """Invalid model, tuning, or run configuration."""


@dataclass(frozen=True)
class AdapterConfig:
    mid_dim: int = 64
    scale: float = 0.1
    insertion: str = "parallel"
    layer_start: int = 1  # 1-based, inclusive
    layer_end: int | None = None  # None means the last layer
    dropout_p: float = 0.0
    kaiming: str = "uniform"

    def validate(self, num_layers: int) -> None:
        if self.mid_dim < 1:
            raise ConfigError(f"adapter mid_dim must be >= 1, got {self.mid_dim}")
        if self.scale < 0:
            raise ConfigError(f"adapter scale must be nonnegative, got {self.scale}")
        if self.insertion not in INSERTIONS:
            raise ConfigError(f"adapter insertion must be one of {INSERTIONS}, got {self.insertion!r}")
        end = self.end(num_layers)
        if not 1 <= self.layer_start <= end <= num_layers:
            raise ConfigError(
                f"adapter layer range {self.layer_start}..{end} outside 1..{num_layers}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"adapter dropout_p must lie in [0, 1), got {self.dropout_p}")
        if self.kaiming not in ("uniform", "normal"):
            raise ConfigError(f"kaiming must be 'uniform' or 'normal', got {self.kaiming!r}")

    def end(self, num_layers: int) -> int:
        return num_layers if self.layer_end is None else self.layer_end

    def layers(self, num_layers: int) -> list[int]:
        """0-based indices of adapted blocks."""
        return list(range(self.layer_start - 1, self.end(num_layers)))


@dataclass(frozen=True)
class PromptConfig:
    num_tokens: int = 4
    deep: bool = True

    def validate(self) -> None:
        if self.num_tokens < 1:
            raise ConfigError(f"prompt num_tokens must be >= 1, got {self.num_tokens}")


@dataclass
class AdapterLayer:
    """Parameters of one AdaptMLP branch; weights map input @ W."""
    down_w: Tensor  # d x mid
    down_b: Tensor  # mid
    up_w: Tensor  # mid x d
    up_b: Tensor  # d

    def named(self, layer: int) -> dict[str, Tensor]:
        p = f"adapters.{layer}"
        return {
            f"{p}.down_proj.weight": self.down_w,
            f"{p}.down_proj.bias": self.down_b,
            f"{p}.up_proj.weight": self.up_w,
            f"{p}.up_proj.bias": self.up_b,
        }

    @property
    def num_params(self) -> int:
        return sum(t.size for t in (self.down_w, self.down_b, self.up_w, self.up_b))


def kaiming(rng: Rng, fan_in: int, shape, variant: str = "uniform") -> np.ndarray:
    """He init for ReLU (gain sqrt 2), fan-in mode: std = sqrt(2 / fan_in)."""
    if variant == "normal":
        return rng.normal(shape, std=math.sqrt(2.0 / fan_in))
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(shape, -bound, bound)


def init_adapters(rng: Rng, config: AdapterConfig, vit: VitConfig) -> dict[int, AdapterLayer]:
    config.validate(vit.num_layers)
    d, m = vit.embed_dim, config.mid_dim
    out = {}
    for layer in config.layers(vit.num_layers):
        out[layer] = AdapterLayer(
            down_w=Tensor(kaiming(rng, d, (d, m), config.kaiming)),
            down_b=Tensor(np.zeros(m)),
            up_w=Tensor(np.zeros((m, d))),
            up_b=Tensor(np.zeros(d)),
        )
    return out


def adapter_branch(x_norm: Tensor, adapter: AdapterLayer, dropout_p: float = 0.0,
                   rng: Rng | None = None, training: bool = False) -> Tensor:
    """Down-projection, ReLU, dropout, up-projection. Unscaled."""
    h = T.relu(T.matmul(x_norm, adapter.down_w) + adapter.down_b)
    h = T.dropout(h, dropout_p, rng, training)
    return T.matmul(h, adapter.up_w) + adapter.up_b


def fuse_parallel(mlp_out: Tensor, branch_out: Tensor, x_prime: Tensor, s: float) -> Tensor:
    if not (mlp_out.shape == branch_out.shape == x_prime.shape):
        raise DimensionError(
            f"fuse_parallel shape mismatch: mlp {mlp_out.shape}, branch {branch_out.shape}, "
            f"residual {x_prime.shape}")
    return (mlp_out + T.mul_scalar(branch_out, s)) + x_prime


def fuse_sequential(mlp_out: Tensor, x_prime: Tensor, adapter: AdapterLayer, s: float,
                    dropout_p: float = 0.0, rng: Rng | None = None,
                    training: bool = False) -> Tensor:
    """Adapter applied to the MLP output (no extra LayerNorm), then the same
    scaled residual fusion as the parallel form."""
    branch = adapter_branch(mlp_out, adapter, dropout_p, rng, training)
    return fuse_parallel(mlp_out, branch, x_prime, s)


def adapter_shapes(config: AdapterConfig, vit: VitConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape of every adapter tensor, without allocating."""
    config.validate(vit.num_layers)
    d, m = vit.embed_dim, config.mid_dim
    out = {}
    for layer in config.layers(vit.num_layers):
        p = f"adapters.{layer}"
        out.update({f"{p}.down_proj.weight": (d, m), f"{p}.down_proj.bias": (m,),
                    f"{p}.up_proj.weight": (m, d), f"{p}.up_proj.bias": (d,)})
    return out


def prompt_shapes(config: PromptConfig, vit: VitConfig) -> dict[str, tuple[int, ...]]:
    config.validate()
    layers = range(vit.num_layers) if config.deep else range(1)
    return {f"prompts.{l}": (config.num_tokens, vit.embed_dim) for l in layers}


def adapter_param_count(d: int, mid_dim: int, layers: int, num_classes: int | None = None) -> int:
    """Tunable parameters of AdaptFormer: per-layer adapters plus the linear head."""
    n = layers * (2 * d * mid_dim + mid_dim + d)
    if num_classes:
        n += d * num_classes + num_classes
    return n


def prompt_param_count(d: int, num_tokens: int, layers: int, deep: bool = True,
                       num_classes: int | None = None) -> int:
    n = (layers if deep else 1) * num_tokens * d
    if num_classes:
        n += d * num_classes + num_classes
    return n


def init_prompts(rng: Rng, config: PromptConfig, vit: VitConfig) -> dict[int, Tensor]:
    """One p x d matrix per layer (deep) or a single input-level one (shallow)."""
    config.validate()
    d, p = vit.embed_dim, config.num_tokens
    bound = math.sqrt(6.0 / (p + d))
    layers = range(vit.num_layers) if config.deep else range(1)
    return {l: Tensor(rng.uniform((p, d), -bound, bound)) for l in layers}


def prepend_prompts(tokens: Tensor, prompts: Tensor) -> Tensor:
    """Concatenate prompt rows ahead of the token axis (axis -2)."""
    if prompts.shape[-1] != tokens.shape[-1]:
        raise DimensionError(f"prompt dim {prompts.shape[-1]} != token dim {tokens.shape[-1]}")
    if tokens.ndim == 3:
        prompts = T.broadcast_to(prompts, (tokens.shape[0],) + prompts.shape)
    return T.concat([prompts, tokens], axis=-2)


class FreezePolicy:
    """Maps parameter names to trainable (True) or frozen (False)."""

    _RULES: dict[str, Callable[[str], bool]] = {
        "full": lambda name: True,
        "linear": lambda name: name.startswith("head."),
        "vpt": lambda name: name.startswith(("head.", "prompts.")),
        "adaptformer": lambda name: name.startswith(("head.", "adapters.")),
    }

    def __init__(self, mode: str):
        if mode not in self._RULES:
            raise ConfigError(f"unknown tuning mode {mode!r}; expected one of {MODES}")
        self.mode = mode
        self._rule = self._RULES[mode]

    def trainable(self, name: str) -> bool:
        return self._rule(name)

    def __call__(self, name: str) -> bool:
        return self._rule(name)

    def split(self, names) -> tuple[list[str], list[str]]:
        train = [n for n in names if self._rule(n)]
        frozen = [n for n in names if not self._rule(n)]
        return train, frozen

    def __repr__(self) -> str:
        return f"FreezePolicy({self.mode!r})"
