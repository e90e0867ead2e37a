"""Plain pre-LN Vision Transformer with optional adapters or prompts."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .tensor import Rng, Tensor
from .tuning import (
    AdapterConfig,
    AdapterLayer,
    ConfigError,
    FreezePolicy,
    PromptConfig,
    adapter_branch,
    fuse_parallel,
    fuse_sequential,
    init_adapters,
    init_prompts,
    prepend_prompts,
)

LN_EPS = 1e-6
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class VitConfig:
    image_size: int = 16
    patch_size: int = 4
    in_chans: int = 3
    embed_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    mlp_ratio: int = 4
    num_classes: int = 10
    seq_extra: int = 1
    num_frames: int = 1
    head_bn: bool = True

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.seq_extra < 1:
            raise ConfigError("seq_extra must be >= 1 (CLS token)")
        for key in ("image_size", "patch_size", "in_chans", "embed_dim", "num_layers",
                    "num_heads", "mlp_ratio", "num_classes", "num_frames"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")

    @property
    def patches_per_frame(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_patches(self) -> int:
        return self.num_frames * self.patches_per_frame

    @property
    def seq_len(self) -> int:
        return self.num_patches + self.seq_extra

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_hidden(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def to_dict(self) -> dict:
        return asdict(self)


def vit_param_count(cfg: VitConfig) -> int:
    """Closed-form count of backbone + head parameters (no adapters/prompts)."""
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    patch = cfg.patch_size ** 2 * cfg.in_chans * d + d
    tokens = cfg.seq_extra * d + cfg.seq_len * d
    block = 2 * d + 4 * (d * d + d) + 2 * d + (d * hid + hid) + (hid * d + d)
    return patch + tokens + cfg.num_layers * block + 2 * d + d * cfg.num_classes + cfg.num_classes


def param_shapes(cfg: VitConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table of the backbone and head, in model order."""
    d, hid = cfg.embed_dim, cfg.mlp_hidden
    shapes = {
        "patch_embed.weight": (cfg.patch_size ** 2 * cfg.in_chans, d),
        "patch_embed.bias": (d,),
        "cls_token": (cfg.seq_extra, d),
        "pos_embed": (cfg.seq_len, d),
    }
    for i in range(cfg.num_layers):
        b = f"blocks.{i}"
        shapes[f"{b}.norm1.weight"] = shapes[f"{b}.norm1.bias"] = (d,)
        for proj in ("q", "k", "v", "proj"):
            shapes[f"{b}.attn.{proj}.weight"] = (d, d)
            shapes[f"{b}.attn.{proj}.bias"] = (d,)
        shapes[f"{b}.norm2.weight"] = shapes[f"{b}.norm2.bias"] = (d,)
        shapes[f"{b}.mlp.fc1.weight"] = (d, hid)
        shapes[f"{b}.mlp.fc1.bias"] = (hid,)
        shapes[f"{b}.mlp.fc2.weight"] = (hid, d)
        shapes[f"{b}.mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = shapes["norm.bias"] = (d,)
    shapes["head.weight"] = (d, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def _xavier(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -bound, bound)


class VitModel:
    """Named parameter store plus the forward pass.

    Linear weights are stored input-major (``y = x @ W + b``). The
    pre-head BatchNorm keeps running statistics as buffers, not parameters.
    """

    def __init__(self, config: VitConfig, seed: int = 0):
        self.config = config
        self.training = False
        self.mode = "full"
        self.adapter_config: AdapterConfig | None = None
        self.prompt_config: PromptConfig | None = None
        self.adapters: dict[int, AdapterLayer] = {}
        self.prompts: dict[int, Tensor] = {}
        self.dropout_rng: Rng | None = None
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._init_backbone(Rng(seed))

    # ------------------------------------------------------------ building

    def _init_backbone(self, rng: Rng) -> None:
        c = self.config
        d, hid = c.embed_dim, c.mlp_hidden
        pdim = c.patch_size ** 2 * c.in_chans
        p = self.params
        p["patch_embed.weight"] = Tensor(_xavier(rng, pdim, d))
        p["patch_embed.bias"] = Tensor(np.zeros(d))
        p["cls_token"] = Tensor(rng.normal((c.seq_extra, d), std=0.02))
        p["pos_embed"] = Tensor(rng.normal((c.seq_len, d), std=0.02))
        for i in range(c.num_layers):
            b = f"blocks.{i}"
            p[f"{b}.norm1.weight"] = Tensor(np.ones(d))
            p[f"{b}.norm1.bias"] = Tensor(np.zeros(d))
            for proj in ("q", "k", "v", "proj"):
                p[f"{b}.attn.{proj}.weight"] = Tensor(_xavier(rng, d, d))
                p[f"{b}.attn.{proj}.bias"] = Tensor(np.zeros(d))
            p[f"{b}.norm2.weight"] = Tensor(np.ones(d))
            p[f"{b}.norm2.bias"] = Tensor(np.zeros(d))
            p[f"{b}.mlp.fc1.weight"] = Tensor(_xavier(rng, d, hid))
            p[f"{b}.mlp.fc1.bias"] = Tensor(np.zeros(hid))
            p[f"{b}.mlp.fc2.weight"] = Tensor(_xavier(rng, hid, d))
            p[f"{b}.mlp.fc2.bias"] = Tensor(np.zeros(d))
        p["norm.weight"] = Tensor(np.ones(d))
        p["norm.bias"] = Tensor(np.zeros(d))
        self.reset_head(c.num_classes, rng)

    def reset_head(self, num_classes: int, rng: Rng) -> None:
        """Fresh classifier (and BatchNorm statistics) for a new task."""
        d = self.config.embed_dim
        if num_classes != self.config.num_classes:
            self.config = VitConfig(**{**self.config.to_dict(), "num_classes": num_classes})
        self.params["head.weight"] = Tensor(rng.normal((d, num_classes), std=0.01))
        self.params["head.bias"] = Tensor(np.zeros(num_classes))
        self.buffers["head_norm.running_mean"] = np.zeros(d)
        self.buffers["head_norm.running_var"] = np.ones(d)

    def add_adapters(self, config: AdapterConfig, rng: Rng) -> None:
        self.adapter_config = config
        self.adapters = init_adapters(rng, config, self.config)
        for layer, ad in self.adapters.items():
            self.params.update(ad.named(layer))

    def add_prompts(self, config: PromptConfig, rng: Rng) -> None:
        self.prompt_config = config
        self.prompts = init_prompts(rng, config, self.config)
        for layer, t in self.prompts.items():
            self.params[f"prompts.{layer}"] = t

    def set_frames(self, num_frames: int) -> None:
        """Resize the positional table for a new frame count (tiled per frame)."""
        c = self.config
        if num_frames == c.num_frames:
            return
        old = self.params["pos_embed"].data
        extra, per = old[: c.seq_extra], old[c.seq_extra:c.seq_extra + c.patches_per_frame]
        self.config = VitConfig(**{**c.to_dict(), "num_frames": num_frames})
        self.params["pos_embed"] = Tensor(np.concatenate([extra] + [per] * num_frames))

    def apply_policy(self, policy: FreezePolicy) -> None:
        self.mode = policy.mode
        for name, t in self.params.items():
            t.requires_grad = policy.trainable(name)
            t.grad = None

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(t.size for t in self.params.values() if t.requires_grad or not trainable_only)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def train(self, mode: bool = True) -> VitModel:
        self.training = mode
        return self

    def eval(self) -> VitModel:
        return self.train(False)

    # ------------------------------------------------------------ forward

    def patch_embed(self, images) -> Tensor:
        """Images [B, H, W, c] (or [B, F, H, W, c] for clips) to [B, seq_len, d].

        A single unbatched image [H, W, c] yields [seq_len, d].
        """
        c = self.config
        x = np.asarray(images, dtype=np.float64)
        unbatched = x.ndim == 3
        if unbatched:
            x = x[None]
        if x.ndim == 4:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1:] != (c.num_frames, c.image_size, c.image_size, c.in_chans):
            raise ConfigError(
                f"input shape {np.shape(images)} does not match config "
                f"(frames={c.num_frames}, H=W={c.image_size}, c={c.in_chans})")
        b, f, g = x.shape[0], c.num_frames, c.image_size // c.patch_size
        ps = c.patch_size
        patches = (x.reshape(b, f, g, ps, g, ps, c.in_chans)
                   .transpose(0, 1, 2, 4, 3, 5, 6)
                   .reshape(b, f * g * g, ps * ps * c.in_chans))
        tok = T.matmul(Tensor(patches), self.params["patch_embed.weight"]) + self.params["patch_embed.bias"]
        cls = T.broadcast_to(self.params["cls_token"], (b, c.seq_extra, c.embed_dim))
        tok = T.concat([cls, tok], axis=1) + self.params["pos_embed"]
        return tok[0] if unbatched else tok

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return T.matmul(x, self.params[f"{name}.weight"]) + self.params[f"{name}.bias"]

    def _ln(self, x: Tensor, name: str) -> Tensor:
        return T.layernorm(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], LN_EPS)

    def mhsa(self, x: Tensor, layer: int) -> Tensor:
        """Multi-head self-attention over the token axis of [..., T, d]."""
        c = self.config
        lead, n = x.shape[:-2], x.shape[-2]
        h, dh = c.num_heads, c.head_dim
        a = f"blocks.{layer}.attn"

        def heads(t):
            t = T.reshape(t, lead + (n, h, dh))
            nd = t.ndim
            return T.transpose(t, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

        q = heads(self._linear(x, f"{a}.q"))
        k = heads(self._linear(x, f"{a}.k"))
        v = heads(self._linear(x, f"{a}.v"))
        scores = T.mul_scalar(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
        ctx = T.matmul(T.softmax_rows(scores), v)
        nd = ctx.ndim
        ctx = T.transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
        ctx = T.reshape(ctx, lead + (n, c.embed_dim))
        return self._linear(ctx, f"{a}.proj")

    def mlp(self, x_norm: Tensor, layer: int) -> Tensor:
        m = f"blocks.{layer}.mlp"
        return self._linear(T.gelu(self._linear(x_norm, f"{m}.fc1")), f"{m}.fc2")

    def block_forward(self, x_in: Tensor, layer: int, tuning: str | None = None) -> Tensor:
        """One encoder block. ``tuning`` is vanilla, parallel or sequential;
        by default it follows the attached adapters for this layer."""
        if not 0 <= layer < self.config.num_layers:
            raise IndexError(f"layer {layer} outside 0..{self.config.num_layers - 1}")
        ad = self.adapters.get(layer)
        if tuning is None:
            tuning = self.adapter_config.insertion if ad is not None else "vanilla"
        b = f"blocks.{layer}"
        x_prime = x_in + self.mhsa(self._ln(x_in, f"{b}.norm1"), layer)
        x_norm = self._ln(x_prime, f"{b}.norm2")
        mlp_out = self.mlp(x_norm, layer)
        if tuning == "vanilla":
            return mlp_out + x_prime
        if ad is None:
            raise ConfigError(f"layer {layer} has no adapter for tuning={tuning!r}")
        ac = self.adapter_config
        if tuning == "parallel":
            branch = adapter_branch(x_norm, ad, ac.dropout_p, self.dropout_rng, self.training)
            return fuse_parallel(mlp_out, branch, x_prime, ac.scale)
        if tuning == "sequential":
            return fuse_sequential(mlp_out, x_prime, ad, ac.scale, ac.dropout_p,
                                   self.dropout_rng, self.training)
        raise ConfigError(f"unknown tuning {tuning!r}")

    def encode(self, images, tuning: str | None = None) -> Tensor:
        """Run all blocks and the final LayerNorm; returns CLS features [B, d]."""
        x = self.patch_embed(images)
        unbatched = x.ndim == 2
        if unbatched:
            x = T.reshape(x, (1,) + x.shape)
        p = self.prompt_config.num_tokens if self.prompts else 0
        deep = bool(self.prompts) and self.prompt_config.deep
        if self.prompts and not deep:
            x = prepend_prompts(x, self.prompts[0])
        for layer in range(self.config.num_layers):
            if deep:
                x = prepend_prompts(x, self.prompts[layer])
            x = self.block_forward(x, layer, tuning)
            if deep:
                x = x[:, p:]
        x = self._ln(x, "norm")
        cls_index = p if (self.prompts and not deep) else 0
        cls = x[:, cls_index]
        return cls[0] if unbatched else cls

    def classify(self, cls: Tensor) -> Tensor:
        """CLS features [B, d] -> logits [B, C] through the optional BatchNorm."""
        c = self.config
        if cls.ndim == 1:
            return self.classify(T.reshape(cls, (1, -1)))[0]
        x = cls
        if c.head_bn:
            rm, rv = self.buffers["head_norm.running_mean"], self.buffers["head_norm.running_var"]
            if self.training and x.shape[0] > 1:
                n = x.shape[0]
                bmean = x.data.mean(axis=0)
                bvar = x.data.var(axis=0) * n / (n - 1)
                x = T.batchnorm(x, eps=BN_EPS)
                rm *= 1.0 - BN_MOMENTUM
                rm += BN_MOMENTUM * bmean
                rv *= 1.0 - BN_MOMENTUM
                rv += BN_MOMENTUM * bvar
            else:
                x = T.batchnorm(x, rm, rv, eps=BN_EPS)
        return T.matmul(x, self.params["head.weight"]) + self.params["head.bias"]

    def forward(self, images, tuning: str | None = None) -> Tensor:
        return self.classify(self.encode(images, tuning))

    __call__ = forward
