"""Small hierarchical vision transformer used as the learned feature branch.

Patch embedding feeds stages of alternating blocks: even blocks run
multi-head self-attention inside non-overlapping token windows, odd blocks
attend with shared global query tokens (pooled once per stage from the
whole token field) against each window's keys/values, so long-range
context flows without shifted windows.  Stages are bridged by 2x2 token
merging.  All blocks are pre-norm residual with GELU MLP sub-blocks, and
the whole graph is differentiable through the `autodiff` tape.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .errors import ConfigError, ShapeError, StateError

LAYER_NORM_EPS = 1e-6
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    input_size: int = 64
    patch_size: int = 4
    stage_dims: tuple[int, ...] = (32, 64)
    depths: tuple[int, ...] = (2, 2)
    window_size: int = 4
    num_heads: tuple[int, ...] = (2, 4)
    mlp_ratio: float = 2.0
    # Global tokens come from average pooling + a linear map; kept as a
    # named variant so a heavier extractor could slot in later.
    global_token_variant: str = "avgpool-linear"

    def __post_init__(self):
        object.__setattr__(self, "stage_dims", tuple(self.stage_dims))
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "num_heads", tuple(self.num_heads))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_dims)

    @property
    def feature_dim(self) -> int:
        return self.stage_dims[-1]

    def grid_side(self, stage: int) -> int:
        return self.input_size // self.patch_size // (2**stage)

    def validate(self) -> None:
        if not (len(self.stage_dims) == len(self.depths) == len(self.num_heads)):
            raise ConfigError(
                "stage_dims, depths and num_heads must have equal length, got "
                f"{len(self.stage_dims)}/{len(self.depths)}/{len(self.num_heads)}"
            )
        if self.input_size % self.patch_size != 0:
            raise ConfigError(
                f"input_size {self.input_size} not divisible by patch_size {self.patch_size}"
            )
        for s in range(self.num_stages):
            side = self.grid_side(s)
            if side == 0 or (self.input_size // self.patch_size) % (2**s) != 0:
                raise ConfigError(f"token grid vanishes at stage {s}")
            if side % self.window_size != 0:
                raise ConfigError(
                    f"stage {s} grid side {side} not divisible by window_size {self.window_size}"
                )
            if self.stage_dims[s] % self.num_heads[s] != 0:
                raise ConfigError(
                    f"stage {s} dim {self.stage_dims[s]} not divisible by "
                    f"num_heads {self.num_heads[s]}"
                )
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.global_token_variant != "avgpool-linear":
            raise ConfigError(
                f"unknown global_token_variant {self.global_token_variant!r}"
            )

    def mlp_hidden(self, stage: int) -> int:
        return int(round(self.stage_dims[stage] * self.mlp_ratio))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_dims"] = list(self.stage_dims)
        d["depths"] = list(self.depths)
        d["num_heads"] = list(self.num_heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        kwargs = dict(d)
        for key in ("stage_dims", "depths", "num_heads"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


class ParamStore:
    """Named parameters with parallel gradients, deterministic iteration order."""

    def __init__(self):
        self._params: dict[str, Var] = {}

    def add(self, name: str, value: np.ndarray) -> Var:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        var = Var(np.asarray(value, dtype=np.float64), leaf=True)
        self._params[name] = var
        return var

    def __getitem__(self, name: str) -> Var:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Var]]:
        return iter(self._params.items())

    def num_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradient arrays mirroring parameter shapes (zeros where unset)."""
        return {
            name: (p.grad if p.grad is not None else np.zeros_like(p.value))
            for name, p in self._params.items()
        }

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(values)
        if missing:
            raise StateError(f"parameter name mismatch: {sorted(missing)}")
        for name, p in self._params.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeError(
                    f"parameter {name!r}: shape {arr.shape} != expected {p.value.shape}"
                )
            p.value = arr.copy()


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config: BackboneConfig, seed: int) -> ParamStore:
    """Fresh parameters: truncated-normal weights (std 0.02), zero biases.

    Identical seeds produce bit-identical stores.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        store.add(f"{name}.weight", _truncated_normal(rng, (fan_in, fan_out), INIT_STD))
        store.add(f"{name}.bias", np.zeros(fan_out))

    def norm(name: str, dim: int) -> None:
        store.add(f"{name}.gamma", np.ones(dim))
        store.add(f"{name}.beta", np.zeros(dim))

    linear("patch_embed", config.patch_size**2, config.stage_dims[0])
    for s, dim in enumerate(config.stage_dims):
        linear(f"stages.{s}.global_gen", dim, dim)
        for b in range(config.depths[s]):
            prefix = f"stages.{s}.blocks.{b}"
            norm(f"{prefix}.norm1", dim)
            for proj in ("q", "k", "v", "proj"):
                linear(f"{prefix}.attn.{proj}", dim, dim)
            norm(f"{prefix}.norm2", dim)
            hidden = config.mlp_hidden(s)
            linear(f"{prefix}.mlp.fc1", dim, hidden)
            linear(f"{prefix}.mlp.fc2", hidden, dim)
        if s + 1 < config.num_stages:
            linear(f"downsample.{s}", 4 * dim, config.stage_dims[s + 1])
    norm("final_norm", config.feature_dim)
    return store


# ---------------------------------------------------------------------------
# Differentiable building blocks.  Token fields are laid out (B, G, G, C).
# ---------------------------------------------------------------------------


def _linear(x: Var, params: ParamStore, name: str) -> Var:
    return ad.matmul(x, params[f"{name}.weight"]) + params[f"{name}.bias"]


def _layer_norm(x: Var, params: ParamStore, name: str) -> Var:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    std = ad.sqrt(var + LAYER_NORM_EPS)
    return (centered / std) * params[f"{name}.gamma"] + params[f"{name}.beta"]


def _window_partition(x: Var, window: int) -> Var:
    """(B, G, G, C) -> (B, nWin, window*window, C), row-major windows."""
    b, g, g2, c = x.shape
    n = g // window
    x = ad.reshape(x, (b, n, window, n, window, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, n * n, window * window, c))


def _window_merge(x: Var, grid: int, window: int) -> Var:
    """Inverse of _window_partition."""
    b = x.shape[0]
    c = x.shape[-1]
    n = grid // window
    x = ad.reshape(x, (b, n, n, window, window, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    return ad.reshape(x, (b, grid, grid, c))


def _split_heads(x: Var, heads: int) -> Var:
    """(..., T, C) -> (..., heads, T, C/heads)."""
    *lead, t, c = x.shape
    x = ad.reshape(x, (*lead, t, heads, c // heads))
    ndim = len(x.shape)
    perm = list(range(ndim - 3)) + [ndim - 2, ndim - 3, ndim - 1]
    return ad.transpose(x, perm)


def _merge_heads(x: Var) -> Var:
    *lead, h, t, dh = x.shape
    ndim = len(x.shape)
    perm = list(range(ndim - 3)) + [ndim - 2, ndim - 3, ndim - 1]
    x = ad.transpose(x, perm)
    return ad.reshape(x, (*lead, t, h * dh))


def _attend(q: Var, k: Var, v: Var, heads: int) -> Var:
    """Scaled dot-product attention; q may broadcast across window batches."""
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    head_dim = qh.shape[-1]
    ndim = len(kh.shape)
    kt = ad.transpose(kh, list(range(ndim - 2)) + [ndim - 1, ndim - 2])
    scores = ad.matmul(qh, kt) * (1.0 / np.sqrt(head_dim))
    attn = ad.softmax(scores)
    return _merge_heads(ad.matmul(attn, vh))


def _check_tokens(x: Var, config: BackboneConfig, stage: int, where: str) -> None:
    side = config.grid_side(stage)
    dim = config.stage_dims[stage]
    expected = (side, side, dim)
    if len(x.shape) != 4 or x.shape[1:] != expected:
        raise ShapeError(
            f"{where}: expected token field (B, {side}, {side}, {dim}), got {x.shape}"
        )


def patch_embed(img: Var | np.ndarray, params: ParamStore, config: BackboneConfig) -> Var:
    """Embed non-overlapping patches with one shared linear projection.

    Accepts (H, W) or (B, H, W); returns a (B, G, G, C) token field.
    """
    x = ad.as_var(img)
    if x.ndim == 2:
        x = ad.reshape(x, (1, *x.shape))
    if x.ndim != 3 or x.shape[1] != config.input_size or x.shape[2] != config.input_size:
        raise ShapeError(
            f"patch_embed: expected (B, {config.input_size}, {config.input_size}), got {x.shape}"
        )
    b = x.shape[0]
    g, p = config.grid_side(0), config.patch_size
    x = ad.reshape(x, (b, g, p, g, p))
    x = ad.transpose(x, (0, 1, 3, 2, 4))
    x = ad.reshape(x, (b, g, g, p * p))
    return _linear(x, params, "patch_embed")


def global_token_gen(
    tokens: Var, params: ParamStore, config: BackboneConfig, stage: int = 0
) -> Var:
    """One global token per window position: average-pool then project.

    (B, G, G, C) -> (B, window^2, C).
    """
    _check_tokens(tokens, config, stage, "global_token_gen")
    b, g, _, c = tokens.shape
    w = config.window_size
    block = g // w
    x = ad.reshape(tokens, (b, w, block, w, block, c))
    x = ad.mean(x, axis=(2, 4))
    x = ad.reshape(x, (b, w * w, c))
    return _linear(x, params, f"stages.{stage}.global_gen")


def local_window_attention(
    tokens: Var,
    params: ParamStore,
    config: BackboneConfig,
    stage: int = 0,
    block: int = 0,
) -> Var:
    """Pre-norm residual self-attention within non-overlapping windows."""
    _check_tokens(tokens, config, stage, "local_window_attention")
    g = config.grid_side(stage)
    w = config.window_size
    prefix = f"stages.{stage}.blocks.{block}"

    normed = _layer_norm(tokens, params, f"{prefix}.norm1")
    xw = _window_partition(normed, w)
    q = _linear(xw, params, f"{prefix}.attn.q")
    k = _linear(xw, params, f"{prefix}.attn.k")
    v = _linear(xw, params, f"{prefix}.attn.v")
    out = _attend(q, k, v, config.num_heads[stage])
    out = _linear(out, params, f"{prefix}.attn.proj")
    return tokens + _window_merge(out, g, w)


def global_query_attention(
    tokens: Var,
    global_tokens: Var,
    params: ParamStore,
    config: BackboneConfig,
    stage: int = 0,
    block: int = 1,
) -> Var:
    """Pre-norm residual attention: shared global queries, per-window keys/values."""
    _check_tokens(tokens, config, stage, "global_query_attention")
    w = config.window_size
    c = config.stage_dims[stage]
    if global_tokens.shape[1:] != (w * w, c):
        raise ShapeError(
            f"global_query_attention: expected global tokens (B, {w * w}, {c}), "
            f"got {global_tokens.shape}"
        )
    g = config.grid_side(stage)
    prefix = f"stages.{stage}.blocks.{block}"

    normed = _layer_norm(tokens, params, f"{prefix}.norm1")
    xw = _window_partition(normed, w)
    q = _linear(global_tokens, params, f"{prefix}.attn.q")
    q = ad.reshape(q, (q.shape[0], 1, w * w, c))  # broadcast across windows
    k = _linear(xw, params, f"{prefix}.attn.k")
    v = _linear(xw, params, f"{prefix}.attn.v")
    out = _attend(q, k, v, config.num_heads[stage])
    out = _linear(out, params, f"{prefix}.attn.proj")
    return tokens + _window_merge(out, g, w)


def _mlp_subblock(
    tokens: Var, params: ParamStore, config: BackboneConfig, stage: int, block: int
) -> Var:
    prefix = f"stages.{stage}.blocks.{block}"
    x = _layer_norm(tokens, params, f"{prefix}.norm2")
    x = ad.gelu(_linear(x, params, f"{prefix}.mlp.fc1"))
    x = _linear(x, params, f"{prefix}.mlp.fc2")
    return tokens + x


def downsample(tokens: Var, params: ParamStore, config: BackboneConfig, stage: int = 0) -> Var:
    """Merge 2x2 token groups and project to the next stage width."""
    _check_tokens(tokens, config, stage, "downsample")
    b, g, _, c = tokens.shape
    if g % 2 != 0:
        raise ShapeError(f"downsample: grid side {g} is odd")
    h = g // 2
    x = ad.reshape(tokens, (b, h, 2, h, 2, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, h, h, 4 * c))
    return _linear(x, params, f"downsample.{stage}")


def forward(img: Var | np.ndarray, params: ParamStore, config: BackboneConfig) -> Var:
    """Image(s) in [0, 1] -> feature vector(s) of length `config.feature_dim`.

    (H, W) input yields shape (feature_dim,); (B, H, W) yields
    (B, feature_dim).  Run inside `autodiff.no_grad()` for inference.
    """
    arr = img.value if isinstance(img, Var) else np.asarray(img)
    single = arr.ndim == 2
    x = patch_embed(img, params, config)
    for s in range(config.num_stages):
        g_tokens = global_token_gen(x, params, config, stage=s)
        for b in range(config.depths[s]):
            if b % 2 == 0:
                x = local_window_attention(x, params, config, stage=s, block=b)
            else:
                x = global_query_attention(x, g_tokens, params, config, stage=s, block=b)
            x = _mlp_subblock(x, params, config, stage=s, block=b)
        if s + 1 < config.num_stages:
            x = downsample(x, params, config, stage=s)
    x = _layer_norm(x, params, "final_norm")
    feats = ad.mean(x, axis=(1, 2))
    if single:
        feats = ad.reshape(feats, (config.feature_dim,))
    if not np.isfinite(feats.value).all():
        raise ShapeError("forward produced non-finite features")
    return feats


def backward(output: Var, upstream: np.ndarray | None = None) -> None:
    """Accumulate reverse-mode gradients into every parameter behind `output`.

    Raises StateError when the forward pass was not recorded (ran under
    `no_grad`).
    """
    output.backward(upstream)
