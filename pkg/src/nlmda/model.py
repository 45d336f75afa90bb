"""NLMDA-Net: channel attention, non-linear attention, depth attention and the
temporal/spatial convolution backbone.

Layout conventions: batches are ``[B, depth, channels, time]``. The forward
functions are pure apart from batch-norm running statistics, which train-mode
calls update in place.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    avg_pool,
    batch_norm,
    contract_expand,
    conv2d,
    factored_conv,
    gelu_op,
    hadamard,
    linear,
    reshape,
    scale,
    softmax_axis,
    tanh_op,
)


@dataclass(frozen=True)
class ModelConfig:
    C: int = 17
    T: int = 200
    D: int = 9
    temporal_kernels: int = 12
    temporal_len: int = 9
    spatial_kernels: int = 7
    depth_attn_kernel: int = 7
    attn_hidden: int = 16
    n_classes: int = 2
    f: int = 200
    N_t: int = 28497
    use_batchnorm: bool = True
    seed: int = 0

    def __post_init__(self):
        for f_ in fields(self):
            if f_.name in ("use_batchnorm", "seed"):
                continue
            if getattr(self, f_.name) < 1:
                raise ValueError(f"ModelConfig.{f_.name} must be positive")
        if self.temporal_len > self.T:
            raise ValueError("temporal_len exceeds T")
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")
        if self.k_pooling > self.T_conv:
            raise ValueError(
                f"pooling window {self.k_pooling} exceeds convolved length {self.T_conv}"
            )

    @property
    def k_pooling(self) -> int:
        return compute_k_pooling(self.f, self.N_t)

    @property
    def T_conv(self) -> int:
        """Time extent after the valid temporal convolution."""
        return self.T - self.temporal_len + 1

    @property
    def n_features(self) -> int:
        return self.spatial_kernels * (self.T_conv // self.k_pooling)


def compute_k_pooling(f: float, N_t: int) -> int:
    """Pooling width from sampling rate and training-set size.

    ``N = max(1, N_t // 200)``, then ``k = max(1, floor(f / 10 / N))``.
    """
    if f <= 0 or N_t < 1:
        raise ValueError(f"need f > 0 and N_t >= 1, got f={f}, N_t={N_t}")
    n = max(1, int(N_t) // 200)
    return max(1, math.floor(f / 10 / n))


# Checkpoint and param_count iterate in this order.
PARAM_ORDER = (
    "c", "W1", "b1", "W2",
    "temporal_w", "temporal_b", "bn1_gamma", "bn1_beta",
    "depth_w", "depth_b",
    "spatial_w", "spatial_b", "bn2_gamma", "bn2_beta",
    "fc_w", "fc_b",
)
_BN_PARAMS = {"bn1_gamma", "bn1_beta", "bn2_gamma", "bn2_beta"}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    cfg = config
    shapes = {
        "c": (cfg.D, 1, cfg.C),
        "W1": (cfg.attn_hidden, cfg.T),
        "b1": (cfg.attn_hidden,),
        "W2": (1, cfg.attn_hidden),
        "temporal_w": (cfg.temporal_kernels, cfg.D, 1, cfg.temporal_len),
        "temporal_b": (cfg.temporal_kernels,),
        "bn1_gamma": (cfg.temporal_kernels,),
        "bn1_beta": (cfg.temporal_kernels,),
        "depth_w": (1, 1, cfg.depth_attn_kernel, 1),
        "depth_b": (1,),
        "spatial_w": (cfg.spatial_kernels, cfg.temporal_kernels, cfg.C, 1),
        "spatial_b": (cfg.spatial_kernels,),
        "bn2_gamma": (cfg.spatial_kernels,),
        "bn2_beta": (cfg.spatial_kernels,),
        "fc_w": (cfg.n_classes, cfg.n_features),
        "fc_b": (cfg.n_classes,),
    }
    if not cfg.use_batchnorm:
        shapes = {k: v for k, v in shapes.items() if k not in _BN_PARAMS}
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form trainable parameter count."""
    cfg = config
    D, C, T, H = cfg.D, cfg.C, cfg.T, cfg.attn_hidden
    Kt, Ks, L = cfg.temporal_kernels, cfg.spatial_kernels, cfg.temporal_len
    total = (
        D * C                      # channel attention
        + H * T + H + H            # non-linear attention
        + Kt * D * L + Kt          # temporal conv
        + cfg.depth_attn_kernel + 1
        + Ks * Kt * C + Ks         # spatial conv
        + cfg.n_classes * cfg.n_features + cfg.n_classes
    )
    if cfg.use_batchnorm:
        total += 2 * Kt + 2 * Ks
    return total


@dataclass
class ModelParams:
    """Trainable arrays keyed by name, plus batch-norm running statistics."""

    config: ModelConfig
    arrays: dict[str, Tensor]
    bn_state: dict[str, RunningStats] = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.__dict__["arrays"][name]
        except KeyError:
            raise AttributeError(name) from None

    def tensors(self) -> list[Tensor]:
        return [self.arrays[k] for k in PARAM_ORDER if k in self.arrays]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.bn_state.items()},
        )


def init_params(config: ModelConfig, seed: int | None = None) -> ModelParams:
    """Seeded initialization.

    ``c`` is standard normal; other weights are N(0, 1/fan_in); biases zero;
    batch-norm scale one and shift zero.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name == "c":
            data = rng.standard_normal(shape)
        elif name.endswith("_gamma"):
            data = np.ones(shape)
        elif name.endswith(("_b", "_beta")) or name == "b1":
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) / math.sqrt(fan_in)
        arrays[name] = Tensor(data, requires_grad=True)
    bn_state = {}
    if config.use_batchnorm:
        bn_state = {
            "bn1": RunningStats.fresh(config.temporal_kernels),
            "bn2": RunningStats.fresh(config.spatial_kernels),
        }
    return ModelParams(config, arrays, bn_state)


def _check_input(x: Tensor, depth: int, cfg: ModelConfig) -> None:
    if x.ndim != 4 or x.shape[1:] != (depth, cfg.C, cfg.T):
        raise ShapeError(f"expected input [B,{depth},{cfg.C},{cfg.T}], got {x.shape}")


def channel_attention_forward(x: Tensor, params: ModelParams) -> Tensor:
    """Project each electrode's signal into ``D`` depth slices via ``c``."""
    _check_input(x, 1, params.config)
    return contract_expand(x, params.c)


def _attention_scores(x: Tensor, params: ModelParams) -> Tensor:
    """Softmax-over-channels weights alpha[b,d,ch] from a tanh MLP on the time axis."""
    B, D, C, T = x.shape
    rows = reshape(x, (B * D * C, T))
    hidden = tanh_op(linear(rows, params.W1, params.b1))
    scores = reshape(linear(hidden, params.W2), (B, D, C))
    return softmax_axis(scores, axis=2)


def nonlinear_attention_forward(x: Tensor, params: ModelParams) -> Tensor:
    _check_input(x, params.config.D, params.config)
    alpha = _attention_scores(x, params)
    B, D, C, _ = x.shape
    return hadamard(reshape(alpha, (B, D, C, 1)), x)


def depth_attention_forward(F: Tensor, params: ModelParams) -> Tensor:
    """Reweight feature maps along depth.

    Channels are averaged away, a short convolution mixes neighbouring depth
    slices at each time step, and the depth softmax is rescaled by the depth
    extent so a uniform map leaves ``F`` unchanged.
    """
    B, Do, Co, To = F.shape
    if Do < 1:
        raise ShapeError("depth attention needs at least one depth slice")
    pooled = avg_pool(F, (Co, 1))                      # B, Do, 1, To
    stacked = reshape(pooled, (B, 1, Do, To))          # depth onto the conv height axis
    mixed = conv2d(stacked, params.depth_w, params.depth_b, padding="same")
    weights = scale(softmax_axis(mixed, axis=2), float(Do))
    return hadamard(reshape(weights, (B, Do, 1, To)), F)


def _maybe_bn(x: Tensor, params: ModelParams, stage: str, training: bool) -> Tensor:
    if not params.config.use_batchnorm:
        return x
    return batch_norm(
        x, params.arrays[f"{stage}_gamma"], params.arrays[f"{stage}_beta"],
        params.bn_state[stage], training,
    )


def _after_temporal(h: Tensor, params: ModelParams, training: bool) -> Tensor:
    cfg = params.config
    h = gelu_op(_maybe_bn(h, params, "bn1", training))
    h = depth_attention_forward(h, params)
    h = conv2d(h, params.spatial_w, params.spatial_b)
    h = gelu_op(_maybe_bn(h, params, "bn2", training))
    h = avg_pool(h, (1, cfg.k_pooling))
    h = reshape(h, (h.shape[0], -1))
    return linear(h, params.fc_w, params.fc_b)


def benchmark_forward(x: Tensor, params: ModelParams, training: bool = False) -> Tensor:
    """Temporal conv, depth attention, spatial conv, pooling and the linear head."""
    cfg = params.config
    _check_input(x, cfg.D, cfg)
    h = conv2d(x, params.temporal_w, params.temporal_b)
    return _after_temporal(h, params, training)


def model_forward(x: Tensor, params: ModelParams, training: bool = False) -> Tensor:
    """Logits for a batch of raw epochs ``[B, 1, C, T]``.

    Numerically this is ``benchmark_forward(nonlinear_attention_forward(
    channel_attention_forward(x)))``. Both attention stages only rescale the
    single input slice per (depth, channel), so the expanded tensor is folded
    into the temporal kernel instead of being materialized.
    """
    cfg = params.config
    _check_input(x, 1, cfg)
    B = x.shape[0]
    expanded = contract_expand(x, params.c)
    alpha = _attention_scores(expanded, params)
    # s[b,d,ch] = alpha[b,d,ch] * c[d,0,ch]
    s = hadamard(alpha, reshape(params.c, (1, cfg.D, cfg.C)))
    raw = reshape(x, (B, cfg.C, cfg.T))
    h = factored_conv(raw, s, params.temporal_w, params.temporal_b)
    return _after_temporal(h, params, training)


def model_forward_reference(x: Tensor, params: ModelParams, training: bool = False) -> Tensor:
    """Unfused composition of the three stages."""
    h = channel_attention_forward(x, params)
    h = nonlinear_attention_forward(h, params)
    return benchmark_forward(h, params, training)


def layer_param_table(config: ModelConfig) -> list[tuple[str, int]]:
    """Per-layer parameter counts, in forward order."""
    shapes = param_shapes(config)
    groups = [
        ("channel_attention", ("c",)),
        ("nonlinear_attention", ("W1", "b1", "W2")),
        ("temporal_conv", ("temporal_w", "temporal_b")),
        ("batchnorm_temporal", ("bn1_gamma", "bn1_beta")),
        ("depth_attention", ("depth_w", "depth_b")),
        ("spatial_conv", ("spatial_w", "spatial_b")),
        ("batchnorm_spatial", ("bn2_gamma", "bn2_beta")),
        ("classifier", ("fc_w", "fc_b")),
    ]
    table = []
    for name, keys in groups:
        present = [k for k in keys if k in shapes]
        if present:
            table.append((name, sum(int(np.prod(shapes[k])) for k in present)))
    return table


def tiny_config(**overrides) -> ModelConfig:
    """Small geometry for finite-difference checks."""
    base = dict(C=3, T=20, D=2, temporal_kernels=4, temporal_len=9, spatial_kernels=3,
                depth_attn_kernel=3, attn_hidden=4, f=40, N_t=200, use_batchnorm=False, seed=7)
    base.update(overrides)
    return ModelConfig(**base)


__all__ = [
    "ModelConfig", "ModelParams", "compute_k_pooling", "param_count", "param_shapes",
    "init_params", "channel_attention_forward", "nonlinear_attention_forward",
    "depth_attention_forward", "benchmark_forward", "model_forward",
    "model_forward_reference", "layer_param_table", "tiny_config", "PARAM_ORDER",
]
