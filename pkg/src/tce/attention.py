"""Channel and spatial attention gates with a residual wrapper.

The channel gate squeezes the spatial axes by average and max pooling,
pushes both pooled vectors through one shared bottleneck MLP, and
sigmoids the sum. The spatial gate pools across channels, concatenates
the two maps, and applies a 3x3 convolution followed by a sigmoid. The
block applies the channel gate, then the spatial gate, then adds the
block's original input back (residual), so zeroed attention parameters
reduce the block to an exact 1.25x scaling of its input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    channel_pool,
    concat_channels,
    conv2d,
    global_avgpool_spatial,
    global_maxpool_spatial,
    linear,
    mul_broadcast,
    relu,
    reshape,
    sigmoid,
)


@dataclass
class ChannelAttnParams:
    """Shared bottleneck MLP (c -> c/r -> c) used by both pooling branches."""

    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    reduction: int

    @classmethod
    def init(cls, channels: int, reduction: int, rng: np.random.Generator,
             dtype=np.float32, std: float = 0.02) -> "ChannelAttnParams":
        if reduction < 1 or channels % reduction != 0:
            raise ValueError(f"reduction {reduction} must divide channels {channels}")
        hidden = channels // reduction
        return cls(
            fc1_weight=Tensor(rng.normal(0, std, (hidden, channels)).astype(dtype), requires_grad=True),
            fc1_bias=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            fc2_weight=Tensor(rng.normal(0, std, (channels, hidden)).astype(dtype), requires_grad=True),
            fc2_bias=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            reduction=reduction,
        )

    @property
    def channels(self) -> int:
        return self.fc2_weight.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.fc1.weight": self.fc1_weight,
            f"{prefix}.fc1.bias": self.fc1_bias,
            f"{prefix}.fc2.weight": self.fc2_weight,
            f"{prefix}.fc2.bias": self.fc2_bias,
        }


@dataclass
class SpatialAttnParams:
    """3x3 conv over the 2-channel concat of channel-avg and channel-max maps."""

    conv_weight: Tensor
    conv_bias: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, dtype=np.float32,
             std: float = 0.02) -> "SpatialAttnParams":
        return cls(
            conv_weight=Tensor(rng.normal(0, std, (1, 2, 3, 3)).astype(dtype), requires_grad=True),
            conv_bias=Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.conv.weight": self.conv_weight,
            f"{prefix}.conv.bias": self.conv_bias,
        }


@dataclass
class AttnBlockOutput:
    f_c: Tensor       # channel-gated map
    f_s: Tensor       # spatially gated map
    f_prime: Tensor   # residual output, same shape as the input
    attn_c: Tensor    # (N, C, 1, 1), values in (0, 1)
    attn_s: Tensor    # (N, 1, H, W), values in (0, 1)


def _shared_mlp(pooled: Tensor, p: ChannelAttnParams) -> Tensor:
    n, c = pooled.shape[0], pooled.shape[1]
    v = reshape(pooled, (n, c))
    h = relu(linear(v, p.fc1_weight, p.fc1_bias))
    return linear(h, p.fc2_weight, p.fc2_bias)


def channel_attention(f: Tensor, p: ChannelAttnParams) -> Tensor:
    """Per-channel gate in (0,1): sigmoid(MLP(avgpool F) + MLP(maxpool F))."""
    if f.data.ndim != 4:
        raise ShapeError(f"expected 4-d feature map, got {f.shape}")
    if f.shape[1] != p.channels:
        raise ShapeError(
            f"channel mismatch: feature map has {f.shape[1]} channels, params expect {p.channels}")
    avg_branch = _shared_mlp(global_avgpool_spatial(f), p)
    max_branch = _shared_mlp(global_maxpool_spatial(f), p)
    gate = sigmoid(add(avg_branch, max_branch))
    return reshape(gate, (f.shape[0], f.shape[1], 1, 1))


def spatial_attention(f_c: Tensor, p: SpatialAttnParams) -> Tensor:
    """Per-position gate in (0,1): sigmoid(conv3x3(concat(avg, max across channels)))."""
    if f_c.data.ndim != 4:
        raise ShapeError(f"expected 4-d feature map, got {f_c.shape}")
    avg, mx = channel_pool(f_c)
    stacked = concat_channels(avg, mx)
    return sigmoid(conv2d(stacked, p.conv_weight, p.conv_bias, stride=(1, 1), pad=(1, 1)))


def attention_block(f: Tensor, cp: ChannelAttnParams, sp: SpatialAttnParams) -> AttnBlockOutput:
    """Channel gate, then spatial gate, then residual add of the original input."""
    attn_c = channel_attention(f, cp)
    f_c = mul_broadcast(attn_c, f)
    attn_s = spatial_attention(f_c, sp)
    f_s = mul_broadcast(attn_s, f_c)
    f_prime = add(f, f_s)
    return AttnBlockOutput(f_c=f_c, f_s=f_s, f_prime=f_prime, attn_c=attn_c, attn_s=attn_s)
