"""Feature extraction from the rendered maps: residual compression, attention, and the angle head.

Everything works on batched 1D feature maps shaped ``(B, C, L)``.
"""

from __future__ import annotations

import math

import numpy as np

from . import nn
from . import tensor as T

DOWNSAMPLE = 16  # two residual blocks of stride 4
FEATURE_LEN = 64


class ResidualBlock(nn.Module):
    """relu(conv3(relu(conv3_stride4(x))) + proj1x1_stride4(x))."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 4):
        self.conv1 = nn.Conv1d(c_in, c_out, 3, rng, stride=stride, padding=1)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.skip = nn.Conv1d(c_in, c_out, 1, rng, stride=stride)

    def __call__(self, x):
        h = self.conv2(T.relu(self.conv1(x)))
        return T.relu(h + self.skip(x))


class ResidualCompressor(nn.Module):
    """Two cascaded residual blocks: ``(B, c_in, L)`` -> ``(B, c_out, L / 16)``."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.blocks = [ResidualBlock(c_in, c_out, rng), ResidualBlock(c_out, c_out, rng)]

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim != 3:
            raise T.ShapeError(f"expected (B, C, L) input, got {x.shape}")
        if x.shape[-1] % DOWNSAMPLE:
            raise T.ShapeError(f"length {x.shape[-1]} is not divisible by {DOWNSAMPLE}")
        for block in self.blocks:
            x = block(x)
        return x


class ChannelAttention(nn.Module):
    """Shared two-layer perceptron over avg- and max-pooled channel descriptors.

    Returns ``(B, C, 1)`` weights in (0, 1).
    """

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden, rng)
        self.fc2 = nn.Linear(hidden, channels, rng, gain=1.0)

    def mlp(self, v):
        return self.fc2(T.relu(self.fc1(v)))

    def __call__(self, fmap):
        b, c, _ = fmap.shape
        avg = T.reshape(T.avg_pool(fmap, axis=2), (b, c))
        mx = T.reshape(T.max_pool(fmap, axis=2), (b, c))
        return T.reshape(T.sigmoid(self.mlp(avg) + self.mlp(mx)), (b, c, 1))


class SpatialAttention(nn.Module):
    """Convolution over the [channel-mean, channel-max] pair; returns ``(B, 1, L)`` in (0, 1)."""

    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.conv = nn.Conv1d(2, 1, kernel, rng, padding=kernel // 2, gain=1.0)

    def __call__(self, fmap):
        pooled = T.concat([T.avg_pool(fmap, axis=1), T.max_pool(fmap, axis=1)], axis=1)
        return T.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Channel attention then spatial attention, each applied multiplicatively."""

    def __init__(self, channels: int, rng: np.random.Generator, reduction: int = 4):
        self.channel = ChannelAttention(channels, rng, reduction)
        self.spatial = SpatialAttention(rng)

    def __call__(self, fmap):
        fmap = fmap * self.channel(fmap)
        return fmap * self.spatial(fmap)


class UncertaintyExtractor(nn.Module):
    """Uncertainty map ``(B, 1, W)`` -> exploration feature ``(B, 64)``."""

    def __init__(self, width: int, rng: np.random.Generator, channels: int = 16, use_cbam: bool = True):
        if width % DOWNSAMPLE:
            raise T.ShapeError(f"width {width} is not divisible by {DOWNSAMPLE}")
        self.use_cbam = use_cbam
        self.compress = ResidualCompressor(1, channels, rng)
        self.cbam = CBAM(channels, rng) if use_cbam else None
        self.head = nn.Linear(channels * width // DOWNSAMPLE, FEATURE_LEN, rng)

    def feature_map(self, unc):
        fmap = self.compress(unc)
        return self.cbam(fmap) if self.use_cbam else fmap

    def __call__(self, unc):
        return T.relu(self.head(T.flatten(self.feature_map(unc))))


class SpatialExtractor(nn.Module):
    """Rendered feature map ``(B, D_f, W)`` plus target strip ``(B, 3, W)`` -> ``(B, 64)``."""

    def __init__(self, width: int, feat_dim: int, rng: np.random.Generator, channels: int = 32,
                 use_cbam: bool = True):
        if width % DOWNSAMPLE:
            raise T.ShapeError(f"width {width} is not divisible by {DOWNSAMPLE}")
        self.use_cbam = use_cbam
        self.in_channels = feat_dim + 3
        self.compress = ResidualCompressor(self.in_channels, channels, rng)
        self.cbam = CBAM(channels, rng) if use_cbam else None
        self.head = nn.Linear(channels * width // DOWNSAMPLE, FEATURE_LEN, rng)

    def __call__(self, cog, target):
        cog, target = T.as_tensor(cog), T.as_tensor(target)
        if cog.shape[-1] != target.shape[-1]:
            raise T.ShapeError(f"feature map length {cog.shape[-1]} != target length {target.shape[-1]}")
        fmap = self.compress(T.concat([cog, target], axis=1))
        if self.use_cbam:
            fmap = self.cbam(fmap)
        return T.relu(self.head(T.flatten(fmap)))


def wrap_angle_tensor(x):
    """Shift by whole turns into (-pi, pi]; the shift is constant so gradients pass unchanged."""
    x = T.as_tensor(x)
    shift = 2 * math.pi * np.ceil((x.data - math.pi) / (2 * math.pi))
    return x - shift


class AngleHead(nn.Module):
    """Two-layer perceptron from the spatial feature to a bearing in (-pi, pi]."""

    def __init__(self, rng: np.random.Generator, hidden: int = 32):
        self.fc1 = nn.Linear(FEATURE_LEN, hidden, rng)
        self.fc2 = nn.Linear(hidden, 1, rng, gain=1.0)

    def __call__(self, f_cog):
        out = self.fc2(T.relu(self.fc1(f_cog)))
        return wrap_angle_tensor(T.reshape(out, (out.shape[0],)))


def circular_l1(pred, target):
    """Per-sample min over k in {-1, 0, 1} of |pred - target + 2 pi k|, in [0, pi] for wrapped inputs."""
    pred = T.as_tensor(pred)
    diff = pred - np.asarray(target, dtype=float)
    cands = diff.data[..., None] + 2 * math.pi * np.array([-1.0, 0.0, 1.0])
    k = np.argmin(np.abs(cands), axis=-1) - 1
    return T.tabs(diff + 2 * math.pi * k)
