"""Uncertainty-aware radiance field over the 2D plane, trained online from observed rays."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import render as R
from . import tensor as T


@dataclass
class FieldConfig:
    pos_freqs: int = 8
    dir_freqs: int = 4
    hidden: int = 64
    feat_dim: int = 16
    n_samples: int = 32
    near: float = 0.05
    far: float = 16.97  # grid diagonal of the default 12x12 scene
    beta_min: float = 0.01
    extent: float = 12.0  # positions are mapped from [0, extent] to [-1, 1] before encoding

    def __post_init__(self):
        if not self.near < self.far:
            raise ValueError(f"near ({self.near}) must be < far ({self.far})")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.beta_min <= 0:
            raise ValueError("beta_min must be positive")

    @classmethod
    def for_scene(cls, scene, **kw) -> "FieldConfig":
        h, w = scene.shape
        kw = {"far": scene.diagonal, "extent": float(max(h, w)), **kw}
        return cls(**kw)


def positional_encode(v: np.ndarray, n_freqs: int) -> np.ndarray:
    """Per component: the raw value then sin/cos pairs at 2^k pi, k < n_freqs.

    ``v`` has shape (N, dim) (or (dim,)); output is (N, dim * (1 + 2 n_freqs)).
    """
    if n_freqs < 0:
        raise ValueError("n_freqs must be >= 0")
    v = np.atleast_2d(np.asarray(v, dtype=float))
    out = np.empty(v.shape + (1 + 2 * n_freqs,))
    out[..., 0] = v
    if n_freqs:
        s, c = np.sin(math.pi * v), np.cos(math.pi * v)
        for k in range(n_freqs):
            out[..., 1 + 2 * k] = s
            out[..., 2 + 2 * k] = c
            # double-angle recurrence; drift stays ~1e-13 for the frequency counts used here
            s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
    return out.reshape(v.shape[0], -1)


@dataclass
class FieldOutput:
    sigma: T.Tensor  # (N,)
    feat: T.Tensor  # (N, feat_dim)
    beta2: T.Tensor  # (N,)
    color: T.Tensor  # (N, 3)


class RadianceField(nn.Module):
    """Trunk -> (density, variance, intermediate features); colour head -> (features, colour).

    The colour head's hidden layer doubles as the per-sample feature that the
    spatial feature map composites.
    """

    def __init__(self, config: FieldConfig, rng: np.random.Generator):
        self.config = config
        c = config
        px = 2 * (1 + 2 * c.pos_freqs)
        pd = 1 + 2 * c.dir_freqs
        self.trunk1 = nn.Linear(px, c.hidden, rng)
        self.trunk2 = nn.Linear(c.hidden, c.hidden, rng)
        self.sigma_head = nn.Linear(c.hidden, 1, rng, gain=1.0)
        self.beta_head = nn.Linear(c.hidden, 1, rng, gain=1.0)
        self.color_hidden = nn.Linear(c.hidden + pd, c.feat_dim, rng)
        self.color_out = nn.Linear(c.feat_dim, 3, rng, gain=1.0)

    def encode(self, points: np.ndarray, angles: np.ndarray, dir_repeat: int = 1):
        c = self.config
        gx = positional_encode(2.0 * points / c.extent - 1.0, c.pos_freqs)
        gd = positional_encode(np.asarray(angles, dtype=float).reshape(-1, 1) / math.pi, c.dir_freqs)
        if dir_repeat > 1:
            gd = np.repeat(gd, dir_repeat, axis=0)
        return gx, gd

    def __call__(self, points: np.ndarray, angles: np.ndarray, dir_repeat: int = 1) -> FieldOutput:
        """``angles`` holds one heading per point, or per ray when ``dir_repeat`` > 1."""
        gx, gd = self.encode(points, angles, dir_repeat)
        h = T.relu(self.trunk1(gx))
        h = T.relu(self.trunk2(h))
        n = h.shape[0]
        sigma = T.reshape(T.softplus(self.sigma_head(h)), (n,))
        beta2 = T.reshape(T.softplus(self.beta_head(h)), (n,)) + self.config.beta_min
        feat = T.relu(self.color_hidden(T.concat([h, T.Tensor(gd)], axis=1)))
        color = T.sigmoid(self.color_out(feat))
        return FieldOutput(sigma=sigma, feat=feat, beta2=beta2, color=color)


def field_forward(field: RadianceField, points, angles) -> FieldOutput:
    """Evaluate the field and refuse non-finite outputs."""
    out = field(points, angles)
    for name in ("sigma", "feat", "beta2", "color"):
        arr = getattr(out, name).data
        bad = np.argwhere(~np.isfinite(arr))
        if len(bad):
            raise T.NumericalError(f"non-finite {name} at index {tuple(bad[0])}")
    return out


def nll_loss(mean, variance, gt):
    """Mean over rays of |C - C_bar|^2 / (2 var) + log(var) / 2."""
    variance = T.as_tensor(variance)
    if np.any(variance.data <= 0):
        raise T.ContractError("rendered variance must be positive")
    resid = T.tsum(T.square(T.sub(gt, mean)), axis=1)
    per_ray = T.add(T.div(resid, T.mul(variance, 2.0)), T.mul(T.log(variance), 0.5))
    return T.mean(per_ray)


class ReplayBuffer:
    """Fixed-capacity ring of observed rays; the oldest rays are evicted first."""

    def __init__(self, capacity: int = 50_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.origins = np.zeros((capacity, 2))
        self.angles = np.zeros(capacity)
        self.colors = np.zeros((capacity, 3))
        self._next = 0
        self.size = 0
        self.total = 0

    def __len__(self):
        return self.size

    def add(self, origins, angles, colors) -> None:
        origins = np.atleast_2d(origins)
        n = len(origins)
        idx = (self._next + np.arange(n)) % self.capacity
        self.origins[idx] = origins
        self.angles[idx] = angles
        self.colors[idx] = colors
        self._next = int((self._next + n) % self.capacity)
        self.size = min(self.capacity, self.size + n)
        self.total += n

    def ordered(self):
        """Contents oldest-first."""
        if self.size < self.capacity:
            sl = np.arange(self.size)
        else:
            sl = (self._next + np.arange(self.capacity)) % self.capacity
        return self.origins[sl], self.angles[sl], self.colors[sl]

    def sample(self, n: int, rng: np.random.Generator):
        if self.size == 0:
            raise T.ContractError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=n)
        return self.origins[idx], self.angles[idx], self.colors[idx]


def add_observation(buffer: ReplayBuffer, pose, strip) -> None:
    """One ray per strip column, from the agent position along that column's heading."""
    w = strip.width
    if len(strip.angles) != w or strip.rgb.shape != (w, 3):
        raise ValueError("strip geometry does not match its width")
    buffer.add(np.tile([pose.x, pose.y], (w, 1)), strip.angles, strip.rgb)


def ray_loss(field: RadianceField, origins, angles, colors, rng, mode="stratified"):
    cfg = field.config
    depths = R.sample_depths(cfg.near, cfg.far, cfg.n_samples, mode, rng, n_rays=len(origins))
    ray = R.sample_rays(field, origins, angles, depths)
    return nll_loss(R.render_color(ray), R.render_loss_variance(ray, cfg.beta_min), colors)


def train_step(field: RadianceField, buffer: ReplayBuffer, batch: int, opt: T.OptimizerState,
               rng: np.random.Generator) -> float:
    """Sample ``batch`` rays, take one Adam step on the NLL loss, return the loss."""
    origins, angles, colors = buffer.sample(batch, rng)
    params = field.parameters()
    T.zero_grad(params)
    loss = ray_loss(field, origins, angles, colors, rng)
    loss.backward()
    T.adam_step(params, opt)
    return loss.item()


def photometric_error(field: RadianceField, origins, angles, colors) -> float:
    """Mean squared colour error of midpoint renders (no gradient)."""
    cfg = field.config
    with T.no_grad():
        depths = R.sample_depths(cfg.near, cfg.far, cfg.n_samples, "midpoint", n_rays=len(origins))
        ray = R.sample_rays(field, origins, angles, depths)
        pred = R.render_color(ray).data
    return float(np.mean(np.sum((pred - colors) ** 2, axis=1)))
