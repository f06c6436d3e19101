"""Quadrature along rays: compositing weights, colour, uncertainty and feature maps."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T


def sample_depths(near: float, far: float, n_samples: int, mode: str = "midpoint",
                  rng: np.random.Generator | None = None, n_rays: int | None = None) -> np.ndarray:
    """Bin centres (``midpoint``) or one uniform draw per bin (``stratified``).

    Returns shape ``(n_samples,)``, or ``(n_rays, n_samples)`` when ``n_rays`` is given.
    """
    if not near < far:
        raise ValueError(f"need near < far, got {near}, {far}")
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    width = (far - near) / n_samples
    lo = near + width * np.arange(n_samples)
    shape = (n_samples,) if n_rays is None else (n_rays, n_samples)
    if mode == "midpoint":
        return np.broadcast_to(lo + 0.5 * width, shape).copy()
    if mode == "stratified":
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        return lo + width * rng.random(shape)
    raise ValueError(f"unknown sampling mode {mode!r}")


def deltas_from_depths(depths: np.ndarray, far: float) -> np.ndarray:
    last = far - depths[..., -1:]
    return np.concatenate([np.diff(depths, axis=-1), last], axis=-1)


def compute_alphas(sigma, deltas):
    """alpha_i = T_i * (1 - exp(-sigma_i delta_i)), T_i = exp(-sum_{j<i} sigma_j delta_j).

    Works row-wise over the last axis.
    """
    sd = T.mul(sigma, deltas)
    before = T.sub(T.cumsum(sd, axis=-1), sd)
    return T.mul(T.exp(T.neg(before)), T.sub(1.0, T.exp(T.neg(sd))))


@dataclass
class SampledRay:
    """Per-sample field outputs for a batch of R rays with N samples each."""

    depths: np.ndarray  # (R, N)
    deltas: np.ndarray  # (R, N)
    sigma: T.Tensor  # (R, N)
    feat: T.Tensor  # (R, N, D)
    beta2: T.Tensor  # (R, N)
    color: T.Tensor  # (R, N, 3)
    _alphas: T.Tensor | None = None

    @property
    def alphas(self) -> T.Tensor:
        if self._alphas is None:
            self._alphas = compute_alphas(self.sigma, self.deltas)
        return self._alphas


def _weighted(alphas, values):
    return T.tsum(T.mul(T.reshape(alphas, alphas.shape + (1,)), values), axis=1)


def render_color(ray: SampledRay):
    """(R, 3) composited mean colour; empty space composites to black."""
    return _weighted(ray.alphas, ray.color)


def render_uncertainty(ray: SampledRay):
    """(R,) linear-weight composite of the per-sample variance: the uncertainty map."""
    return T.tsum(T.mul(ray.alphas, ray.beta2), axis=1)


def render_loss_variance(ray: SampledRay, beta_min: float = 0.01):
    """(R,) squared-weight composite used by the NLL loss, floored at ``beta_min``."""
    a = ray.alphas
    return T.clamp_min(T.tsum(T.mul(T.mul(a, a), ray.beta2), axis=1), beta_min)


def render_features(ray: SampledRay):
    """(R, D) composited colour-head features."""
    return _weighted(ray.alphas, ray.feat)


def render_depth(ray: SampledRay) -> np.ndarray:
    return np.sum(ray.alphas.data * ray.depths, axis=1)


def sample_rays(field, origins: np.ndarray, angles: np.ndarray, depths: np.ndarray) -> SampledRay:
    """Query ``field`` at every sample of every ray.  ``depths``: (R, N)."""
    r, n = depths.shape
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    pts = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    out = field(pts.reshape(r * n, 2), angles, dir_repeat=n)
    far = field.config.far
    return SampledRay(
        depths=depths,
        deltas=deltas_from_depths(depths, far),
        sigma=T.reshape(out.sigma, (r, n)),
        feat=T.reshape(out.feat, (r, n, out.feat.shape[-1])),
        beta2=T.reshape(out.beta2, (r, n)),
        color=T.reshape(out.color, (r, n, 3)),
    )


@dataclass
class Maps:
    color: T.Tensor  # (W, 3)
    uncertainty: T.Tensor  # (1, W)
    features: T.Tensor  # (D_f, W)
    depth: np.ndarray  # (W,)


def render_maps(field, pose, width: int, fov: float = math.pi / 2) -> Maps:
    """Render the colour strip, uncertainty map and feature map seen from ``pose``."""
    from .world import strip_angles

    cfg = field.config
    angles = strip_angles(pose.theta, width, fov)
    origins = np.tile([pose.x, pose.y], (width, 1))
    depths = sample_depths(cfg.near, cfg.far, cfg.n_samples, "midpoint", n_rays=width)
    ray = sample_rays(field, origins, angles, depths)
    iu = render_uncertainty(ray)
    feats = render_features(ray)
    return Maps(
        color=render_color(ray),
        uncertainty=T.reshape(iu, (1, width)),
        features=T.transpose(feats, (1, 0)),
        depth=render_depth(ray),
    )
