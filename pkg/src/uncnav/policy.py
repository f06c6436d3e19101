"""Navigation policy: perception encoder, adaptive fusion of the three feature streams, action head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import extractors as X
from . import nn
from . import render as R
from . import tensor as T
from .world import Action

N_ACTIONS = len(Action)


@dataclass
class PolicyConfig:
    width: int = 64
    feat_dim: int = 16
    use_f_u: bool = True
    use_aux: bool = True
    use_cbam: bool = True
    lambda_aux: float = 0.5

    def __post_init__(self):
        if self.width % X.DOWNSAMPLE:
            raise ValueError(f"width must be a multiple of {X.DOWNSAMPLE}, got {self.width}")
        if self.lambda_aux < 0:
            raise ValueError("lambda_aux must be non-negative")

    @property
    def effective_lambda(self) -> float:
        return self.lambda_aux if self.use_aux else 0.0

    def flags(self) -> str:
        off = [name for name, on in (("fu", self.use_f_u), ("at", self.use_aux), ("cbam", self.use_cbam)) if not on]
        return "full" if not off else "no-" + "-".join(off)


@dataclass
class StepInputs:
    """Everything the policy sees at one step, batched along the first axis."""

    obs: np.ndarray  # (B, 4, W) rgb + normalised depth
    uncertainty: T.Tensor  # (B, 1, W)
    cognition: T.Tensor  # (B, D_f, W)
    target: np.ndarray  # (B, 3, W)

    @property
    def batch(self) -> int:
        return self.obs.shape[0]


def perceive(field, pose, strip, target_strip, fov: float, detach_field: bool = False) -> StepInputs:
    """Render the field's maps from ``pose`` and package them with the live and target strips.

    Both rendered maps keep their graph back into the field unless ``detach_field`` is set.
    """
    width = strip.width
    if detach_field:
        with T.no_grad():
            maps = R.render_maps(field, pose, width, fov)
    else:
        maps = R.render_maps(field, pose, width, fov)
    return StepInputs(
        obs=strip.stacked()[None],
        uncertainty=T.reshape(maps.uncertainty, (1,) + maps.uncertainty.shape),
        cognition=T.reshape(maps.features, (1,) + maps.features.shape),
        target=target_strip.rgb.T[None].copy(),
    )


def stack_inputs(items: list[StepInputs]) -> StepInputs:
    return StepInputs(
        obs=np.concatenate([s.obs for s in items]),
        uncertainty=T.concat([s.uncertainty for s in items], axis=0),
        cognition=T.concat([s.cognition for s in items], axis=0),
        target=np.concatenate([s.target for s in items]),
    )


class PerceptionEncoder(nn.Module):
    """(B, 4, W) strip -> two stride-4 convolutions -> (B, 64)."""

    def __init__(self, width: int, rng: np.random.Generator):
        self.conv1 = nn.Conv1d(4, 8, 4, rng, stride=4)
        self.conv2 = nn.Conv1d(8, 16, 4, rng, stride=4)
        self.head = nn.Linear(16 * width // X.DOWNSAMPLE, X.FEATURE_LEN, rng)

    def __call__(self, obs):
        h = T.relu(self.conv2(T.relu(self.conv1(obs))))
        return T.relu(self.head(T.flatten(h)))


class Fusion(nn.Module):
    """w = sigmoid(MLP(f_cat1)); f_cat2 = relu(Linear(w * f_cat1))."""

    def __init__(self, rng: np.random.Generator, n_streams: int = 3):
        n = n_streams * X.FEATURE_LEN
        self.n_in = n
        self.attn = nn.Linear(n, n, rng, gain=1.0)
        self.out = nn.Linear(n, X.FEATURE_LEN, rng)

    def weights(self, cat):
        return T.sigmoid(self.attn(cat))

    def __call__(self, f_cog, f_u, f_p):
        parts = [T.as_tensor(f) for f in (f_cog, f_u, f_p)]
        for p in parts:
            if p.shape[-1] != X.FEATURE_LEN:
                raise T.ShapeError(f"fusion inputs must have length {X.FEATURE_LEN}, got {p.shape}")
        cat = T.concat(parts, axis=1)
        return T.relu(self.out(cat * self.weights(cat)))


class ActionHead(nn.Module):
    def __init__(self, rng: np.random.Generator, hidden: int = 64):
        self.fc1 = nn.Linear(X.FEATURE_LEN, hidden, rng)
        self.fc2 = nn.Linear(hidden, N_ACTIONS, rng, gain=1.0)

    def __call__(self, f_cat2):
        return self.fc2(T.relu(self.fc1(f_cat2)))


@dataclass
class PolicyOutput:
    logits: T.Tensor  # (B, 4)
    log_probs: T.Tensor  # (B, 4)
    angle: T.Tensor  # (B,)
    f_cog: T.Tensor
    f_u: T.Tensor
    f_p: T.Tensor

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)


class Policy(nn.Module):
    def __init__(self, config: PolicyConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.perception = PerceptionEncoder(c.width, rng)
        self.uncertainty = X.UncertaintyExtractor(c.width, rng, use_cbam=c.use_cbam) if c.use_f_u else None
        self.spatial = X.SpatialExtractor(c.width, c.feat_dim, rng, use_cbam=c.use_cbam)
        self.angle_head = X.AngleHead(rng)
        self.fusion = Fusion(rng)
        self.action_head = ActionHead(rng)

    def __call__(self, inputs: StepInputs) -> PolicyOutput:
        f_p = self.perception(inputs.obs)
        f_cog = self.spatial(inputs.cognition, inputs.target)
        if self.uncertainty is not None:
            f_u = self.uncertainty(inputs.uncertainty)
        else:
            f_u = T.Tensor(np.zeros((inputs.batch, X.FEATURE_LEN)))
        logits = self.action_head(self.fusion(f_cog, f_u, f_p))
        return PolicyOutput(
            logits=logits,
            log_probs=T.log_softmax(logits),
            angle=self.angle_head(f_cog),
            f_cog=f_cog,
            f_u=f_u,
            f_p=f_p,
        )


def action_distribution(logits) -> np.ndarray:
    """Softmax over the last axis (numpy in, numpy out)."""
    with T.no_grad():
        return T.softmax(T.as_tensor(logits)).data


def select_action(probs: np.ndarray, mode: str = "sample", rng: np.random.Generator | None = None) -> Action:
    probs = np.asarray(probs, dtype=float)
    if mode == "greedy":
        return Action(int(np.argmax(probs)))
    if mode != "sample":
        raise ValueError(f"unknown selection mode {mode!r}")
    if rng is None:
        raise ValueError("sample mode needs an rng")
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return Action(min(idx, N_ACTIONS - 1))


@dataclass
class LossParts:
    total: T.Tensor
    ce: float
    aux: float


def imitation_loss(out: PolicyOutput, expert_actions, true_angles, lambda_aux: float) -> LossParts:
    """Mean over the batch of cross-entropy to the expert plus ``lambda_aux`` times circular L1."""
    expert_actions = np.asarray(expert_actions, dtype=int).reshape(-1)
    onehot = np.zeros(out.log_probs.shape)
    onehot[np.arange(len(expert_actions)), expert_actions] = 1.0
    ce = T.neg(T.mean(T.tsum(out.log_probs * onehot, axis=1)))
    aux = T.mean(X.circular_l1(out.angle, np.asarray(true_angles, dtype=float).reshape(-1)))
    total = ce + aux * float(lambda_aux)
    return LossParts(total=total, ce=ce.item(), aux=aux.item())


def saliency_over_uncertainty(policy: Policy, inputs: StepInputs, action: int | None = None) -> np.ndarray:
    """|d logit_action / d uncertainty| per pixel, max-normalised to [0, 1]; shape (B, 1, W)."""
    unc = T.parameter(inputs.uncertainty.data.copy())
    probe = StepInputs(obs=inputs.obs, uncertainty=unc, cognition=T.Tensor(inputs.cognition.data),
                       target=inputs.target)
    out = policy(probe)
    chosen = np.argmax(out.logits.data, axis=1) if action is None else np.full(inputs.batch, int(action))
    onehot = np.zeros(out.logits.shape)
    onehot[np.arange(inputs.batch), chosen] = 1.0
    T.tsum(out.logits * onehot).backward()
    policy.zero_grad()
    if unc.grad is None:
        return np.zeros(unc.shape)
    sal = np.abs(unc.grad)
    peak = sal.max(axis=(1, 2), keepdims=True)
    return np.divide(sal, peak, out=np.zeros_like(sal), where=peak > 0)
