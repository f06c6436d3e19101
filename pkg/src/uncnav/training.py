"""Imitation learning of the navigation policy from the geodesic expert."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import policy as P
from . import tensor as T
from . import world as W
from .evaluation import AgentSettings, OnlineField, circular_error
from .seeding import stream

MODES = ("aggregate", "episode")


@dataclass
class TrainSettings:
    episodes: int = 300
    mode: str = "aggregate"
    expert_start: float = 1.0  # probability that the expert's action is executed
    expert_end: float = 0.25
    anneal_fraction: float = 0.5  # share of training over which the mixture is annealed
    policy_lr: float = 1e-3
    updates_per_episode: int = 2  # aggregate mode: minibatch steps after each episode
    minibatch: int = 32
    dataset_capacity: int = 4000
    tiers: tuple = ("easy",)
    max_steps: int = 60  # step budget of a training episode
    detach_field: bool = True  # episode mode: stop policy gradients at the field maps
    checkpoint_every: int = 25

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.expert_end <= 1.0 or not 0.0 <= self.expert_start <= 1.0:
            raise ValueError("expert probabilities must lie in [0, 1]")
        if not 0.0 < self.anneal_fraction <= 1.0:
            raise ValueError("anneal_fraction must lie in (0, 1]")
        if self.episodes < 1 or self.minibatch < 1 or self.dataset_capacity < 1:
            raise ValueError("episodes, minibatch and dataset_capacity must be positive")
        bad = [t for t in self.tiers if t not in W.TIERS]
        if bad:
            raise ValueError(f"unknown tiers {bad}")


def expert_probability(episode: int, settings: TrainSettings) -> float:
    """Linear anneal from ``expert_start`` to ``expert_end``, then constant."""
    horizon = max(1.0, settings.anneal_fraction * settings.episodes)
    frac = min(1.0, episode / horizon)
    return settings.expert_start + frac * (settings.expert_end - settings.expert_start)


class Dataset:
    """Ring buffer of detached policy inputs with expert labels (the aggregated imitation set)."""

    def __init__(self, capacity: int, width: int, feat_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, 4, width))
        self.unc = np.zeros((capacity, 1, width))
        self.cog = np.zeros((capacity, feat_dim, width))
        self.target = np.zeros((capacity, 3, width))
        self.action = np.zeros(capacity, dtype=int)
        self.angle = np.zeros(capacity)
        self.size = 0
        self.next = 0

    def add(self, inputs: P.StepInputs, action: int, angle: float) -> None:
        i = self.next
        self.obs[i] = inputs.obs[0]
        self.unc[i] = inputs.uncertainty.data[0]
        self.cog[i] = inputs.cognition.data[0]
        self.target[i] = inputs.target[0]
        self.action[i] = action
        self.angle[i] = angle
        self.next = (i + 1) % self.capacity
        self.size = min(self.capacity, self.size + 1)

    def batch(self, idx) -> tuple[P.StepInputs, np.ndarray, np.ndarray]:
        inputs = P.StepInputs(obs=self.obs[idx], uncertainty=T.Tensor(self.unc[idx]),
                              cognition=T.Tensor(self.cog[idx]), target=self.target[idx])
        return inputs, self.action[idx], self.angle[idx]

    def arrays(self) -> dict[str, np.ndarray]:
        n = self.size
        return {"data/obs": self.obs[:n], "data/unc": self.unc[:n], "data/cog": self.cog[:n],
                "data/target": self.target[:n], "data/action": self.action[:n].astype(float),
                "data/angle": self.angle[:n], "data/next": np.array([self.next], dtype=float)}

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        n = len(arrays["data/action"])
        self.obs[:n] = arrays["data/obs"]
        self.unc[:n] = arrays["data/unc"]
        self.cog[:n] = arrays["data/cog"]
        self.target[:n] = arrays["data/target"]
        self.action[:n] = arrays["data/action"].astype(int)
        self.angle[:n] = arrays["data/angle"]
        self.size = n
        self.next = int(arrays["data/next"][0])


@dataclass
class LogRow:
    """One training episode.

    ``ce``, ``aux`` and ``loss`` describe the objective the optimiser actually minimised
    after this episode: the mean minibatch loss in aggregate mode, the episode loss in
    episode mode.  ``episode_ce`` and ``episode_aux`` are always the loss on the states
    this episode visited, before any update.
    """

    episode: int
    ce: float
    aux: float
    success: bool
    steps: int
    expert_prob: float
    loss: float  # CE + lambda * aux
    episode_ce: float
    episode_aux: float
    angle_error: float  # mean circular error of the predicted bearing on this episode's states

    def csv(self) -> list:
        return [self.episode, f"{self.ce:.6f}", f"{self.aux:.6f}", int(self.success),
                f"{self.episode_ce:.6f}", f"{self.episode_aux:.6f}", f"{self.angle_error:.6f}"]


LOG_HEADER = ["episode", "ce_loss", "aux_loss", "success", "episode_ce", "episode_aux", "angle_error"]
_LOG_FIELDS = 10


@dataclass
class Trainer:
    """Holds everything needed to continue training: policy, optimizer, dataset and log."""

    policy: P.Policy
    agent: AgentSettings
    settings: TrainSettings
    seed: int
    opt: T.OptimizerState = None
    dataset: Dataset = None
    episode: int = 0
    log: list = None

    def __post_init__(self):
        if self.opt is None:
            self.opt = T.OptimizerState.for_params(self.policy.parameters(), lr=self.settings.policy_lr)
        if self.dataset is None:
            c = self.policy.config
            self.dataset = Dataset(self.settings.dataset_capacity, c.width, c.feat_dim)
        if self.log is None:
            self.log = []
        if self.policy.config.width != self.agent.width:
            raise ValueError(f"policy width {self.policy.config.width} != sensor width {self.agent.width}")

    @classmethod
    def fresh(cls, config: P.PolicyConfig, agent: AgentSettings, settings: TrainSettings, seed: int) -> "Trainer":
        return cls(policy=P.Policy(config, stream(seed, "policy-init")), agent=agent, settings=settings, seed=seed)

    # -- one episode -----------------------------------------------------

    def _sample_episode(self, scenes: list[W.Scene], k: int):
        rng = stream(self.seed, "train-episode", k)
        for _ in range(50):
            scene = scenes[int(rng.integers(len(scenes)))]
            tier = self.settings.tiers[int(rng.integers(len(self.settings.tiers)))]
            try:
                return scene, W.sample_episode(scene, tier, rng, width=self.agent.width, fov=self.agent.fov)
            except W.TierInfeasibleError:
                continue
        raise W.TierInfeasibleError("no training scene hosts the requested tiers")

    def run_episode(self, scenes: list[W.Scene]) -> LogRow:
        k = self.episode
        s = self.settings
        aggregate = s.mode == "aggregate"
        scene, ep = self._sample_episode(scenes, k)
        mix_rng = stream(self.seed, "train-mix", k)
        online = OnlineField(scene, self.agent, stream(self.seed, "train-field", k))
        p_expert = expert_probability(k, s)
        detach = aggregate or s.detach_field
        pose = ep.start
        collected, labels, angles, outputs = [], [], [], []
        success = False
        steps = 0
        while steps < s.max_steps:
            strip = W.render_observation(scene, pose, self.agent.width, self.agent.fov)
            online.observe(pose, strip)
            inputs = P.perceive(online.field, pose, strip, ep.target_image, self.agent.fov, detach)
            expert = W.expert_action(scene, pose, ep.target, self.agent.success_radius)
            labels.append(int(expert))
            angles.append(W.target_bearing(pose, ep.target))
            collected.append(inputs)
            use_expert = mix_rng.random() < p_expert
            if aggregate:
                self.dataset.add(inputs, int(expert), angles[-1])
                if use_expert:
                    action = expert
                else:
                    with T.no_grad():
                        probs = self.policy(inputs).probs[0]
                    action = P.select_action(probs, "sample", mix_rng)
            else:
                out = self.policy(inputs)
                outputs.append(out)
                action = expert if use_expert else P.select_action(out.probs[0], "sample", mix_rng)
            steps += 1
            if action is W.Action.STOP:
                success = W.geodesic_distance(scene, pose.xy, ep.target) <= self.agent.success_radius
                break
            pose, _ = W.step_agent(scene, pose, action)
            if W.geodesic_distance(scene, pose.xy, ep.target) <= self.agent.success_radius:
                success = True
                break

        lam = self.policy.config.effective_lambda
        if aggregate:
            with T.no_grad():
                out = self.policy(P.stack_inputs(collected))
                parts = P.imitation_loss(out, labels, angles, lam)
            seen = (parts.ce, parts.aux, parts.total.item())
            fitted = self._minibatch_updates(stream(self.seed, "train-batch", k)) or seen
        else:
            out = _concat_outputs(outputs)
            parts = P.imitation_loss(out, labels, angles, lam)
            parts.total.backward()
            T.adam_step(self.policy.parameters(), self.opt)
            seen = fitted = (parts.ce, parts.aux, parts.total.item())
        bearing_error = float(np.mean([circular_error(a, b) for a, b in zip(out.angle.data.reshape(-1), angles)]))
        self.episode += 1
        row = LogRow(episode=k, ce=fitted[0], aux=fitted[1], success=bool(success), steps=steps,
                     expert_prob=p_expert, loss=fitted[2], episode_ce=seen[0], episode_aux=seen[1],
                     angle_error=bearing_error)
        self.log.append(row)
        return row

    def _minibatch_updates(self, rng: np.random.Generator):
        """Adam steps on minibatches of the aggregated set; returns mean (ce, aux, total) or None."""
        lam = self.policy.config.effective_lambda
        history = []
        for _ in range(self.settings.updates_per_episode):
            idx = rng.integers(self.dataset.size, size=min(self.settings.minibatch, self.dataset.size))
            inputs, acts, angs = self.dataset.batch(idx)
            parts = P.imitation_loss(self.policy(inputs), acts, angs, lam)
            parts.total.backward()
            T.adam_step(self.policy.parameters(), self.opt)
            history.append((parts.ce, parts.aux, parts.total.item()))
        return tuple(float(v) for v in np.mean(history, axis=0)) if history else None

    def train(self, scenes: list[W.Scene], checkpoint: str | Path | None = None, on_episode=None) -> list[LogRow]:
        """Run until ``settings.episodes`` episodes are done, checkpointing periodically."""
        if not scenes:
            raise ValueError("training needs at least one scene")
        while self.episode < self.settings.episodes:
            row = self.run_episode(scenes)
            if on_episode is not None:
                on_episode(row)
            if checkpoint is not None and (self.episode % self.settings.checkpoint_every == 0
                                           or self.episode == self.settings.episodes):
                self.save(checkpoint)
        return self.log

    # -- checkpoints -----------------------------------------------------

    def save(self, path) -> None:
        named = {f"policy/{k}": v for k, v in self.policy.state_dict().items()}
        for i, (m, v) in enumerate(zip(self.opt.m, self.opt.v)):
            named[f"opt/m/{i}"] = m
            named[f"opt/v/{i}"] = v
        named["meta/opt_step"] = np.array([self.opt.step], dtype=float)
        named["meta/episode"] = np.array([self.episode], dtype=float)
        named["meta/flags"] = np.array([self.policy.config.use_f_u, self.policy.config.use_aux,
                                        self.policy.config.use_cbam], dtype=float)
        named["log"] = np.array([[r.episode, r.ce, r.aux, r.success, r.steps, r.expert_prob, r.loss,
                                  r.episode_ce, r.episode_aux, r.angle_error] for r in self.log], dtype=float).reshape(-1, _LOG_FIELDS)
        if self.settings.mode == "aggregate":
            named.update(self.dataset.arrays())
        tmp = Path(str(path) + ".tmp")
        T.save_tensors(tmp, named)
        tmp.replace(path)

    def restore(self, path) -> None:
        named = T.load_tensors(path)
        flags = tuple(bool(x) for x in named["meta/flags"])
        c = self.policy.config
        if flags != (c.use_f_u, c.use_aux, c.use_cbam):
            raise ValueError(f"{path}: checkpoint flags {flags} do not match config {c.flags()}")
        self.policy.load_state_dict({k[len("policy/"):]: v for k, v in named.items() if k.startswith("policy/")})
        n = len(self.opt.m)
        self.opt.m = [named[f"opt/m/{i}"].copy() for i in range(n)]
        self.opt.v = [named[f"opt/v/{i}"].copy() for i in range(n)]
        self.opt.step = int(named["meta/opt_step"][0])
        self.episode = int(named["meta/episode"][0])
        self.log = [LogRow(int(r[0]), float(r[1]), float(r[2]), bool(r[3]), int(r[4]), *map(float, r[5:]))
                    for r in named["log"]]
        if "data/action" in named:
            self.dataset.restore(named)


def _concat_outputs(outputs: list[P.PolicyOutput]) -> P.PolicyOutput:
    cat = lambda name: T.concat([getattr(o, name) for o in outputs], axis=0)  # noqa: E731
    return P.PolicyOutput(logits=cat("logits"), log_probs=cat("log_probs"), angle=cat("angle"),
                          f_cog=cat("f_cog"), f_u=cat("f_u"), f_p=cat("f_p"))


def load_policy(path, config: P.PolicyConfig) -> P.Policy:
    """Policy weights from a training checkpoint (flags must match ``config``)."""
    named = T.load_tensors(path)
    flags = tuple(bool(x) for x in named["meta/flags"])
    if flags != (config.use_f_u, config.use_aux, config.use_cbam):
        raise ValueError(f"{path}: checkpoint flags {flags} do not match config {config.flags()}")
    pol = P.Policy(config, np.random.default_rng(0))
    pol.load_state_dict({k[len("policy/"):]: v for k, v in named.items() if k.startswith("policy/")})
    return pol


def window_means(log: list[LogRow], fraction: float = 0.1) -> tuple[float, float]:
    """Mean loss over the first and last ``fraction`` of logged episodes."""
    n = max(1, int(math.ceil(fraction * len(log))))
    first = float(np.mean([r.loss for r in log[:n]]))
    last = float(np.mean([r.loss for r in log[-n:]]))
    return first, last
