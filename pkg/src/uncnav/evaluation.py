"""Running episodes, navigation metrics, reference policies and the ablation grid."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from . import field as F
from . import policy as P
from . import render as R
from . import tensor as T
from . import world as W
from .seeding import stream
from .world import Action, AgentPose

TIER_NAMES = tuple(W.TIERS)


@dataclass
class AgentSettings:
    """Sensor, episode and online-field settings shared by every policy that runs in the world."""

    width: int = 64
    fov: float = W.DEFAULT_FOV
    max_steps: int = 800
    success_radius: float = W.SUCCESS_RADIUS
    train_steps: int = 4  # field updates after every move
    ray_batch: int = 256
    field_lr: float = 1e-3
    n_samples: int = 32
    pos_freqs: int = 8
    dir_freqs: int = 4
    hidden: int = 64
    feat_dim: int = 16
    beta_min: float = 0.01

    def __post_init__(self):
        if self.width < 1 or self.max_steps < 1:
            raise ValueError("width and max_steps must be positive")
        if not 0 < self.fov < 2 * math.pi:
            raise ValueError("fov must lie in (0, 2 pi)")
        if self.train_steps < 0 or self.ray_batch < 1:
            raise ValueError("train_steps must be >= 0 and ray_batch >= 1")

    def field_config(self, scene: W.Scene) -> F.FieldConfig:
        return F.FieldConfig.for_scene(
            scene, pos_freqs=self.pos_freqs, dir_freqs=self.dir_freqs, hidden=self.hidden,
            feat_dim=self.feat_dim, n_samples=self.n_samples, beta_min=self.beta_min,
        )


class OnlineField:
    """A freshly initialised field plus its replay buffer, trained as the agent moves."""

    def __init__(self, scene: W.Scene, settings: AgentSettings, rng: np.random.Generator):
        self.settings = settings
        self.rng = rng
        self.field = F.RadianceField(settings.field_config(scene), rng)
        self.buffer = F.ReplayBuffer()
        self.opt = T.OptimizerState.for_params(self.field.parameters(), lr=settings.field_lr)
        self.losses: list[float] = []

    def observe(self, pose: AgentPose, strip: W.ObservationStrip) -> None:
        F.add_observation(self.buffer, pose, strip)
        for _ in range(self.settings.train_steps):
            self.losses.append(F.train_step(self.field, self.buffer, self.settings.ray_batch, self.opt, self.rng))

    def maps(self, pose: AgentPose) -> R.Maps:
        with T.no_grad():
            return R.render_maps(self.field, pose, self.settings.width, self.settings.fov)

    def mean_uncertainty(self, pose: AgentPose) -> float:
        return float(self.maps(pose).uncertainty.data.mean())


# ---------------------------------------------------------------------------
# policies


@dataclass
class StepView:
    """What a policy may look at when choosing an action."""

    scene: W.Scene
    episode: W.Episode | None
    pose: AgentPose
    strip: W.ObservationStrip
    online: OnlineField | None


class NavPolicy:
    """Base class: ``act`` returns an action and optionally a predicted target bearing."""

    needs_field = False
    name = "policy"

    def act(self, view: StepView, rng: np.random.Generator) -> tuple[Action, float | None]:
        raise NotImplementedError


class ExpertPolicy(NavPolicy):
    name = "expert"

    def act(self, view, rng):
        return W.expert_action(view.scene, view.pose, view.episode.target), None


class AlwaysStop(NavPolicy):
    name = "stop"

    def act(self, view, rng):
        return Action.STOP, None


class RandomWalk(NavPolicy):
    """Uniform over Forward / TurnLeft / TurnRight; never stops."""

    name = "random"

    def act(self, view, rng):
        return Action(int(rng.integers(3))), None


class UncertaintyGreedy(NavPolicy):
    """Head for whichever of {current, left, right} heading renders the most mean uncertainty."""

    needs_field = True
    name = "uncertainty-greedy"

    def act(self, view, rng):
        pose = view.pose
        scores = []
        for offset in (0.0, W.TURN_ANGLE, -W.TURN_ANGLE):
            scores.append(view.online.mean_uncertainty(AgentPose(pose.x, pose.y, W.wrap_angle(pose.theta + offset))))
        best = int(np.argmax(scores))  # ties go to the current heading
        if best == 0:
            blocked = W.step_agent(view.scene, pose, Action.FORWARD)[1]
            return (Action.TURN_LEFT if blocked else Action.FORWARD), None
        return (Action.TURN_LEFT if best == 1 else Action.TURN_RIGHT), None


class LearnedPolicy(NavPolicy):
    needs_field = True

    def __init__(self, policy: P.Policy, mode: str = "sample"):
        self.policy = policy
        self.mode = mode
        self.name = policy.config.flags()

    def act(self, view, rng):
        s = view.online.settings
        with T.no_grad():
            inputs = P.perceive(view.online.field, view.pose, view.strip, view.episode.target_image, s.fov, True)
            out = self.policy(inputs)
        return P.select_action(out.probs[0], self.mode, rng), float(out.angle.data[0])


# ---------------------------------------------------------------------------
# episodes


@dataclass
class EpisodeResult:
    success: bool
    steps: int
    path_length: float
    shortest: float
    final_distance: float
    collisions: int
    tier: str = ""
    stopped: bool = False
    trajectory: list = dc_field(default_factory=list)  # (x, y, theta, action, collided) per step
    angle_errors: list = dc_field(default_factory=list)  # circular error of predicted bearings

    def record(self) -> dict:
        """Flat summary suitable for one line of a JSON-lines log."""
        out = asdict(self)
        out.pop("trajectory")
        out.pop("angle_errors")
        out["mean_angle_error"] = float(np.mean(self.angle_errors)) if self.angle_errors else None
        return out

    def step_records(self) -> list[dict]:
        """One record per pose: step, x, y, theta, action (-1 for the final pose) and collision flag."""
        return [{"step": i, "x": x, "y": y, "theta": t, "action": a, "collision": c}
                for i, (x, y, t, a, c) in enumerate(self.trajectory)]


def circular_error(a: float, b: float) -> float:
    return abs(W.signed_angle(a - b))


def run_episode(policy: NavPolicy, scene: W.Scene, episode: W.Episode, settings: AgentSettings,
                rng: np.random.Generator, field_rng: np.random.Generator | None = None,
                max_steps: int | None = None, recorder=None) -> EpisodeResult:
    """Observe, train the field, act, move; stop on success, on Stop, or at the step budget.

    ``recorder(view, action)``, when given, is called once per step before the move.
    """
    max_steps = settings.max_steps if max_steps is None else max_steps
    online = OnlineField(scene, settings, field_rng if field_rng is not None else rng) if policy.needs_field else None
    pose = episode.start
    path = 0.0
    collisions = 0
    traj, errors = [], []
    success = stopped = False
    steps = 0
    dist = W.geodesic_distance(scene, pose.xy, episode.target)
    while steps < max_steps:
        strip = W.render_observation(scene, pose, settings.width, settings.fov)
        if online is not None:
            online.observe(pose, strip)
        view = StepView(scene, episode, pose, strip, online)
        action, bearing = policy.act(view, rng)
        if recorder is not None:
            recorder(view, action)
        if bearing is not None:
            errors.append(circular_error(bearing, W.target_bearing(pose, episode.target)))
        steps += 1
        if action is Action.STOP:
            traj.append((pose.x, pose.y, pose.theta, int(action), False))
            stopped = True
            success = dist <= settings.success_radius
            break
        new, hit = W.step_agent(scene, pose, action)
        traj.append((pose.x, pose.y, pose.theta, int(action), bool(hit)))
        collisions += hit
        path += math.hypot(new.x - pose.x, new.y - pose.y)
        pose = new
        dist = W.geodesic_distance(scene, pose.xy, episode.target)
        if dist <= settings.success_radius:
            success = True
            break
    traj.append((pose.x, pose.y, pose.theta, -1, False))
    return EpisodeResult(success=bool(success), steps=steps, path_length=path, shortest=episode.geodesic,
                         final_distance=dist, collisions=int(collisions), tier=episode.tier, stopped=stopped,
                         trajectory=traj, angle_errors=errors)


def explore(policy: NavPolicy, scene: W.Scene, start: AgentPose, n_steps: int, settings: AgentSettings,
            rng: np.random.Generator, field_rng: np.random.Generator | None = None) -> list[AgentPose]:
    """Goal-free rollout (for coverage); returns the visited poses including the start."""
    online = OnlineField(scene, settings, field_rng if field_rng is not None else rng) if policy.needs_field else None
    pose = start
    poses = [pose]
    for _ in range(n_steps):
        strip = W.render_observation(scene, pose, settings.width, settings.fov)
        if online is not None:
            online.observe(pose, strip)
        action, _ = policy.act(StepView(scene, None, pose, strip, online), rng)
        if action is not Action.STOP:
            pose, _ = W.step_agent(scene, pose, action)
        poses.append(pose)
    return poses


def coverage(trajectory, scene: W.Scene) -> float:
    """Fraction of free cells whose centre the agent came within 0.5 units of (per axis)."""
    free = ~scene.grid
    visited = np.zeros_like(free)
    h, w = scene.shape
    for p in trajectory:
        x, y = (p.x, p.y) if isinstance(p, AgentPose) else (p[0], p[1])
        # cells whose centre lies within 0.5 on both axes; a point on a cell edge touches both sides
        js = range(max(0, math.ceil(x - 1.0)), min(w, math.floor(x) + 1))
        is_ = range(max(0, math.ceil(y - 1.0)), min(h, math.floor(y) + 1))
        for i in is_:
            for j in js:
                visited[i, j] = True
    return float((visited & free).sum() / free.sum())


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    n: int
    sr: float
    spl: float
    dts: float


def compute_metrics(results: list[EpisodeResult], success_radius: float = W.SUCCESS_RADIUS) -> Metrics:
    if not results:
        raise T.ContractError("cannot compute metrics over zero episodes")
    s = np.array([r.success for r in results], dtype=float)
    shortest = np.array([r.shortest for r in results])
    taken = np.array([r.path_length for r in results])
    final = np.array([r.final_distance for r in results])
    spl = s * shortest / np.maximum(np.maximum(taken, shortest), 1e-12)
    dts = np.maximum(0.0, final - success_radius)
    return Metrics(n=len(results), sr=float(s.mean()), spl=float(spl.mean()), dts=float(dts.mean()))


# ---------------------------------------------------------------------------
# paired evaluation


def episode_set(scenes: list[W.Scene], episodes_per_tier: int, seed: int, width: int, fov: float,
                tiers=TIER_NAMES) -> list[tuple[int, int, W.Episode]]:
    """Deterministic (scene index, episode index, episode) list shared by every config row.

    Episodes are dealt round-robin over the scenes; a scene that cannot host a tier is skipped.
    """
    out = []
    idx = 0
    for t, tier in enumerate(tiers):
        made = attempts = 0
        while made < episodes_per_tier:
            if attempts > 20 * episodes_per_tier + len(scenes):
                raise W.TierInfeasibleError(f"could not place {episodes_per_tier} {tier} episodes")
            k = attempts % len(scenes)
            attempts += 1
            try:
                ep = W.sample_episode(scenes[k], tier, stream(seed, "episode", t, attempts), width=width, fov=fov)
            except W.TierInfeasibleError:
                continue
            out.append((k, idx, ep))
            idx += 1
            made += 1
    return out


def _run_indexed(args):
    policy, scene, episode, settings, seed, idx = args
    return run_episode(policy, scene, episode, settings, stream(seed, "sampling", idx),
                       field_rng=stream(seed, "field", idx))


def run_episodes(policy: NavPolicy, scenes: list[W.Scene], episodes, settings: AgentSettings, seed: int,
                 workers: int = 1) -> list[EpisodeResult]:
    """Run every (scene index, episode index, episode); results come back in input order."""
    jobs = [(policy, scenes[k], ep, settings, seed, idx) for k, idx, ep in episodes]
    if workers <= 1:
        return [_run_indexed(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_indexed, jobs))


def metrics_table(name: str, results: list[EpisodeResult], success_radius: float = W.SUCCESS_RADIUS) -> list[dict]:
    """One row per tier present plus a ``total`` row."""
    rows = []
    for tier in TIER_NAMES + ("total",):
        sub = results if tier == "total" else [r for r in results if r.tier == tier]
        if not sub:
            continue
        m = compute_metrics(sub, success_radius)
        rows.append({"config": name, "tier": tier, "n": m.n, "SR": m.sr, "SPL": m.spl, "DTS": m.dts})
    return rows


def evaluate_grid(policies: dict, scenes: list[W.Scene], episodes_per_tier: int, settings: AgentSettings,
                  seed: int, workers: int = 1, tiers=TIER_NAMES):
    """Evaluate each named policy on the same episode set.

    ``policies`` maps a config name to a ``NavPolicy`` (or ``None`` when its checkpoint
    is missing, which raises naming the config).  Returns ``(rows, results_by_name)``.
    """
    for name, pol in policies.items():
        if pol is None:
            raise FileNotFoundError(f"no checkpoint for config {name!r}")
    episodes = episode_set(scenes, episodes_per_tier, seed, settings.width, settings.fov, tiers)
    rows, by_name = [], {}
    for name, pol in policies.items():
        results = run_episodes(pol, scenes, episodes, settings, seed, workers)
        by_name[name] = results
        rows.extend(metrics_table(name, results, settings.success_radius))
    return rows, by_name

