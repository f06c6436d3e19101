"""Self-contained experiments on the field and the exploration rule (used by tests and demos)."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import field as F
from . import world as W
from .evaluation import AgentSettings, OnlineField, RandomWalk, UncertaintyGreedy, coverage, explore
from .seeding import stream
from .world import Action, AgentPose

WANDER = (Action.FORWARD, Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)


def single_room(size: int = 8, seed: int = 1) -> W.Scene:
    """An empty ``size`` x ``size`` room inside a one-cell wall."""
    rows = ["#" * (size + 2)] + ["#" + "." * size + "#"] * size + ["#" * (size + 2)]
    return W.make_scene(rows, seed=seed)


# ---------------------------------------------------------------------------
# field fit


@dataclass
class FitResult:
    initial_error: float
    final_error: float
    seconds: float
    losses: list

    @property
    def ratio(self) -> float:
        return self.final_error / self.initial_error


def field_fit(seed: int, settings: AgentSettings, train_steps: int = 2000, held_out: int = 400,
              scene: W.Scene | None = None) -> FitResult:
    """Random-walk one room, training after every move; report held-out photometric error.

    The walk takes ``train_steps / settings.train_steps`` moves so that exactly
    ``train_steps`` optimiser updates happen.  Held-out rays start at visited positions
    with fresh random headings.
    """
    scene = single_room() if scene is None else scene
    rng = stream(seed, "fit-walk")
    online = OnlineField(scene, settings, stream(seed, "field"))
    initial = F.RadianceField(online.field.config, stream(seed, "field"))
    free = scene.free_cells()
    i, j = free[len(free) // 2]
    pose = AgentPose(j + 0.5, i + 0.5, float(rng.uniform(0, 2 * math.pi)))
    visited = []
    moves = max(1, math.ceil(train_steps / max(1, settings.train_steps)))
    start = time.perf_counter()
    for _ in range(moves):
        pose, _ = W.step_agent(scene, pose, WANDER[int(rng.integers(len(WANDER)))])
        visited.append(pose.xy)
        online.observe(pose, W.render_observation(scene, pose, settings.width, settings.fov))
    seconds = time.perf_counter() - start
    probe = stream(seed, "fit-probe")
    origins = np.array(visited)[probe.integers(len(visited), size=held_out)]
    angles = probe.uniform(0, 2 * math.pi, held_out)
    _, colors, _ = W.cast_rays(scene, origins, angles)
    return FitResult(initial_error=F.photometric_error(initial, origins, angles, colors),
                     final_error=F.photometric_error(online.field, origins, angles, colors),
                     seconds=seconds, losses=online.losses)


# ---------------------------------------------------------------------------
# two-room uncertainty contrast


@dataclass
class ContrastResult:
    visited: float  # mean rendered uncertainty over rays landing in the trained room
    unvisited: float  # mean rendered uncertainty over rays landing in the other room
    losses: list

    @property
    def ratio(self) -> float:
        return self.unvisited / max(self.visited, 1e-12)


def uncertainty_contrast(seed: int, settings: AgentSettings, steps: int = 1000, room: int = 6,
                         probe_poses: int = 20) -> ContrastResult:
    """Wander in the left room of ``two_room_scene``, training the field only on rays that end there.

    Afterwards compare the mean uncertainty of rays (cast from poses inside each room)
    that land in the left (visited) room against those landing in the right one.
    """
    scene = W.two_room_scene(seed=seed, room=room)
    ax0, ax1 = 1.0, room + 1.0
    bx0, bx1 = room + 2.0, 2.0 * room + 2.0
    rng = stream(seed, "contrast")
    online = OnlineField(scene, settings, stream(seed, "field"))
    pose = AgentPose(0.5 * (ax0 + ax1), 0.5 * (room + 2), float(rng.uniform(0, 2 * math.pi)))
    for _ in range(steps):
        new, _ = W.step_agent(scene, pose, WANDER[int(rng.integers(len(WANDER)))])
        if new.x < ax1 - 0.3:
            pose = new
        strip = W.render_observation(scene, pose, settings.width, settings.fov)
        hit_x = pose.x + strip.depth * np.cos(strip.angles)
        keep = hit_x <= ax1 + 1e-6
        online.buffer.add(np.tile(pose.xy, (int(keep.sum()), 1)), strip.angles[keep], strip.rgb[keep])
        for _ in range(settings.train_steps):
            online.losses.append(F.train_step(online.field, online.buffer, settings.ray_batch, online.opt, online.rng))

    probe = stream(seed, "contrast-probe")

    def mean_iu(x0, x1):
        vals = []
        for _ in range(probe_poses):
            p = AgentPose(float(probe.uniform(x0 + 0.3, x1 - 0.3)), float(probe.uniform(1.3, room + 0.7)),
                          float(probe.uniform(0, 2 * math.pi)))
            strip = W.render_observation(scene, p, settings.width, settings.fov)
            hit_x = p.x + strip.depth * np.cos(strip.angles)
            inside = (hit_x >= x0 - 1e-6) & (hit_x <= x1 + 1e-6)
            vals.append(online.maps(p).uncertainty.data[0][inside])
        return float(np.concatenate(vals).mean())

    return ContrastResult(visited=mean_iu(ax0, ax1), unvisited=mean_iu(bx0, bx1), losses=online.losses)


# ---------------------------------------------------------------------------
# exploration


@dataclass
class ExplorationPair:
    seed: int
    greedy: float
    random: float


def exploration_pair(seed: int, settings: AgentSettings, steps: int = 400) -> ExplorationPair:
    """Coverage of the uncertainty-greedy rule and of a random walk from the same start."""
    scene = W.generate_scene(int(stream(seed, "scene").integers(2**31 - 1)))
    heading = float(stream(seed, "heading").uniform(0, 2 * math.pi))
    start = AgentPose(*W.random_free_point(scene, stream(seed, "start")), heading)
    greedy = explore(UncertaintyGreedy(), scene, start, steps, settings, stream(seed, "walk"), stream(seed, "field"))
    rand = explore(RandomWalk(), scene, start, steps, settings, stream(seed, "walk"))
    return ExplorationPair(seed=seed, greedy=coverage(greedy, scene), random=coverage(rand, scene))
