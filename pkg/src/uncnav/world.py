"""Procedural 2D grid world: scenes, raycast sensing, kinematics, geodesics, expert.

Coordinates: cell ``(i, j)`` covers ``x in [j, j+1)``, ``y in [i, i+1)``; headings
are measured counter-clockwise from +x, so TurnLeft adds to ``theta``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

TWO_PI = 2.0 * math.pi

FORWARD_STEP = 0.25
TURN_ANGLE = math.pi / 6
AGENT_RADIUS = 0.1
SUCCESS_RADIUS = 0.8
DEFAULT_FOV = math.pi / 2

# geodesics run on a 3x3 refinement of the free-cell graph; an odd factor keeps
# cell centres on sub-cell centres
SUBDIV = 3

TIERS = {"easy": (1.5, 3.0), "medium": (3.0, 5.0), "hard": (5.0, 10.0)}

PALETTE = np.array(
    [
        [0.90, 0.10, 0.10],
        [0.10, 0.75, 0.20],
        [0.15, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.85, 0.20, 0.85],
        [0.10, 0.85, 0.85],
        [0.95, 0.55, 0.10],
        [0.60, 0.60, 0.60],
    ]
)
BACKGROUND = np.zeros(3)

# face index of a wall cell, by which side the ray enters from
FACE_WEST, FACE_EAST, FACE_SOUTH, FACE_NORTH = 0, 1, 2, 3


class WorldError(Exception):
    pass


class GenerationError(WorldError):
    pass


class UnreachableError(WorldError):
    pass


class TierInfeasibleError(WorldError):
    pass


class Action(enum.IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    STOP = 3


def wrap_angle(a: float) -> float:
    """Wrap into [0, 2pi)."""
    a = math.fmod(a, TWO_PI)
    if a < 0:
        a += TWO_PI
    return 0.0 if a >= TWO_PI else a


def signed_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    a = math.fmod(a + math.pi, TWO_PI)
    if a <= 0:
        a += TWO_PI
    return a - math.pi


@dataclass(frozen=True)
class AgentPose:
    x: float
    y: float
    theta: float

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class ObservationStrip:
    rgb: np.ndarray  # (W, 3)
    depth: np.ndarray  # (W,)
    angles: np.ndarray  # (W,) world-frame ray headings, left to right
    fov: float
    far: float

    @property
    def width(self) -> int:
        return len(self.depth)

    def stacked(self) -> np.ndarray:
        """(4, W): rgb channels then depth scaled by the far clip."""
        return np.vstack([self.rgb.T, self.depth[None] / self.far])


@dataclass(frozen=True, eq=False)
class Scene:
    grid: np.ndarray  # (H, W) bool, True = wall
    seed: int
    cell_size: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def diagonal(self) -> float:
        h, w = self.grid.shape
        return math.hypot(h, w) * self.cell_size

    @property
    def face_colors(self) -> np.ndarray:
        """(H, W, 4, 3) colour of every wall face, a pure function of the seed."""
        if "colors" not in self._cache:
            rng = np.random.default_rng([self.seed, 0xC0102])
            idx = rng.integers(0, len(PALETTE), size=self.grid.shape + (4,))
            self._cache["colors"] = PALETTE[idx]
        return self._cache["colors"]

    def is_wall_cell(self, i: int, j: int) -> bool:
        h, w = self.grid.shape
        return not (0 <= i < h and 0 <= j < w) or bool(self.grid[i, j])

    def is_free_point(self, x: float, y: float) -> bool:
        return not self.is_wall_cell(int(math.floor(y)), int(math.floor(x)))

    def free_cells(self) -> np.ndarray:
        return np.argwhere(~self.grid)

    def to_text(self) -> str:
        h, w = self.grid.shape
        rows = ["".join("#" if c else "." for c in row) for row in self.grid]
        return f"{h} {w} {self.seed}\n" + "\n".join(rows) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Scene":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        h, w, seed = (int(v) for v in lines[0].split())
        rows = lines[1 : 1 + h]
        if len(rows) != h or any(len(r) != w for r in rows):
            raise ValueError(f"scene text does not match header {h}x{w}")
        grid = np.array([[c == "#" for c in r] for r in rows])
        return cls(grid=grid, seed=seed)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Scene":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# generation


def _connected(grid: np.ndarray) -> bool:
    free = np.argwhere(~grid)
    if len(free) == 0:
        return False
    seen = np.zeros_like(grid)
    stack = [tuple(free[0])]
    seen[stack[0]] = True
    count = 0
    while stack:
        i, j = stack.pop()
        count += 1
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            if not grid[a, b] and not seen[a, b]:
                seen[a, b] = True
                stack.append((a, b))
    return count == len(free)


def generate_scene(seed: int, size: tuple[int, int] = (12, 12), wall_density: float = 0.25,
                   max_retries: int = 500) -> Scene:
    """Random interior walls inside a walled boundary, redrawn until all free cells connect."""
    h, w = size
    if h < 8 or w < 8:
        raise ValueError(f"grid must be at least 8x8, got {h}x{w}")
    if not 0.0 <= wall_density <= 1.0:
        raise ValueError(f"wall_density must be in [0, 1], got {wall_density}")
    rng = np.random.default_rng([seed, 0x5CE4E])
    for _ in range(max_retries):
        grid = np.ones((h, w), dtype=bool)
        grid[1:-1, 1:-1] = rng.random((h - 2, w - 2)) < wall_density
        if _connected(grid):
            return Scene(grid=grid, seed=seed)
    raise GenerationError(f"no connected scene after {max_retries} tries (seed={seed}, density={wall_density})")


def make_scene(rows: list[str], seed: int = 0) -> Scene:
    """Scene from '#'/'.' rows, row 0 at y in [0, 1)."""
    return Scene(grid=np.array([[c == "#" for c in r] for r in rows]), seed=seed)


def two_room_scene(seed: int = 0, room: int = 6) -> Scene:
    """Two square rooms side by side joined through a one-cell doorway."""
    h, w = room + 2, 2 * room + 3
    grid = np.ones((h, w), dtype=bool)
    grid[1:-1, 1 : room + 1] = False
    grid[1:-1, room + 2 : 2 * room + 2] = False
    grid[h // 2, room + 1] = False
    return Scene(grid=grid, seed=seed)


# ---------------------------------------------------------------------------
# raycasting


def cast_rays(scene: Scene, origins: np.ndarray, angles: np.ndarray, far: float | None = None):
    """Grid DDA for many rays at once.

    Returns ``(distance (N,), color (N, 3), face (N,))``; rays that reach the far
    clip get the background colour and face -1.
    """
    far = scene.diagonal if far is None else far
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    angles = np.broadcast_to(np.asarray(angles, dtype=float), (len(origins),))
    n = len(origins)
    ox, oy = origins[:, 0], origins[:, 1]
    ci = np.floor(oy).astype(int)
    cj = np.floor(ox).astype(int)
    h, w = scene.grid.shape
    inside = (ci >= 0) & (ci < h) & (cj >= 0) & (cj < w)
    if not np.all(inside) or np.any(scene.grid[ci, cj]):
        bad = np.flatnonzero(~inside | scene.grid[np.clip(ci, 0, h - 1), np.clip(cj, 0, w - 1)])
        raise WorldError(f"ray origin inside a wall: {origins[bad[0]].tolist()}")
    dx, dy = np.cos(angles), np.sin(angles)
    step_j = np.where(dx > 0, 1, -1)
    step_i = np.where(dy > 0, 1, -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tdx = np.where(dx != 0, np.abs(1.0 / dx), np.inf)
        tdy = np.where(dy != 0, np.abs(1.0 / dy), np.inf)
        tmx = np.where(dx > 0, (cj + 1 - ox) / dx, np.where(dx < 0, (cj - ox) / dx, np.inf))
        tmy = np.where(dy > 0, (ci + 1 - oy) / dy, np.where(dy < 0, (ci - oy) / dy, np.inf))
    dist = np.full(n, far)
    face = np.full(n, -1)
    active = np.ones(n, dtype=bool)
    for _ in range(h + w + 2):
        if not active.any():
            break
        use_x = active & (tmx < tmy)
        use_y = active & ~use_x
        t = np.where(use_x, tmx, tmy)
        cj = np.where(use_x, cj + step_j, cj)
        ci = np.where(use_y, ci + step_i, ci)
        tmx = np.where(use_x, tmx + tdx, tmx)
        tmy = np.where(use_y, tmy + tdy, tmy)
        over = active & (t > far)
        active &= ~over
        hit = active & scene.grid[np.clip(ci, 0, h - 1), np.clip(cj, 0, w - 1)]
        dist[hit] = t[hit]
        face[hit & use_x] = np.where(step_j[hit & use_x] > 0, FACE_WEST, FACE_EAST)
        face[hit & use_y] = np.where(step_i[hit & use_y] > 0, FACE_SOUTH, FACE_NORTH)
        active &= ~hit
    colors = np.tile(BACKGROUND, (n, 1))
    hit = face >= 0
    if hit.any():
        colors[hit] = scene.face_colors[ci[hit], cj[hit], face[hit]]
    return dist, colors, face


def cast_ray(scene: Scene, origin, direction, far: float | None = None):
    """Single ray; ``direction`` is a unit vector.  Returns (distance, rgb)."""
    d = np.asarray(direction, dtype=float)
    ang = math.atan2(d[1], d[0])
    dist, col, _ = cast_rays(scene, np.asarray(origin, dtype=float)[None], np.array([ang]), far)
    return float(dist[0]), col[0]


def strip_angles(theta: float, width: int, fov: float) -> np.ndarray:
    """Column headings, left (theta + fov/2) to right (theta - fov/2)."""
    if width == 1:
        return np.array([theta])
    return theta + np.linspace(fov / 2, -fov / 2, width)


def render_observation(scene: Scene, pose: AgentPose, width: int = 64, fov: float = DEFAULT_FOV,
                       far: float | None = None) -> ObservationStrip:
    if width < 1:
        raise ValueError("strip width must be >= 1")
    far = scene.diagonal if far is None else far
    angles = strip_angles(pose.theta, width, fov)
    origins = np.tile([pose.x, pose.y], (width, 1))
    dist, col, _ = cast_rays(scene, origins, angles, far)
    return ObservationStrip(rgb=col, depth=dist, angles=angles, fov=fov, far=far)


# ---------------------------------------------------------------------------
# kinematics


def _disk_hits_wall(scene: Scene, pts: np.ndarray, radius: float) -> bool:
    """True when any disk centred on ``pts`` overlaps a wall cell."""
    h, w = scene.grid.shape
    ci = np.floor(pts[:, 1]).astype(int)
    cj = np.floor(pts[:, 0]).astype(int)
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ii, jj = ci + di, cj + dj
            outside = (ii < 0) | (ii >= h) | (jj < 0) | (jj >= w)
            wall = outside | scene.grid[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)]
            if not wall.any():
                continue
            nx = np.clip(pts[:, 0], jj, jj + 1)
            ny = np.clip(pts[:, 1], ii, ii + 1)
            d2 = (pts[:, 0] - nx) ** 2 + (pts[:, 1] - ny) ** 2
            if np.any(wall & (d2 < radius * radius)):
                return True
    return False


def segment_clear(scene: Scene, a, b, radius: float = AGENT_RADIUS, spacing: float = 0.01) -> bool:
    """Whether a disk of ``radius`` can sweep from ``a`` to ``b`` without touching walls."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n = max(2, int(math.ceil(np.linalg.norm(b - a) / spacing)) + 1)
    pts = a + np.linspace(0.0, 1.0, n)[:, None] * (b - a)
    return not _disk_hits_wall(scene, pts, radius)


def step_agent(scene: Scene, pose: AgentPose, action: Action) -> tuple[AgentPose, bool]:
    action = Action(action)
    if action is Action.TURN_LEFT:
        return AgentPose(pose.x, pose.y, wrap_angle(pose.theta + TURN_ANGLE)), False
    if action is Action.TURN_RIGHT:
        return AgentPose(pose.x, pose.y, wrap_angle(pose.theta - TURN_ANGLE)), False
    if action is Action.STOP:
        return pose, False
    nx = pose.x + FORWARD_STEP * math.cos(pose.theta)
    ny = pose.y + FORWARD_STEP * math.sin(pose.theta)
    if not segment_clear(scene, (pose.x, pose.y), (nx, ny)):
        return pose, True
    return AgentPose(nx, ny, pose.theta), False


# ---------------------------------------------------------------------------
# geodesics


class _SubGraph:
    """8-connected graph over the free sub-cells, no corner cutting."""

    def __init__(self, scene: Scene):
        k = SUBDIV
        free = np.repeat(np.repeat(~scene.grid, k, axis=0), k, axis=1)
        self.free = free
        self.h, self.w = free.shape
        self.index = -np.ones(free.shape, dtype=int)
        nodes = np.argwhere(free)
        self.index[nodes[:, 0], nodes[:, 1]] = np.arange(len(nodes))
        self.nodes = nodes
        self.centres = (nodes[:, ::-1] + 0.5) / k  # (x, y)
        rows, cols, costs = [], [], []
        s = 1.0 / k
        for di, dj in ((0, 1), (1, 0), (1, 1), (1, -1)):
            a = nodes
            b = nodes + [di, dj]
            ok = (b[:, 0] >= 0) & (b[:, 0] < self.h) & (b[:, 1] >= 0) & (b[:, 1] < self.w)
            ok[ok] = free[b[ok, 0], b[ok, 1]]
            if di and dj:
                ok[ok] &= free[a[ok, 0] + di, a[ok, 1]] & free[a[ok, 0], a[ok, 1] + dj]
            src = self.index[a[ok, 0], a[ok, 1]]
            dst = self.index[b[ok, 0], b[ok, 1]]
            c = s * (math.sqrt(2.0) if di and dj else 1.0)
            rows += [src, dst]
            cols += [dst, src]
            costs += [np.full(len(src), c)] * 2
        n = len(nodes)
        self.matrix = coo_matrix(
            (np.concatenate(costs), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
        self._fields: dict[int, np.ndarray] = {}

    def node_of(self, p) -> int:
        i = int(math.floor(p[1] * SUBDIV))
        j = int(math.floor(p[0] * SUBDIV))
        if not (0 <= i < self.h and 0 <= j < self.w) or self.index[i, j] < 0:
            raise WorldError(f"point {tuple(p)} is not in free space")
        return int(self.index[i, j])

    def field_from(self, node: int) -> np.ndarray:
        if node not in self._fields:
            if len(self._fields) > 256:
                self._fields.clear()
            self._fields[node] = dijkstra(self.matrix, directed=False, indices=node)
        return self._fields[node]


def _subgraph(scene: Scene) -> _SubGraph:
    if "subgraph" not in scene._cache:
        scene._cache["subgraph"] = _SubGraph(scene)
    return scene._cache["subgraph"]


def geodesic_distance(scene: Scene, a, b) -> float:
    """Sub-cell graph distance between the containing sub-cells plus in-cell offsets."""
    g = _subgraph(scene)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = g.node_of(a), g.node_of(b)
    if na == nb:
        return float(np.linalg.norm(a - b))
    d = g.field_from(nb)[na]
    if not np.isfinite(d):
        raise UnreachableError(f"{a.tolist()} cannot reach {b.tolist()}")
    return float(np.linalg.norm(a - g.centres[na]) + d + np.linalg.norm(g.centres[nb] - b))


def shortest_path(scene: Scene, a, b) -> np.ndarray:
    """Polyline of sub-cell centres from ``a`` to ``b`` (endpoints included)."""
    g = _subgraph(scene)
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = g.node_of(a), g.node_of(b)
    dist = g.field_from(nb)
    if not np.isfinite(dist[na]):
        raise UnreachableError(f"{a.tolist()} cannot reach {b.tolist()}")
    chain = [na]
    m = g.matrix
    while chain[-1] != nb:
        u = chain[-1]
        lo, hi = m.indptr[u], m.indptr[u + 1]
        nbrs, costs = m.indices[lo:hi], m.data[lo:hi]
        chain.append(int(nbrs[np.argmin(costs + dist[nbrs])]))
    return np.vstack([a, g.centres[chain[1:-1]] if len(chain) > 2 else np.empty((0, 2)), b])


# ---------------------------------------------------------------------------
# expert


def _waypoint(scene: Scene, pose: AgentPose, target, lookahead: int = 12, clearance: float = 0.22):
    path = shortest_path(scene, pose.xy, target)
    here = pose.xy
    cand = path[1 : lookahead + 1]
    for p in cand[::-1]:
        if segment_clear(scene, here, p, radius=clearance, spacing=0.05):
            return p
    return cand[0]


def expert_action(scene: Scene, pose: AgentPose, target, success_radius: float = SUCCESS_RADIUS) -> Action:
    """Shortest-path follower: face the next visible waypoint, then advance."""
    target = np.asarray(target, dtype=float)
    if geodesic_distance(scene, pose.xy, target) <= success_radius:
        return Action.STOP
    wp = _waypoint(scene, pose, target)
    err = signed_angle(math.atan2(wp[1] - pose.y, wp[0] - pose.x) - pose.theta)
    if abs(err) <= TURN_ANGLE and not step_agent(scene, pose, Action.FORWARD)[1]:
        return Action.FORWARD
    if err > 1e-12 or abs(abs(err) - math.pi) < 1e-9 or abs(err) <= 1e-12:
        return Action.TURN_LEFT
    return Action.TURN_RIGHT


def target_bearing(pose: AgentPose, target) -> float:
    """Angle from the current heading to the straight-line target direction, in (-pi, pi]."""
    return signed_angle(math.atan2(target[1] - pose.y, target[0] - pose.x) - pose.theta)


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    start: AgentPose
    target: tuple[float, float]
    target_theta: float
    target_image: ObservationStrip
    tier: str
    geodesic: float


def random_free_point(scene: Scene, rng: np.random.Generator, margin: float = 0.15) -> np.ndarray:
    cells = scene.free_cells()
    i, j = cells[rng.integers(len(cells))]
    return np.array([j + rng.uniform(margin, 1 - margin), i + rng.uniform(margin, 1 - margin)])


def sample_episode(scene: Scene, tier: str, rng: np.random.Generator, width: int = 64,
                   fov: float = DEFAULT_FOV, far: float | None = None, max_targets: int = 200,
                   starts_per_target: int = 40) -> Episode:
    """Rejection-sample a start/target pair whose geodesic lies in the tier band."""
    lo, hi = TIERS[tier]
    for _ in range(max_targets):
        target = random_free_point(scene, rng)
        for _ in range(starts_per_target):
            start = random_free_point(scene, rng)
            d = geodesic_distance(scene, start, target)
            if lo <= d <= hi:
                theta0 = rng.uniform(0, TWO_PI)
                ttheta = rng.uniform(0, TWO_PI)
                img = render_observation(scene, AgentPose(*target, ttheta), width, fov, far)
                return Episode(
                    start=AgentPose(float(start[0]), float(start[1]), theta0),
                    target=(float(target[0]), float(target[1])),
                    target_theta=ttheta,
                    target_image=img,
                    tier=tier,
                    geodesic=d,
                )
    raise TierInfeasibleError(f"no {tier} episode ({lo}-{hi}) found in scene seed={scene.seed}")
