import math
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uncnav import world as W
from uncnav.world import Action, AgentPose


def bfs_all_reachable(grid):
    free = [tuple(c) for c in np.argwhere(~grid)]
    seen = {free[0]}
    q = deque([free[0]])
    while q:
        i, j = q.popleft()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (i + di, j + dj)
            if not grid[n] and n not in seen:
                seen.add(n)
                q.append(n)
    return len(seen) == len(free)


def march(scene, origin, angle, step=1e-4, far=50.0):
    """Fixed-step marching oracle for the first wall hit."""
    d = np.array([math.cos(angle), math.sin(angle)])
    o = np.asarray(origin, float)
    n = np.arange(1, int(far / step)) * step
    pts = o + n[:, None] * d
    ij = np.floor(pts[:, ::-1]).astype(int)
    hit = scene.grid[ij[:, 0], ij[:, 1]]
    return float(n[np.argmax(hit)])


CORRIDOR = W.make_scene(["########", "#......#", "########"] + ["########"] * 5)


def test_generate_deterministic_and_valid():
    a = W.generate_scene(7)
    b = W.generate_scene(7)
    assert np.array_equal(a.grid, b.grid)
    np.testing.assert_array_equal(a.face_colors, b.face_colors)
    g = a.grid
    assert g[0].all() and g[-1].all() and g[:, 0].all() and g[:, -1].all()


@pytest.mark.parametrize("seed", range(10))
def test_generated_scenes_connected(seed):
    s = W.generate_scene(seed, size=(10, 14), wall_density=0.3)
    assert bfs_all_reachable(s.grid)


def test_generation_failure_and_precondition():
    with pytest.raises(W.GenerationError):
        W.generate_scene(1, wall_density=1.0, max_retries=5)
    with pytest.raises(ValueError):
        W.generate_scene(1, size=(6, 12))


def test_scene_text_roundtrip(tmp_path):
    s = W.generate_scene(3)
    p = tmp_path / "s.txt"
    s.save(p)
    first = p.read_text().splitlines()[0]
    assert first == f"{s.shape[0]} {s.shape[1]} 3"
    t = W.Scene.load(p)
    assert np.array_equal(t.grid, s.grid) and t.seed == s.seed
    np.testing.assert_array_equal(t.face_colors, s.face_colors)


def test_cast_ray_geometry():
    scene = W.make_scene(["#####", "#...#", "#...#", "#...#", "#####"])
    # origin (1.5, 1.5) facing +x: the wall face at x=4 is 2.5 away
    d, _ = W.cast_ray(scene, (1.5, 1.5), (1.0, 0.0))
    assert d == pytest.approx(2.5)
    s = W.make_scene(["#####", "#...#", "#####", "#####", "#####"])
    d, _ = W.cast_ray(s, (0.5 + 0.5, 1.5), (1.0, 0.0))
    assert d == pytest.approx(3.0)


def test_cast_ray_symmetric_corridor():
    d1, _ = W.cast_ray(CORRIDOR, (4.0, 1.5), (1.0, 0.0))
    d2, _ = W.cast_ray(CORRIDOR, (4.0, 1.5), (-1.0, 0.0))
    assert d1 == pytest.approx(d2) == pytest.approx(3.0)


def test_cast_ray_origin_in_wall():
    with pytest.raises(W.WorldError):
        W.cast_ray(CORRIDOR, (0.5, 0.5), (1.0, 0.0))


def test_raycast_matches_marching_oracle():
    scene = W.generate_scene(4)
    rng = np.random.default_rng(0)
    worst = 0.0
    origins = np.array([W.random_free_point(scene, rng) for _ in range(1000)])
    angles = rng.uniform(0, 2 * math.pi, 1000)
    dist, _, _ = W.cast_rays(scene, origins, angles)
    for k in range(0, 1000, 10):  # marching is slow; the full 1000 run in the acceptance suite
        worst = max(worst, abs(dist[k] - march(scene, origins[k], angles[k], far=dist[k] + 1)))
    assert worst < 1e-3


def test_render_observation_contracts():
    scene = W.generate_scene(2)
    pose = AgentPose(*W.random_free_point(scene, np.random.default_rng(1)), 0.7)
    obs = W.render_observation(scene, pose, width=65)
    d, c = W.cast_ray(scene, pose.xy, (math.cos(0.7), math.sin(0.7)))
    assert obs.depth[32] == pytest.approx(d)
    np.testing.assert_allclose(obs.rgb[32], c)
    obs64 = W.render_observation(scene, pose, width=64)
    assert obs64.rgb.shape == (64, 3) and obs64.depth.shape == (64,)
    assert np.all(obs64.depth > 0) and np.all(obs64.depth <= obs64.far)
    assert np.all((obs64.rgb >= 0) & (obs64.rgb <= 1))
    assert obs64.angles[0] == pytest.approx(0.7 + math.pi / 4)
    assert obs64.angles[-1] == pytest.approx(0.7 - math.pi / 4)


def test_uniform_colour_room():
    scene = W.make_scene(["#####", "#...#", "#...#", "#...#", "#####"], seed=0)
    object.__setattr__(scene, "_cache", {"colors": np.broadcast_to([0.2, 0.4, 0.6], scene.shape + (4, 3))})
    obs = W.render_observation(scene, AgentPose(2.5, 2.5, 1.0), width=16)
    np.testing.assert_allclose(obs.rgb, np.tile([0.2, 0.4, 0.6], (16, 1)))


def test_step_agent_kinematics():
    room = W.make_scene(["######", "#....#", "#....#", "#....#", "######"])
    pose, hit = W.step_agent(room, AgentPose(1.5, 1.5, 0.0), Action.FORWARD)
    assert not hit and (pose.x, pose.y, pose.theta) == pytest.approx((1.75, 1.5, 0.0))
    blocked = AgentPose(4.75, 1.5, 0.0)
    pose, hit = W.step_agent(room, blocked, Action.FORWARD)
    assert hit and pose == blocked
    pose, _ = W.step_agent(room, AgentPose(1.5, 1.5, 2 * math.pi - math.pi / 12), Action.TURN_LEFT)
    assert 0 <= pose.theta < 2 * math.pi and pose.theta == pytest.approx(math.pi / 12)
    pose, _ = W.step_agent(room, AgentPose(1.5, 1.5, 0.0), Action.TURN_RIGHT)
    assert pose.theta == pytest.approx(2 * math.pi - math.pi / 6)
    p0 = AgentPose(2.0, 2.0, 1.0)
    assert W.step_agent(room, p0, Action.STOP) == (p0, False)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 50), st.lists(st.sampled_from(list(Action)), min_size=1, max_size=120))
def test_no_tunneling(seed, actions):
    scene = W.generate_scene(seed % 5)
    rng = np.random.default_rng(seed)
    pose = AgentPose(*W.random_free_point(scene, rng), rng.uniform(0, 2 * math.pi))
    for a in actions:
        pose, _ = W.step_agent(scene, pose, a)
        assert scene.is_free_point(pose.x, pose.y)


def floyd_warshall_subgrid(scene):
    """Exhaustive all-pairs oracle on the refined grid (dense relaxation)."""
    k = W.SUBDIV
    free = np.repeat(np.repeat(~scene.grid, k, 0), k, 1)
    nodes = [tuple(c) for c in np.argwhere(free)]
    idx = {c: n for n, c in enumerate(nodes)}
    n = len(nodes)
    D = np.full((n, n), np.inf)
    np.fill_diagonal(D, 0.0)
    for (i, j), a in idx.items():
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if (di, dj) == (0, 0) or (i + di, j + dj) not in idx:
                    continue
                if di and dj and not (free[i + di, j] and free[i, j + dj]):
                    continue
                D[a, idx[(i + di, j + dj)]] = (math.sqrt(2) if di and dj else 1.0) / k
    for m in range(n):
        D = np.minimum(D, D[:, m : m + 1] + D[m : m + 1, :])
    return D, idx


def test_geodesic_matches_exhaustive_oracle():
    scene = W.generate_scene(11, size=(10, 10), wall_density=0.3)
    D, idx = floyd_warshall_subgrid(scene)
    rng = np.random.default_rng(3)
    k = W.SUBDIV
    for _ in range(60):
        a, b = W.random_free_point(scene, rng), W.random_free_point(scene, rng)
        na = idx[(int(a[1] * k), int(a[0] * k))]
        nb = idx[(int(b[1] * k), int(b[0] * k))]
        ca = (np.array([int(a[0] * k), int(a[1] * k)]) + 0.5) / k
        cb = (np.array([int(b[0] * k), int(b[1] * k)]) + 0.5) / k
        expect = np.linalg.norm(a - b) if na == nb else np.linalg.norm(a - ca) + D[na, nb] + np.linalg.norm(cb - b)
        assert W.geodesic_distance(scene, a, b) == pytest.approx(expect, abs=1e-9)


def test_geodesic_examples():
    assert W.geodesic_distance(CORRIDOR, (1.5, 1.5), (5.5, 1.5)) == pytest.approx(4.0)
    assert W.geodesic_distance(CORRIDOR, (2.3, 1.4), (2.3, 1.4)) == 0.0


def test_geodesic_metric_properties():
    scene = W.generate_scene(5)
    rng = np.random.default_rng(9)
    for _ in range(100):
        a, b, c = (W.random_free_point(scene, rng) for _ in range(3))
        ab = W.geodesic_distance(scene, a, b)
        assert ab >= 0
        assert ab == pytest.approx(W.geodesic_distance(scene, b, a), abs=1e-9)
        assert W.geodesic_distance(scene, a, c) <= ab + W.geodesic_distance(scene, b, c) + 1e-9


def test_expert_examples():
    corridor = W.make_scene(["########", "#......#", "########"] + ["########"] * 5)
    assert W.expert_action(corridor, AgentPose(1.5, 1.5, 0.0), (3.5, 1.5)) is Action.FORWARD
    assert W.expert_action(corridor, AgentPose(3.5, 1.5, 0.0), (1.5, 1.5)) is Action.TURN_LEFT
    assert W.expert_action(corridor, AgentPose(1.5, 1.5, 0.0), (2.2, 1.5)) is Action.STOP


def test_sample_episode_tiers_and_determinism():
    scene = W.generate_scene(6)
    for tier, (lo, hi) in W.TIERS.items():
        ep = W.sample_episode(scene, tier, np.random.default_rng(4), width=32)
        assert lo <= ep.geodesic <= hi
        assert ep.geodesic == pytest.approx(W.geodesic_distance(scene, ep.start.xy, ep.target))
        assert ep.target_image.rgb.shape == (32, 3)
    e1 = W.sample_episode(scene, "hard", np.random.default_rng(8))
    e2 = W.sample_episode(scene, "hard", np.random.default_rng(8))
    assert e1.start == e2.start and e1.target == e2.target
    np.testing.assert_array_equal(e1.target_image.rgb, e2.target_image.rgb)


def test_tier_infeasible():
    tiny = W.make_scene(["########", "#..#####"] + ["########"] * 6)
    with pytest.raises(W.TierInfeasibleError):
        W.sample_episode(tiny, "hard", np.random.default_rng(0), max_targets=5, starts_per_target=5)
