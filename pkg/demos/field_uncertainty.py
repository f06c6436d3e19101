"""Where does the radiance field think it is ignorant?

A field is trained online while an agent wanders the left half of a two-room map.
Afterwards we compare the rendered uncertainty of rays that land in the room it saw
with rays that land in the room it never saw, and we write both strips as images.

    python demos/field_uncertainty.py --steps 1000 --out demo_out
"""

import argparse
import math
from pathlib import Path

from uncnav import evaluation as E
from uncnav import experiments as X
from uncnav import io
from uncnav import world as W
from uncnav.seeding import stream
from uncnav.world import AgentPose


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()

    settings = E.AgentSettings(width=32, n_samples=16, train_steps=1, ray_batch=128)
    result = X.uncertainty_contrast(args.seed, settings, steps=args.steps)
    print(f"mean uncertainty, visited room:   {result.visited:.4f}")
    print(f"mean uncertainty, unvisited room: {result.unvisited:.4f}")
    print(f"ratio unvisited / visited:        {result.ratio:.2f}")
    print(f"field loss: first {result.losses[0]:.3f}, last {result.losses[-1]:.3f}")

    # the same walk again, keeping the field this time, then look both ways from the doorway
    scene = W.two_room_scene(seed=args.seed)
    online = E.OnlineField(scene, settings, stream(args.seed, "field"))
    rng = stream(args.seed, "demo-walk")
    pose = AgentPose(3.5, 4.0, 0.0)
    for _ in range(args.steps // 2):
        new, _ = W.step_agent(scene, pose, X.WANDER[int(rng.integers(len(X.WANDER)))])
        pose = new if new.x < 6.7 else pose
        online.observe(pose, W.render_observation(scene, pose, settings.width, settings.fov))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    door = scene.shape[0] // 2 + 0.5
    for name, heading in (("left", math.pi), ("right", 0.0)):
        look = AgentPose(7.5, door, heading)
        strip = W.render_observation(scene, look, settings.width, settings.fov)
        u = online.maps(look).uncertainty.data[0]
        io.write_ppm(out / f"door_{name}_rgb.ppm", io.strip_image(strip.rgb, rows=16))
        io.write_ppm(out / f"door_{name}_uncertainty.ppm", io.strip_image(u, rows=16))
        print(f"from the doorway looking {name}: mean uncertainty {u.mean():.4f}")
    print(f"wrote strips to {out}")

if __name__ == "__main__":
    main()
