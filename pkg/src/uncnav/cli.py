"""Command line entry point: gen-scenes, train, eval, ablate, viz."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import evaluation as E
from . import io
from . import policy as P
from . import tensor as T
from . import training as TR
from . import world as W
from .seeding import stream

log = logging.getLogger("uncnav")

MANIFEST = "manifest.txt"
CHECKPOINT = "policy.ckpt"
SNAPSHOT = "config.txt"


# ---------------------------------------------------------------------------
# scenes


def scene_seed(root: int, split: str, index: int) -> int:
    return int(stream(root, "scene", 0 if split == "train" else 1, index).integers(2**31 - 1))


def gen_scenes(cfg: C.RunConfig, out_dir: Path) -> list[tuple[str, Path]]:
    """Write the train and validation scene files plus a manifest (``split<TAB>file`` per line)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    size = (cfg.scene_size, cfg.scene_size)
    for split, count in (("train", cfg.n_train_scenes), ("val", cfg.n_val_scenes)):
        for i in range(count):
            scene = W.generate_scene(scene_seed(cfg.seed, split, i), size, cfg.wall_density)
            path = out_dir / f"{split}_{i:03d}.txt"
            try:
                scene.save(path)
            except OSError as exc:
                raise OSError(f"cannot write scene file {path}: {exc}") from exc
            entries.append((split, path))
    (out_dir / MANIFEST).write_text("".join(f"{s}\t{p.name}\n" for s, p in entries))
    return entries


def load_split(scene_dir: Path, split: str) -> list[W.Scene]:
    manifest = scene_dir / MANIFEST
    if not manifest.exists():
        raise FileNotFoundError(f"no scene manifest at {manifest}; run gen-scenes first")
    scenes = []
    for line in manifest.read_text().splitlines():
        s, name = line.split("\t")
        if s == split:
            scenes.append(W.Scene.load(scene_dir / name))
    if not scenes:
        raise FileNotFoundError(f"manifest {manifest} lists no {split} scenes")
    return scenes


# ---------------------------------------------------------------------------
# training


def run_dir(cfg: C.RunConfig, name: str | None = None) -> Path:
    return Path(cfg.out) / (name or cfg.ablation_name)


def train(cfg: C.RunConfig) -> Path:
    """Train one policy; resumes from ``policy.ckpt`` when the run directory already holds one."""
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / SNAPSHOT)  # written before any episode runs
    scenes = load_split(cfg.scene_path, "train")
    trainer = TR.Trainer.fresh(cfg.policy_config(), cfg.agent_settings(), cfg.train_settings(), cfg.seed)
    ckpt = out / CHECKPOINT
    if ckpt.exists():
        trainer.restore(ckpt)
        log.info("resuming %s at episode %d", out, trainer.episode)

    def report(row):
        if row.episode % 10 == 0:
            log.info("%s episode %d ce %.3f aux %.3f success %d", cfg.ablation_name, row.episode, row.ce, row.aux,
                     row.success)

    trainer.train(scenes, checkpoint=ckpt, on_episode=report)
    io.write_csv(out / "train_log.csv", TR.LOG_HEADER, [r.csv() for r in trainer.log])
    return ckpt


# ---------------------------------------------------------------------------
# evaluation


def load_learned(cfg: C.RunConfig, name: str) -> E.LearnedPolicy | None:
    ckpt = run_dir(cfg, name) / CHECKPOINT
    if not ckpt.exists():
        return None
    return E.LearnedPolicy(TR.load_policy(ckpt, cfg.with_ablation(name).policy_config()), cfg.action_mode)


def dump_episode_viz(path: Path, policy: E.NavPolicy, scene, episode, settings, seed: int, idx: int) -> None:
    """Per-step strips (colour, uncertainty, saliency) stacked into images, raw CSVs and the trajectory."""
    path.mkdir(parents=True, exist_ok=True)
    colors, unc, sal = [], [], []

    def record(view, action):
        maps = view.online.maps(view.pose)
        colors.append(view.strip.rgb)
        unc.append(maps.uncertainty.data[0])
        if isinstance(policy, E.LearnedPolicy):
            with T.no_grad():
                inputs = P.perceive(view.online.field, view.pose, view.strip, episode.target_image, settings.fov, True)
            sal.append(P.saliency_over_uncertainty(policy.policy, inputs)[0, 0])

    result = E.run_episode(policy, scene, episode, settings, stream(seed, "sampling", idx),
                           field_rng=stream(seed, "field", idx), recorder=record)
    rows = 4
    io.write_ppm(path / "observation.ppm", np.concatenate([io.strip_image(c, rows) for c in colors]))
    io.write_ppm(path / "uncertainty.ppm", np.concatenate([io.strip_image(u, rows) for u in unc]))
    io.write_csv(path / "uncertainty.csv", ["step"] + [f"px{i}" for i in range(settings.width)],
                 [[i] + [f"{v:.6g}" for v in u] for i, u in enumerate(unc)])
    if sal:
        io.write_ppm(path / "saliency.ppm", np.concatenate([io.strip_image(s, rows) for s in sal]))
        io.write_csv(path / "saliency.csv", ["step"] + [f"px{i}" for i in range(settings.width)],
                     [[i] + [f"{v:.6g}" for v in s] for i, s in enumerate(sal)])
    io.write_ppm(path / "target.ppm", io.strip_image(episode.target_image.rgb, 16))
    io.write_trajectory(path / "trajectory.csv", result.trajectory)


def evaluate(cfg: C.RunConfig, names: list[str]) -> list[dict]:
    """Paired evaluation of the named checkpoints on the validation split."""
    policies = {name: load_learned(cfg, name) for name in names}
    missing = [n for n, p in policies.items() if p is None]
    if missing:
        raise FileNotFoundError(f"missing checkpoint for config {missing[0]!r} "
                                f"(expected {run_dir(cfg, missing[0]) / CHECKPOINT})")
    scenes = load_split(cfg.scene_path, "val")
    settings = cfg.agent_settings()
    rows, results = E.evaluate_grid(policies, scenes, cfg.episodes_per_tier, settings, cfg.seed,
                                    workers=cfg.workers, tiers=C.RunConfig.tier_list(cfg.eval_tiers))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_metrics(out / "metrics.csv", rows)
    episodes = E.episode_set(scenes, cfg.episodes_per_tier, cfg.seed, settings.width, settings.fov,
                             C.RunConfig.tier_list(cfg.eval_tiers))
    summaries, steps = [], []
    for name, res in results.items():
        for (k, idx, _), r in zip(episodes, res):
            summaries.append({"config": name, "episode": idx, "scene": k, **r.record()})
            steps.extend({"config": name, "episode": idx, **s} for s in r.step_records())
    io.write_jsonl(out / "episodes.jsonl", summaries)
    io.write_jsonl(out / "steps.jsonl", steps)
    if cfg.dump_viz:
        for name, pol in policies.items():
            for k, idx, ep in episodes[: cfg.dump_viz]:
                dump_episode_viz(out / "viz" / name / f"episode_{idx:04d}", pol, scenes[k], ep, settings,
                                 cfg.seed, idx)
    return rows


# ---------------------------------------------------------------------------
# visualisation


def viz(cfg: C.RunConfig) -> Path:
    """Two-room dump: the agent wanders the left room; strips and per-step field loss are written.

    Images show the colour strip and the uncertainty strip from a fixed probe pose in the doorway looking
    across both rooms, one row per recorded step.
    """
    out = Path(cfg.out) / "viz"
    out.mkdir(parents=True, exist_ok=True)
    settings = cfg.agent_settings()
    scene = W.two_room_scene(seed=cfg.seed)
    rng = stream(cfg.seed, "viz")
    online = E.OnlineField(scene, settings, stream(cfg.seed, "field"))
    room = 6
    pose = W.AgentPose(room / 2 + 1, room / 2 + 1, 0.0)
    probes = [W.AgentPose(room + 1.5, room / 2 + 1.5, 0.0), W.AgentPose(room + 1.5, room / 2 + 1.5, np.pi)]
    rows_c, rows_u = [], []
    n_steps = max(1, min(cfg.max_steps, 200))
    for step in range(n_steps):
        new, _ = W.step_agent(scene, pose, W.Action((0, 0, 1, 2)[int(rng.integers(4))]))
        if new.x < room + 0.7:
            pose = new
        online.observe(pose, W.render_observation(scene, pose, settings.width, settings.fov))
        if step % 10 == 0 or step == n_steps - 1:
            maps = [online.maps(p) for p in probes]
            rows_c.append(np.concatenate([np.clip(m.color.data, 0, 1) for m in maps]))
            rows_u.append(np.concatenate([m.uncertainty.data[0] for m in maps]))
    peak = max(float(np.max(rows_u)), 1e-12)
    io.write_ppm(out / "probe_color.ppm", np.concatenate([io.strip_image(c, 4) for c in rows_c]))
    io.write_ppm(out / "probe_uncertainty.ppm",
                 np.concatenate([io.strip_image(np.repeat((u / peak)[:, None], 3, axis=1), 4) for u in rows_u]))
    io.write_csv(out / "probe_uncertainty.csv", ["row"] + [f"px{i}" for i in range(len(rows_u[0]))],
                 [[i] + [f"{v:.6g}" for v in u] for i, u in enumerate(rows_u)])
    io.write_csv(out / "field_loss.csv", ["step", "loss"], [[i, f"{v:.6f}"] for i, v in enumerate(online.losses)])
    T.save_tensors(out / "field.ckpt", online.field.state_dict())
    return out


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="uncnav", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, help="concurrent evaluation episodes")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-scenes", parents=[common], help="write train/val scene files and a manifest")
    p = sub.add_parser("train", parents=[common], help="train one policy by imitation")
    p.add_argument("--ablate", default=None, help=f"one of {sorted(C.ABLATIONS)}")
    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints on the validation split")
    p.add_argument("--ablate", action="append", default=None, help="config(s) to evaluate; repeatable")
    p.add_argument("--dump-viz", type=int, default=None, metavar="N", help="image sets for the first N episodes")
    p = sub.add_parser("ablate", parents=[common], help="train and evaluate the six ablation rows")
    p.add_argument("--dump-viz", type=int, default=None, metavar="N")
    sub.add_parser("viz", parents=[common], help="two-room uncertainty strips and field-loss CSV")
    return ap


def resolve_config(args) -> C.RunConfig:
    cfg = C.load(args.config) if args.config else C.RunConfig()
    pairs = {}
    for item in args.set:
        if "=" not in item:
            raise C.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    for key in ("seed", "out", "workers"):
        if getattr(args, key, None) is not None:
            pairs[key] = str(getattr(args, key))
    if getattr(args, "dump_viz", None) is not None:
        pairs["dump_viz"] = str(args.dump_viz)
    cfg = C.parse_pairs(pairs, cfg)
    ablate = getattr(args, "ablate", None)
    if isinstance(ablate, str):
        cfg = cfg.with_ablation(ablate)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "gen-scenes":
            entries = gen_scenes(cfg, cfg.scene_path)
            print(f"wrote {len(entries)} scenes to {cfg.scene_path}")
        elif args.command == "train":
            print(f"checkpoint: {train(cfg)}")
        elif args.command == "eval":
            names = [C.canonical_ablation(a) for a in args.ablate] if args.ablate else [cfg.ablation_name]
            _print_rows(evaluate(cfg, names))
        elif args.command == "ablate":
            for name in C.GRID_ROWS:
                train(cfg.with_ablation(name))
            _print_rows(evaluate(cfg, list(C.GRID_ROWS)))
        elif args.command == "viz":
            print(f"wrote {viz(cfg)}")
    except Exception as exc:  # any failure, including a crashed episode, ends with a nonzero status
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def _print_rows(rows: list[dict]) -> None:
    print(",".join(io.METRIC_HEADER))
    for cells in io.format_metric_rows(rows):
        print(",".join(str(c) for c in cells))


if __name__ == "__main__":
    sys.exit(main())
