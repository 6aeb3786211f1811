"""Command line entry point: `fedsplat <subcommand> ...`.

Every subcommand accepts --config (TOML, see fedsplat.config) and --seed.
On failure a single JSON line {"error": ..., "type": ...} goes to stderr
and the exit code is 1 (argparse usage errors exit with 2).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .config import RunConfig, defaults_toml, load_config
from .plyio import atomic_write

log = logging.getLogger("fedsplat")

THREADS_ENV = "FEDSPLAT_THREADS"


def _apply_thread_override():
    n = os.environ.get(THREADS_ENV)
    if not n:
        return
    import numba

    numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _scene(cfg: RunConfig, scene_dir: str | None):
    from .scene import SceneSpec, generate_scene

    if scene_dir:
        with open(os.path.join(scene_dir, "scene.json")) as fh:
            meta = json.load(fh)
        spec = SceneSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["spec"].items()})
        return generate_scene(spec, meta["seed"])
    return generate_scene(cfg.scene, cfg.seed)


def _write_csv(path, rows, fields):
    with atomic_write(path, "w") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _out_dir(args, cfg):
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args, cfg):
    from .plyio import write_cameras, write_model
    from .scene import generate_scene

    out = _out_dir(args, cfg)
    scene = generate_scene(cfg.scene, cfg.seed)
    write_model(os.path.join(out, "ground_truth.ply"), scene.cloud)
    write_cameras(os.path.join(out, "cameras.json"), scene.cameras)
    write_cameras(os.path.join(out, "validation_cameras.json"), scene.val_cameras)
    with atomic_write(os.path.join(out, "images.npz")) as fh:
        np.savez_compressed(fh, train=np.array(scene.images), validation=np.array(scene.val_images))
    with atomic_write(os.path.join(out, "scene.json"), "w") as fh:
        json.dump({"seed": cfg.seed, "spec": asdict(cfg.scene)}, fh, indent=1)
    print(json.dumps({"gaussians": len(scene.cloud), "cameras": len(scene.cameras),
                      "validation": len(scene.val_cameras), "out": out}))


def cmd_train_client(args, cfg):
    from .federation import make_client
    from .plyio import write_package

    out = _out_dir(args, cfg)
    scene = _scene(cfg, args.scene)
    seed = int(np.random.SeedSequence([cfg.seed, 0]).generate_state(args.index + 1)[args.index])
    pkg, trained = make_client(scene, cfg.federation, args.index, seed, args.regime)
    write_package(out, pkg)
    print(json.dumps({"client_id": pkg.client_id, "gaussians": len(pkg.cloud),
                      "cameras": len(pkg.cameras), "final_loss": trained.losses[-1] if trained.losses else None}))


def cmd_merge(args, cfg):
    from .appearance import AppearanceModel
    from .client import ClientPackage
    from .merge import GlobalState, distill_update, merge_replacement, merge_voxel_filter
    from .plyio import read_cameras, read_model, write_model

    a, b = read_model(args.global_ply), read_model(args.local_ply)
    if args.strategy == "replace":
        cloud = merge_replacement(a, b)
    elif args.strategy == "voxel":
        cloud = merge_voxel_filter(a, b, args.voxel_size)
    else:
        cams_a = read_cameras(args.global_cameras or _sidecar(args.global_ply))
        cams_b = read_cameras(args.local_cameras or _sidecar(args.local_ply))
        bounds = np.stack([np.minimum(a.bounds[0], b.bounds[0]), np.maximum(a.bounds[1], b.bounds[1])])
        state = GlobalState(a, tuple(cams_a), AppearanceModel(seed=cfg.seed), bounds)
        state, report = distill_update(state, ClientPackage(b, tuple(cams_b), "local"), cfg.merge,
                                       seed=cfg.seed)
        cloud = state.cloud
    write_model(args.out, cloud)
    print(json.dumps({"strategy": args.strategy, "global": len(a), "local": len(b), "merged": len(cloud)}))


def _sidecar(ply_path):
    for cand in (os.path.splitext(ply_path)[0] + ".cameras.json",
                 os.path.join(os.path.dirname(ply_path), "cameras.json")):
        if os.path.exists(cand):
            return cand
    raise FileNotFoundError(f"no camera file next to {ply_path}; pass it explicitly")


def cmd_federate(args, cfg):
    from .federation import run_federation
    from .plyio import write_state

    out = _out_dir(args, cfg)
    scene = _scene(cfg, args.scene)
    state, trace = run_federation(scene, cfg.federation)
    trace.write_csv(os.path.join(out, "trace.csv"))
    write_state(os.path.join(out, "global"), state)
    rows = []
    for update, rep in sorted(trace.evaluations.items()):
        rows += [dict(update=update, **r) for r in rep.rows()]
    _write_csv(os.path.join(out, "eval.csv"), rows, ["update", "view", "psnr", "ssim"])
    print(json.dumps({"updates": len(trace.records), "gaussians": len(state.cloud),
                      "eval_psnr": trace.records[-1]["eval_psnr"], "out": out}))


def cmd_seasonal(args, cfg):
    from .federation import run_seasonal

    out = _out_dir(args, cfg)
    spec = replace(cfg.scene, seasonal=True)
    cfg = replace(cfg, scene=spec)
    scene = _scene(cfg, args.scene)
    res = run_seasonal(scene, cfg.federation)
    rows = [dict(model=m, regime=r, psnr=rep.mean_psnr, ssim=rep.mean_ssim)
            for (m, r), rep in sorted(res.scores.items())]
    _write_csv(os.path.join(out, "seasonal.csv"), rows, ["model", "regime", "psnr", "ssim"])
    for tag, tr in res.traces.items():
        tr.write_csv(os.path.join(out, f"trace_{tag.replace('->', 'to')}.csv"))
    print(json.dumps({"rows": len(rows), "out": out}))


def cmd_eval(args, cfg):
    from .metrics import evaluate_model
    from .plyio import read_state

    state = read_state(args.model)
    scene = _scene(cfg, args.scene)
    views = scene.validation(args.regime)
    rep = evaluate_model(state, views, not args.no_appearance, cfg.federation.eval_iterations,
                         cfg.federation.eval_lr)
    out = args.out or os.path.join(args.model, "eval.csv")
    _write_csv(out, rep.rows(), ["view", "psnr", "ssim"])
    print(json.dumps({"views": len(views), "psnr": rep.mean_psnr, "ssim": rep.mean_ssim}))


def cmd_plot(args, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .federation import read_trace_csv

    rows = read_trace_csv(args.trace)
    if not rows:
        raise ValueError(f"{args.trace} has no rows")
    x = [int(r["update"]) for r in rows]
    count = [float(r["n_gaussians"]) for r in rows]
    teacher = [float(r["teacher_psnr"]) if r["teacher_psnr"] else np.nan for r in rows]
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(args.width / 100, args.height / 100), dpi=100)
    ax0.plot(x, count, marker="o")
    ax0.set_xlabel("update")
    ax0.set_ylabel("Gaussians")
    ax1.plot(x, teacher, marker="o", label="teacher PSNR")
    ev = [float(r["eval_psnr"]) if r.get("eval_psnr") else np.nan for r in rows]
    if np.isfinite(ev).any():
        ax1.plot(x, ev, marker="s", label="eval PSNR")
    ax1.set_xlabel("update")
    ax1.set_ylabel("PSNR [dB]")
    ax1.legend()
    fig.tight_layout()
    out = args.out or os.path.splitext(args.trace)[0] + ".png"
    with atomic_write(out) as fh:
        fig.savefig(fh, format="png", dpi=100)
    plt.close(fig)
    print(json.dumps({"points": len(rows), "out": out}))


def cmd_config_defaults(args, cfg):
    print(defaults_toml())


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-scene", parents=[common], help="generate a synthetic scene")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("train-client", parents=[common], help="train one client, write its package")
    s.add_argument("--scene", help="directory written by gen-scene (default: from config)")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--regime", choices=("summer", "winter"))
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_client)

    s = sub.add_parser("merge", parents=[common], help="merge a local model into a global one")
    s.add_argument("global_ply")
    s.add_argument("local_ply")
    s.add_argument("--strategy", choices=("distill", "replace", "voxel"), default="distill")
    s.add_argument("--global-cameras")
    s.add_argument("--local-cameras")
    s.add_argument("--voxel-size", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_merge)

    s = sub.add_parser("federate", parents=[common], help="run a full federation")
    s.add_argument("--scene")
    s.add_argument("--out")
    s.set_defaults(func=cmd_federate)

    s = sub.add_parser("seasonal", parents=[common], help="run the seasonal scenario")
    s.add_argument("--scene")
    s.add_argument("--out")
    s.set_defaults(func=cmd_seasonal)

    s = sub.add_parser("eval", parents=[common], help="evaluate a saved global state")
    s.add_argument("model", help="directory written by federate (…/global)")
    s.add_argument("--scene")
    s.add_argument("--regime", choices=("summer", "winter"))
    s.add_argument("--no-appearance", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("plot", parents=[common], help="plot a trace CSV to PNG")
    s.add_argument("trace")
    s.add_argument("--out")
    s.add_argument("--width", type=int, default=1000)
    s.add_argument("--height", type=int, default=400)
    s.set_defaults(func=cmd_plot)

    s = sub.add_parser("config-defaults", parents=[common], help="print every config key with its default")
    s.set_defaults(func=cmd_config_defaults)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        _apply_thread_override()
        cfg = _run_config(args)
        args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        print(json.dumps({"error": str(exc), "type": type(exc).__name__, "command": args.command}),
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
