"""Command-line entry point: ``gsinpaint <subcommand> [flags]``.

Every run writes ``manifest.json`` into its ``--out`` directory recording the
argv, resolved configuration, seed, thread count and package version.
``gsinpaint replay MANIFEST --out DIR`` reruns the same command into DIR.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("gsinpaint")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
TIMING_FILE = "timing.json"  # wall-clock numbers, excluded from replay comparisons


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared helpers --------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"--config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"--config file {p} is not valid JSON: {e}") from e


def _write_manifest(out: Path, args, argv, config: dict) -> None:
    doc = {
        "command": args.command,
        "argv": list(argv),
        "seed": args.seed,
        "threads": args.threads,
        "version": __version__,
        "config": config,
    }
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _set_threads(n: int | None) -> None:
    if n is None:
        return
    import numba
    from threadpoolctl import threadpool_limits

    threadpool_limits(n)
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _scene_dirs(paths: list[str]) -> list[Path]:
    out = []
    for p in map(Path, paths):
        if (p / "scene.json").exists():
            out.append(p)
        elif p.is_dir():
            found = sorted(d for d in p.iterdir() if (d / "scene.json").exists())
            if not found:
                raise FileNotFoundError(f"no scene directories (with scene.json) under {p}")
            out.extend(found)
        else:
            raise FileNotFoundError(f"scene.json not found in {p}")
    return out


def _load_scenes(paths):
    from .synth import read_scene

    return [read_scene(d) for d in _scene_dirs(paths)]


def _overrides(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


# -- subcommands --------------------------------------------------------------------

def cmd_synth(args, out: Path) -> dict:
    from .synth import SceneConfig, gen_scene, write_scene

    cfg = SceneConfig(**{**_load_config(args.config).get("scene", {}),
                         **_overrides(args, ["n_frames", "image_size", "n_objects", "background_style"])})
    cfg.validate()
    seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.scenes)
    for i, s in enumerate(seeds):
        clip = gen_scene(int(s), cfg)
        write_scene(clip, out / f"scene_{i:04d}")
        log.info("scene %d (seed %d): %d frames", i, s, len(clip))
    return {"scene": asdict(cfg), "scenes": args.scenes, "scene_seeds": [int(s) for s in seeds]}


TRAIN_FIELDS = ["lr", "batch_size", "steps", "n_supervision", "mse_weight", "feature_weight",
                "mask_encoding_mode", "log_every", "checkpoint_every"]
MODEL_FIELDS = ["patch_size", "token_dim", "num_blocks", "num_heads", "image_size"]


def _train(args, out: Path, stage: int) -> dict:
    from .model import GaussianLRM, ModelConfig
    from .train import TrainConfig, train_stage

    file_cfg = _load_config(args.config)
    tcfg = TrainConfig(**{**file_cfg.get("train", {}), **_overrides(args, TRAIN_FIELDS),
                          "stage": stage, "seed": args.seed})
    dataset = _load_scenes(args.data)
    if args.init is not None:
        model = GaussianLRM.load(args.init)
    elif stage == 2:
        raise UsageError("finetune needs --init pointing at a stage-1 checkpoint")
    else:
        mcfg = ModelConfig(**{**file_cfg.get("model", {}), **_overrides(args, MODEL_FIELDS),
                              "mask_encoding_mode": tcfg.mask_encoding_mode})
        model = GaussianLRM(mcfg, seed=args.seed)
    model, _ = train_stage(tcfg, model, dataset, out)
    return {"train": asdict(tcfg), "model": json.loads(model.cfg.to_json()), "init": args.init,
            "data": [str(d) for d in _scene_dirs(args.data)]}


def cmd_train(args, out):
    return _train(args, out, 1)


def cmd_finetune(args, out):
    return _train(args, out, 2)


def cmd_maskgen(args, out: Path) -> dict:
    from .geometry import select_input_views
    from .masks import gen_geometric_masks, gen_random_masks, sample_mask_plan, sample_ref_ellipses
    from .render.io import write_mask_png
    from .train import build_training_sample

    rng = np.random.default_rng(args.seed)
    kind, count = sample_mask_plan(rng)
    kind = args.type or kind
    count = args.count or count
    ref = args.ref_index if args.ref_index is not None else int(rng.integers(0, 4))
    if kind == "random":
        masks = gen_random_masks(rng, args.size, count, ref)
    else:
        if args.scene is None:
            raise UsageError(f"--type {kind} needs --scene")
        from .synth import read_scene

        clip = read_scene(args.scene)
        if kind == "geometric":
            idx = select_input_views(len(clip))
            size = clip.images.shape[1]
            region = sample_ref_ellipses(rng, size, count)
            masks = gen_geometric_masks(region, clip.depth[idx[ref]], [clip.cameras[k] for k in idx], ref)
        else:
            sample = build_training_sample(clip, rng, 2, plan=("object", count))
            masks = sample.masks
    for i, m in enumerate(masks.masks):
        write_mask_png(out / f"mask_{i}.png", m)
    write_mask_png(out / "reference_region.png", masks.reference_region)
    (out / "masks.json").write_text(json.dumps(
        {"mask_type": masks.mask_type, "reference_index": masks.reference_index, "count": count}, indent=2))
    return {"type": kind, "count": count, "reference_index": ref, "size": args.size, "scene": args.scene}


def cmd_inpaint(args, out: Path) -> dict:
    from .evaluate import scene_masks
    from .geometry import select_input_views
    from .masks import MaskSet
    from .model import GaussianLRM
    from .render import render
    from .render.io import read_mask_png, read_png, write_depth, write_png
    from .synth import read_scene
    from .train import infer_inpaint

    model = GaussianLRM.load(args.checkpoint)
    clip = read_scene(args.scene)
    idx = select_input_views(len(clip))
    holdout = [k for k in range(len(clip)) if k not in idx]
    if args.masks is not None:
        mdir = Path(args.masks)
        meta = json.loads((mdir / "masks.json").read_text())
        ref = int(meta["reference_index"])
        masks = MaskSet(np.stack([read_mask_png(mdir / f"mask_{i}.png") for i in range(4)]),
                        meta["mask_type"], ref, reference_region=read_mask_png(mdir / "reference_region.png"))
    else:
        ref = args.ref_index
        masks, _ = scene_masks(clip, idx, ref, holdout, args.seed)
    ref_image = read_png(args.ref_image) if args.ref_image else clip.images[idx[ref]]
    g, timing = infer_inpaint(model, clip.images[idx], [clip.cameras[k] for k in idx], masks, ref_image)
    (out / "renders").mkdir(exist_ok=True)
    for k, cam in enumerate(clip.cameras):
        r = render(g, cam, far=model.cfg.far)
        write_png(out / "renders" / f"{k:04d}.png", np.clip(r.rgb, 0, 1))
        write_depth(out / "renders" / f"{k:04d}.gidpth", r.depth)
    np.savez(out / "gaussians.npz", position=g.position, scale=g.scale, rotation=g.rotation,
             opacity=g.opacity, color=g.color)
    (out / TIMING_FILE).write_text(json.dumps(timing, indent=2))
    print(" ".join(f"{k}={v * 1e3:.1f}ms" for k, v in timing.items()))
    return {"checkpoint": args.checkpoint, "scene": args.scene, "masks": args.masks,
            "ref_image": args.ref_image, "mask_type": masks.mask_type, "reference_index": ref}


def cmd_render(args, out: Path) -> dict:
    from .render import Gaussians, render
    from .render.io import write_depth, write_png
    from .synth import read_scene

    clip = read_scene(args.scene)
    src = Path(args.gaussians) if args.gaussians else Path(args.scene) / "gaussians.npz"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found")
    z = np.load(src)
    g = Gaussians(z["position"], z["scale"], z["rotation"], z["opacity"], z["color"])
    frames = args.frames if args.frames else list(range(len(clip)))
    for k in frames:
        if not 0 <= k < len(clip):
            raise UsageError(f"--frames: frame {k} out of range (clip has {len(clip)})")
        r = render(g, clip.cameras[k], far=clip.far)
        write_png(out / f"{k:04d}.png", np.clip(r.rgb, 0, 1))
        write_depth(out / f"{k:04d}.gidpth", r.depth)
    return {"scene": args.scene, "gaussians": str(src), "frames": frames}


def cmd_eval(args, out: Path) -> dict:
    from .evaluate import run_benchmark

    scenes = _load_scenes(args.scenes)
    report = run_benchmark(args.checkpoint, scenes, args.protocol, seed=args.seed)
    (out / "report.json").write_text(report.to_json(include_timing=False))
    (out / TIMING_FILE).write_text(json.dumps(report.timing, indent=2))
    print(report.table())
    return {"checkpoint": args.checkpoint, "protocol": args.protocol,
            "scenes": [str(d) for d in _scene_dirs(args.scenes)]}


class GradcheckFailed(RuntimeError):
    pass


def cmd_gradcheck(args, out: Path) -> dict:
    from .checks import run_suite

    results = run_suite(args.instances, seed=args.seed)
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        line = f"{r.component:<22} max_rel_err {r.max_error:.3e}  threshold {r.threshold:.0e}  {status}"
        print(line)
        lines.append(line)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r.component for r in results if not r.passed]
    if failed:
        raise GradcheckFailed(f"gradient check failed for: {', '.join(failed)}")
    return {"instances": args.instances}


def cmd_replay(args, out: Path | None):
    manifest = json.loads(Path(args.manifest).read_text())
    argv = list(manifest["argv"])
    if "--out" in argv:
        argv[argv.index("--out") + 1] = str(args.out)
    else:
        argv += ["--out", str(args.out)]
    return main(argv)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "maskgen": cmd_maskgen,
    "inpaint": cmd_inpaint,
    "render": cmd_render,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file; flags override its values")
    common.add_argument("--seed", type=int, default=0, help="seed for all randomness (default 0)")
    common.add_argument("--out", help="output directory (required)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common.add_argument("--threads", type=int, help="cap numba/BLAS worker threads")

    p = _Parser(prog="gsinpaint", description="Feed-forward 3D Gaussian inpainting toolkit.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic scene clips")
    s.add_argument("--scenes", type=int, default=1, help="number of scenes")
    s.add_argument("--n-frames", dest="n_frames", type=int)
    s.add_argument("--image-size", dest="image_size", type=int)
    s.add_argument("--n-objects", dest="n_objects", type=int)
    s.add_argument("--background-style", dest="background_style", choices=["waves", "checker", "noise"])

    for name, helptext in (("train", "stage-1 reconstruction training"),
                           ("finetune", "stage-2 masked finetuning")):
        t = sub.add_parser(name, parents=[common], help=helptext)
        t.add_argument("--data", nargs="+", required=True, help="scene directories or parents of them")
        t.add_argument("--init", help="checkpoint to start from (required for finetune)")
        t.add_argument("--lr", type=float)
        t.add_argument("--batch-size", dest="batch_size", type=int)
        t.add_argument("--steps", type=int)
        t.add_argument("--n-supervision", dest="n_supervision", type=int)
        t.add_argument("--mse-weight", dest="mse_weight", type=float)
        t.add_argument("--feature-weight", dest="feature_weight", type=float)
        t.add_argument("--mask-encoding-mode", dest="mask_encoding_mode",
                       choices=["reference_only", "all_views", "inpaint_views"])
        t.add_argument("--log-every", dest="log_every", type=int)
        t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        for f in MODEL_FIELDS:
            t.add_argument("--" + f.replace("_", "-"), dest=f, type=int)

    m = sub.add_parser("maskgen", parents=[common], help="generate one mask set")
    m.add_argument("--type", choices=["object", "geometric", "random"], help="default: sampled")
    m.add_argument("--count", type=int, choices=[1, 2, 3, 4], help="default: sampled")
    m.add_argument("--size", type=int, default=64, help="image size for random masks")
    m.add_argument("--scene", help="scene directory (object and geometric masks)")
    m.add_argument("--ref-index", dest="ref_index", type=int, choices=[0, 1, 2, 3])

    i = sub.add_parser("inpaint", parents=[common], help="inpaint a scene and render every frame")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True)
    i.add_argument("--masks", help="directory written by maskgen (default: largest valid instance)")
    i.add_argument("--ref-image", dest="ref_image", help="RGB file replacing the reference view")
    i.add_argument("--ref-index", dest="ref_index", type=int, default=0, choices=[0, 1, 2, 3])

    r = sub.add_parser("render", parents=[common], help="render stored Gaussians at scene cameras")
    r.add_argument("--scene", required=True)
    r.add_argument("--gaussians", help="npz file (default: the scene's gaussians.npz)")
    r.add_argument("--frames", type=int, nargs="*")

    e = sub.add_parser("eval", parents=[common], help="run the inpainting benchmark")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", nargs="+", required=True)
    e.add_argument("--protocol", choices=["gt_reference", "reconstruction"], default="gt_reference")

    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    g.add_argument("--instances", type=int, default=10, help="random instances per op")

    rp = sub.add_parser("replay", help="rerun a command from its manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if args.command == "replay":
        try:
            return cmd_replay(args, None)
        except (OSError, KeyError, json.JSONDecodeError) as e:
            print(f"gsinpaint replay: error: {e}", file=sys.stderr)
            return EXIT_RUNTIME
    if args.out is None:
        print(f"gsinpaint {args.command}: error: the following arguments are required: --out", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _set_threads(args.threads)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        config = COMMANDS[args.command](args, out)
        _write_manifest(out, args, argv, config)
    except UsageError as e:
        print(f"gsinpaint {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - top-level diagnostic
        log.debug("failure", exc_info=True)
        print(f"gsinpaint {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
