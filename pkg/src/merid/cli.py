"""Command-line entry point: ``merid <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .camera import Camera
from .config import SETTINGS, load_config
from .data import DEFAULT_FEWSHOT, load_manifest, make_splits, read_image, write_image
from .head import AdaptConfig
from .pipeline import (adapt_scene, dump_json, enhance_views, format_table, load_gaussians, load_head,
                       load_pipeline, reconstruct, render_views, run_ablation, run_pipeline, run_train_base,
                       save_gaussians, save_head, setting_checkpoint)
from .synth import (SyntheticDegradation, base_scene_spec, single_sphere_spec, synth_scene, unseen_scene_spec,
                    write_scene)

logger = logging.getLogger("merid")

SCENES = {"base": base_scene_spec, "unseen": unseen_scene_spec, "sphere": single_sphere_spec}


def _overrides(pairs) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, **extra):
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    overrides.update({k: str(v) for k, v in extra.items() if v is not None})
    return load_config(args.config, overrides)


def _heatmap(plane: np.ndarray) -> np.ndarray:
    lo, hi = float(plane.min()), float(plane.max())
    norm = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    return np.repeat(norm[..., None], 3, axis=-1).astype(np.float32)


# ---------------------------------------------------------------------------


def cmd_synth_data(args):
    spec = SCENES[args.scene]()
    w, h = args.resolution
    manifest, _ = synth_scene(spec, args.views, (w, h), seed=args.seed or 0,
                              degradation=SyntheticDegradation(attenuation=args.attenuation),
                              name=args.name or args.scene)
    write_scene(manifest, args.out)
    print(f"wrote {len(manifest.views)} views to {args.out}")


def cmd_train_base(args):
    cfg = _config(args)
    if args.setting:
        cfg = cfg.for_setting(args.setting)
    out = Path(args.out)
    if out.is_dir() or not out.suffix:
        out = setting_checkpoint(out, cfg.setting or "custom")
    out.parent.mkdir(parents=True, exist_ok=True)
    res = run_train_base(cfg, load_manifest(args.data), out, resume=args.resume)
    for step, value in res.val_psnr:
        print(f"step {step:6d}  val PSNR {value:.2f} dB")
    print(f"checkpoint: {res.checkpoint}")


def cmd_adapt(args):
    cfg = _config(args, **{"adapt.k_views": args.views, "adapt.iters": args.iters})
    manifest = load_manifest(args.data)
    _, enhancer, head, _ = load_pipeline(args.checkpoint)
    history = []
    head = adapt_scene(manifest, cfg, enhancer, head, history)
    out = Path(args.out) if args.out else Path(args.data) / f"{manifest.scene_name}.head"
    save_head(out, head, cfg, {"final_loss": history[-1]})
    print(f"adapted head ({cfg.adapt.k_views} views, {cfg.adapt.iters} iters, final L1 {history[-1]:.4f}): {out}")


def cmd_enhance(args):
    _, enhancer, head, _ = load_pipeline(args.checkpoint)
    head = load_head(args.head) if args.head else None
    if args.input:
        items = [(Path(p).stem, read_image(p)) for p in args.input]
    else:
        manifest = load_manifest(args.data)
        items = [(v.view_id, v.read_low()) for v in manifest.views]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enhancer.set_debug(args.debug)
    for (name, low), img in zip(items, enhance_views(enhancer, head, [low for _, low in items])):
        write_image(out / f"{name}.png", img)
        if args.debug:
            _write_debug(enhancer, low, out / "debug" / name)
    print(f"enhanced {len(items)} images into {out}")


def _write_debug(enhancer, low, folder: Path):
    from .retinex import to_batch
    folder.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        _, diag = enhancer(to_batch(low))
    if diag.gain is not None:
        write_image(folder / "gain.png", _heatmap(diag.gain[0, 0].numpy()))
        write_image(folder / "lum_map.png", _heatmap(diag.lum_map[0].mean(0).clamp(0, 12).numpy()))
    energies = {}
    for i, block in enumerate(diag.attention):
        if "gate" in block:
            write_image(folder / f"gate_{i}.png", _heatmap(block["gate"][0].mean(0).numpy()))
        if "band_energy" in block:
            energies[f"block_{i}"] = [e.flatten().tolist() for e in block["band_energy"]]
    (folder / "band_energy.json").write_text(dump_json(energies))


def cmd_reconstruct(args):
    cfg = _config(args)
    manifest = load_manifest(args.data)
    _, enhancer, head, _ = load_pipeline(args.checkpoint)
    head = load_head(args.head) if args.head else None
    split = make_splits(manifest, seed=cfg.seed)
    views = manifest.subset(split.reconstruction_train)
    images = enhance_views(enhancer, head, [v.read_low() for v in views])
    scene = reconstruct(images, [v.camera for v in views], cfg, manifest.scene_bbox())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_gaussians(out / "gaussians.ckpt", scene)
    test = manifest.subset(split.test)
    frames = dict(zip(split.test, render_views(scene, [v.camera for v in test])))
    for vid, img in frames.items():
        write_image(out / f"{vid}.png", img)
    print(f"{len(scene)} gaussians saved to {out / 'gaussians.ckpt'}")


def cmd_render(args):
    scene = load_gaussians(args.scene)
    records = json.loads(Path(args.camera_path).read_text())
    if isinstance(records, dict):
        records = records.get("cameras", [])
    cams = [Camera.from_dict(r) for r in records]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(render_views(scene, cams)):
        write_image(out / f"frame_{i:04d}.png", img)
    print(f"rendered {len(cams)} frames into {out}")


def cmd_evaluate(args):
    cfg = _config(args, lpips_provider=args.lpips)
    res = run_pipeline(load_manifest(args.data), args.checkpoint, cfg, args.out,
                       adapt_head=not args.zero_shot, source=args.source, head_path=args.head)
    nv = res.report["novel_view"]
    print(f"novel-view PSNR {nv['psnr']}  SSIM {nv['ssim']:.4f}  LPIPS {nv['lpips']['value']}")
    print("stage times: " + ", ".join(f"{k} {v:.1f}s" for k, v in res.timings.items()))


def cmd_ablate(args):
    cfg = _config(args, lpips_provider=args.lpips)
    settings = args.setting or None
    table = run_ablation(load_manifest(args.data), args.checkpoints, settings, cfg,
                         table4=args.table4, reconstruct_scene=args.reconstruct)
    print(format_table(table))
    if args.out:
        Path(args.out).write_text(dump_json(table))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.steps=200 (repeatable)")
    common.add_argument("--seed", type=int, help="seed threaded through every stage")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="merid", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", parents=[common], help="generate a synthetic paired scene")
    s.add_argument("--out", required=True)
    s.add_argument("--scene", choices=sorted(SCENES), default="base")
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--resolution", type=int, nargs=2, default=(64, 64), metavar=("W", "H"))
    s.add_argument("--attenuation", type=float, default=0.12)
    s.add_argument("--name")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train-base", parents=[common], help="train the enhancer on a base scene")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint file, or a directory (no suffix) for setting_<name>.ckpt")
    s.add_argument("--setting", choices=list(SETTINGS))
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_train_base)

    s = sub.add_parser("adapt", parents=[common], help="fit the reflection head to a new scene")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--views", type=int, default=DEFAULT_FEWSHOT)
    s.add_argument("--iters", type=int, default=AdaptConfig.iters)
    s.add_argument("--out", help="head file (default <data>/<scene>.head)")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("enhance", parents=[common], help="enhance low-light images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--head")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--input", nargs="+")
    s.add_argument("--out", required=True)
    s.add_argument("--debug", action="store_true", help="dump gain, luminance-map and gate heatmaps")
    s.set_defaults(func=cmd_enhance)

    s = sub.add_parser("reconstruct", parents=[common], help="fit gaussians to enhanced reconstruction views")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--head")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("render", parents=[common], help="render a gaussian scene along a camera path")
    s.add_argument("--scene", required=True, help="gaussians checkpoint")
    s.add_argument("--camera-path", required=True, help="JSON list of camera records")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("evaluate", parents=[common], help="run the full scene pipeline and score test views")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--head", help="use a saved head instead of adapting")
    s.add_argument("--zero-shot", action="store_true", help="skip head adaptation")
    s.add_argument("--source", choices=("enhanced", "low"), default="enhanced")
    s.add_argument("--lpips", help="external LPIPS scorer command")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="metrics table over ablation settings")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoints", required=True, help="directory holding setting_<name>.ckpt files")
    s.add_argument("--setting", action="append", choices=list(SETTINGS))
    s.add_argument("--table4", action="store_true", help="settings 1, 2, 4 without the head on held-out base views")
    s.add_argument("--reconstruct", action="store_true", help="score novel-view renders instead of 2D outputs")
    s.add_argument("--lpips")
    s.add_argument("--out", help="write the table as JSON")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, KeyError, FloatingPointError, MemoryError) as exc:
        print(f"merid {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
