"""Orchestration: base training, scene adaptation, reconstruction, evaluation and ablations."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import SETTINGS, PipelineConfig
from .data import SceneManifest, make_splits, sample_fewshot, write_image
from .gsplat import GaussianScene, init_scene, optimize, render
from .head import ReflectionHead, adapt, enhance_images, zero_shot_vs_adapted_report
from .isfga import Enhancer
from .metrics import evaluate_images, psnr, ssim_torch
from .retinex import from_batch

logger = logging.getLogger(__name__)


def build_enhancer(cfg: PipelineConfig) -> Enhancer:
    r = cfg.retinex
    return Enhancer(cfg.unet, r.radius, r.gain_hidden, r.state_channels, cfg.erid, cfg.isfga,
                    r.g_min, r.g_max, r.eps)


def build_head(cfg: PipelineConfig) -> ReflectionHead:
    # seeded locally so a fresh head does not depend on whatever consumed the global RNG before
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        return ReflectionHead(cfg.head.hidden)


# ---------------------------------------------------------------------------
# checkpoints


def pipeline_checkpoint(cfg: PipelineConfig, enhancer: Enhancer, head: ReflectionHead | None = None,
                        step: int = 0, extra: dict | None = None) -> ckpt_io.Checkpoint:
    sections = {
        "retinex": ckpt_io.module_arrays(enhancer.decoupler),
        "isfga": ckpt_io.module_arrays(enhancer.unet),
    }
    if head is not None:
        sections["head"] = ckpt_io.module_arrays(head)
    return ckpt_io.Checkpoint(cfg.to_dict(), sections, step, extra or {})


def save_pipeline(path, cfg, enhancer, head=None, step=0, extra=None):
    ckpt_io.save_checkpoint(path, pipeline_checkpoint(cfg, enhancer, head, step, extra))


def load_pipeline(path) -> tuple[PipelineConfig, Enhancer, ReflectionHead, ckpt_io.Checkpoint]:
    ck = ckpt_io.load_checkpoint(path)
    cfg = PipelineConfig.from_dict(ck.config)
    enhancer = build_enhancer(cfg)
    ckpt_io.load_module_arrays(enhancer.decoupler, ck.sections["retinex"])
    ckpt_io.load_module_arrays(enhancer.unet, ck.sections["isfga"])
    head = build_head(cfg)
    if "head" in ck.sections:
        ckpt_io.load_module_arrays(head, ck.sections["head"])
    enhancer.eval()
    head.eval()
    return cfg, enhancer, head, ck


def save_head(path, head: ReflectionHead, cfg: PipelineConfig | None = None, extra: dict | None = None):
    config = {"head": {"hidden": head.hidden}}
    if cfg is not None:
        config["seed"] = cfg.seed
    ckpt_io.save_checkpoint(path, ckpt_io.Checkpoint(config, {"head": ckpt_io.module_arrays(head)},
                                                     extra=extra or {}))


def load_head(path) -> ReflectionHead:
    ck = ckpt_io.load_checkpoint(path)
    if "head" not in ck.sections:
        raise ckpt_io.CheckpointError(f"{path} has no head section")
    head = ReflectionHead(int(ck.config.get("head", {}).get("hidden", 16)))
    ckpt_io.load_module_arrays(head, ck.sections["head"])
    head.eval()
    return head


def save_gaussians(path, scene: GaussianScene, extra: dict | None = None):
    ckpt_io.save_sections(path, {"gaussians": scene.arrays()}, extra)


def load_gaussians(path) -> GaussianScene:
    ck = ckpt_io.load_checkpoint(path)
    if "gaussians" not in ck.sections:
        raise ckpt_io.CheckpointError(f"{path} has no gaussians section")
    return GaussianScene.from_arrays(ck.sections["gaussians"])


# ---------------------------------------------------------------------------
# timing


@dataclass
class Timer:
    stages: dict = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0
            logger.info("%s: %.2fs", name, self.stages[name])

    @property
    def total(self) -> float:
        return sum(self.stages.values())


# ---------------------------------------------------------------------------
# base training


def _ssim_window(size: int) -> int:
    w = min(11, size)
    return w if w % 2 else w - 1


def base_loss(pred: torch.Tensor, target: torch.Tensor, ssim_weight: float = 0.2) -> torch.Tensor:
    """L1 + ssim_weight * (1 - SSIM); small crops shrink the SSIM window."""
    l1 = (pred - target).abs().mean()
    if ssim_weight == 0:
        return l1
    window = _ssim_window(min(pred.shape[-2:]))
    if window < 3:
        return l1
    return l1 + ssim_weight * (1 - ssim_torch(pred, target, window))


def _random_crops(images, crop: int, batch: int, rng: np.random.Generator):
    lows, normals = [], []
    for _ in range(batch):
        low, normal = images[int(rng.integers(len(images)))]
        h, w = low.shape[:2]
        c = min(crop, h, w)
        y, x = int(rng.integers(h - c + 1)), int(rng.integers(w - c + 1))
        lows.append(low[y:y + c, x:x + c])
        normals.append(normal[y:y + c, x:x + c])
    return np.stack(lows), np.stack(normals)


@torch.no_grad()
def validation_psnr(enhancer: Enhancer, pairs) -> float:
    outs = enhance_images(enhancer, [low for low, _ in pairs])
    return float(np.mean([psnr(np.clip(from_batch(r), 0, 1), normal) for r, (_, normal) in zip(outs, pairs)]))


@dataclass
class TrainResult:
    checkpoint: Path
    step: int
    val_psnr: list  # [step, psnr] pairs
    losses: list


def run_train_base(cfg: PipelineConfig, manifest: SceneManifest, out_path, resume: bool = False) -> TrainResult:
    """Train decoupling + U-Net on the preprocessing split; validate on the reconstruction split.

    The checkpoint at ``out_path`` is rewritten at every validation, so a divergent run
    leaves the last good state on disk.
    """
    out_path = Path(out_path)
    tc = cfg.train
    split = make_splits(manifest, seed=cfg.seed)
    train = [(v.read_low(), v.read_normal()) for v in manifest.subset(split.preprocess_train)]
    val = [(v.read_low(), v.read_normal()) for v in manifest.subset(split.reconstruction)]

    torch.manual_seed(cfg.seed)
    enhancer = build_enhancer(cfg)
    step, val_hist = 0, []
    if resume:
        if not out_path.exists():
            raise FileNotFoundError(f"cannot resume: {out_path} does not exist")
        prev_cfg, enhancer, _, ck = load_pipeline(out_path)
        if (prev_cfg.erid, prev_cfg.isfga) != (cfg.erid, cfg.isfga):
            raise ValueError("resume checkpoint was trained with different module toggles")
        step = ck.step
        val_hist = list(ck.extra.get("val_psnr", []))
    enhancer.train()
    opt = torch.optim.Adam(enhancer.parameters(), lr=tc.lr)
    # a single oversized early step can push outputs past the clamp margin, where gradients vanish for good
    start = step
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: min(1.0, (start + i + 1) / max(tc.warmup, 1)))
    losses = []

    def checkpoint_now():
        val_hist.append([step, validation_psnr(enhancer, val)])
        logger.info("step %d: validation PSNR %.2f dB", step, val_hist[-1][1])
        save_pipeline(out_path, cfg, enhancer, None, step, {"val_psnr": val_hist})
        enhancer.train()

    if not val_hist:
        checkpoint_now()
    while step < tc.steps:
        # per-step generator keeps resumed runs on the same crop sequence
        rng = np.random.default_rng([cfg.seed, step])
        low, normal = _random_crops(train, tc.crop, tc.batch, rng)
        low_t = torch.as_tensor(low).permute(0, 3, 1, 2).float()
        normal_t = torch.as_tensor(normal).permute(0, 3, 1, 2).float()
        pred, _ = enhancer(low_t)
        value = base_loss(pred, normal_t, tc.ssim_weight)
        if not torch.isfinite(value):
            raise FloatingPointError(
                f"non-finite training loss at step {step + 1}; last good checkpoint kept at {out_path}")
        opt.zero_grad(set_to_none=True)
        value.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(enhancer.parameters(), tc.grad_clip)
        opt.step()
        sched.step()
        step += 1
        losses.append(value.item())
        if step % tc.val_every == 0 or step == tc.steps:
            checkpoint_now()
    return TrainResult(out_path, step, val_hist, losses)


# ---------------------------------------------------------------------------
# scene pipeline


def fewshot_pairs(manifest: SceneManifest, cfg: PipelineConfig):
    split = make_splits(manifest, seed=cfg.seed)
    ids = sample_fewshot(split, cfg.adapt.k_views)
    return ids, [(v.read_low(), v.read_normal()) for v in manifest.subset(ids)]


def adapt_scene(manifest: SceneManifest, cfg: PipelineConfig, enhancer: Enhancer, head: ReflectionHead,
                history: list | None = None) -> ReflectionHead:
    _, pairs = fewshot_pairs(manifest, cfg)
    return adapt(enhancer, head, pairs, cfg.adapt, history=history)


def enhance_views(enhancer: Enhancer, head: ReflectionHead | None, lows) -> list[np.ndarray]:
    r0 = enhance_images(enhancer, lows)
    with torch.no_grad():
        out = [head(r) if head is not None else r for r in r0]
    return [np.clip(from_batch(r), 0, 1).astype(np.float32) for r in out]


def reconstruct(images, cameras, cfg: PipelineConfig, bbox, history: list | None = None) -> GaussianScene:
    gs = cfg.gs
    scene = init_scene("random_in_bbox", gs.gaussians, seed=cfg.seed, bbox=bbox)
    return optimize(scene, list(zip(images, cameras)), dataclasses.replace(gs, seed=cfg.seed), history=history)


@torch.no_grad()
def render_views(scene: GaussianScene, cameras) -> list[np.ndarray]:
    return [np.clip(render(scene, cam).image.permute(1, 2, 0).numpy(), 0, 1).astype(np.float32) for cam in cameras]


@dataclass
class PipelineResult:
    report: dict
    timings: dict
    frames: dict  # view id -> rendered test image
    scene: GaussianScene
    head: ReflectionHead | None


def run_pipeline(manifest: SceneManifest, checkpoint, cfg: PipelineConfig | None = None, out_dir=None,
                 adapt_head: bool = True, source: str = "enhanced", head_path=None) -> PipelineResult:
    """Few-shot adapt, enhance the reconstruction split, fit gaussians, render and score the test views.

    ``source="low"`` reconstructs from the raw low-light views instead (no enhancement).
    ``adapt_head=False`` gives the zero-shot protocol.  Network toggles come from the
    checkpoint; ``cfg`` supplies seeds and stage settings.
    """
    if source not in ("enhanced", "low"):
        raise ValueError(f"unknown reconstruction source {source!r}")
    timer = Timer()
    ck_cfg, enhancer, head, _ = load_pipeline(checkpoint)
    cfg = cfg or ck_cfg
    cfg = cfg.for_setting(ck_cfg.setting) if ck_cfg.setting else cfg
    torch.manual_seed(cfg.seed)

    split = make_splits(manifest, seed=cfg.seed)
    use_head = cfg.rf_head and source == "enhanced"
    fewshot: list[str] = []
    with timer.stage("adapt"):
        if head_path is not None:
            head = load_head(head_path)
        elif use_head and adapt_head:
            fewshot, pairs = fewshot_pairs(manifest, cfg)
            head = adapt(enhancer, head, pairs, cfg.adapt)
    if not use_head or (head_path is None and not adapt_head):
        head = None  # zero-shot: the untrained head is an identity map anyway

    recon_views = manifest.subset(split.reconstruction_train)
    test_views = manifest.subset(split.test)
    with timer.stage("enhance"):
        lows = [v.read_low() for v in recon_views]
        images = enhance_views(enhancer, head, lows) if source == "enhanced" else lows
        test_enhanced = enhance_views(enhancer, head, [v.read_low() for v in test_views])
    with timer.stage("reconstruct"):
        scene = reconstruct(images, [v.camera for v in recon_views], cfg, manifest.scene_bbox())
    with timer.stage("render"):
        frames = dict(zip(split.test, render_views(scene, [v.camera for v in test_views])))

    with timer.stage("evaluate"):
        targets = {v.view_id: v.read_normal() for v in test_views}
        novel = evaluate_images([(vid, frames[vid], targets[vid]) for vid in split.test], cfg.lpips_provider)
        enhanced2d = evaluate_images([(v.view_id, img, targets[v.view_id]) for v, img in zip(test_views, test_enhanced)],
                                     cfg.lpips_provider)
        low2d = evaluate_images([(v.view_id, v.read_low(), targets[v.view_id]) for v in test_views])
        head2d = None
        if head is not None:
            head2d = zero_shot_vs_adapted_report(
                enhancer, head, [(v.view_id, v.read_low(), targets[v.view_id]) for v in test_views])
    report = {
        "scene": manifest.scene_name,
        "setting": cfg.setting,
        "source": source,
        "adapted": head is not None,
        "seed": cfg.seed,
        "splits": {"reconstruction_train": list(split.reconstruction_train), "test": list(split.test),
                   "fewshot": fewshot},
        "gaussians": len(scene),
        "novel_view": novel.to_json(),
        "enhanced_2d": enhanced2d.to_json(),
        "low_2d": low2d.to_json(),
    }
    if head2d is not None:
        report["head_2d"] = {k: {"psnr": r.to_json()["psnr"], "ssim": r.ssim} for k, r in head2d.items()}
    timings = dict(timer.stages, total=timer.total)
    if out_dir is not None:
        write_outputs(out_dir, report, timings, frames, {v.view_id: img for v, img in zip(test_views, test_enhanced)})
        save_gaussians(Path(out_dir) / "gaussians.ckpt", scene)
        if head is not None:
            save_head(Path(out_dir) / f"{manifest.scene_name}.head", head, cfg)
    return PipelineResult(report, timings, frames, scene, head)


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def write_outputs(out_dir, report: dict, timings: dict, frames: dict, enhanced: dict | None = None):
    out = Path(out_dir)
    (out / "render").mkdir(parents=True, exist_ok=True)
    for vid, img in sorted(frames.items()):
        write_image(out / "render" / f"{vid}.png", img)
    if enhanced:
        (out / "enhanced").mkdir(exist_ok=True)
        for vid, img in sorted(enhanced.items()):
            write_image(out / "enhanced" / f"{vid}.png", img)
    # wall-clock numbers live apart from the report so reruns give identical report bytes
    (out / "report.json").write_text(dump_json(report))
    (out / "timings.json").write_text(dump_json(timings))


# ---------------------------------------------------------------------------
# ablations

TABLE4_SETTINGS = ("1", "2", "4")


def setting_checkpoint(checkpoint_dir, setting: str) -> Path:
    return Path(checkpoint_dir) / f"setting_{setting}.ckpt"


def run_ablation(manifest: SceneManifest, checkpoint_dir, settings=None, cfg: PipelineConfig | None = None,
                 table4: bool = False, reconstruct_scene: bool = False) -> dict:
    """One metrics row per setting.

    Rows score the enhanced test views in 2D; ``reconstruct_scene`` runs the full
    pipeline and scores the novel-view renders instead.  ``table4`` evaluates settings
    1, 2 and 4 without the head on the held-out views of the base scene.
    """
    cfg = cfg or PipelineConfig()
    settings = list(settings or (TABLE4_SETTINGS if table4 else SETTINGS))
    for s in settings:
        if s not in SETTINGS:
            raise ValueError(f"unknown ablation setting {s!r}; choose from {sorted(SETTINGS)}")
        if not setting_checkpoint(checkpoint_dir, s).exists():
            raise FileNotFoundError(f"missing checkpoint for setting {s}: {setting_checkpoint(checkpoint_dir, s)}")
    split = make_splits(manifest, seed=cfg.seed)
    rows = []
    for s in settings:
        t0 = time.perf_counter()
        path = setting_checkpoint(checkpoint_dir, s)
        scfg = cfg.for_setting(s)
        if reconstruct_scene and not table4:
            res = run_pipeline(manifest, path, scfg)
            metrics = res.report["novel_view"]
        else:
            _, enhancer, head, _ = load_pipeline(path)
            views = manifest.subset(split.reconstruction if table4 else split.test)
            if scfg.rf_head and not table4:
                head = adapt_scene(manifest, scfg, enhancer, head)
            else:
                head = None
            outs = enhance_views(enhancer, head, [v.read_low() for v in views])
            metrics = evaluate_images([(v.view_id, o, v.read_normal()) for v, o in zip(views, outs)],
                                      scfg.lpips_provider).to_json()
        erid, isfga, rf = SETTINGS[s]
        rows.append({"setting": s, "erid": erid, "isfga": isfga, "rf_head": rf and not table4,
                     "psnr": metrics["psnr"], "ssim": metrics["ssim"], "lpips": metrics["lpips"]["value"],
                     "time_s": time.perf_counter() - t0})
    return {"mode": "table4" if table4 else "table3", "scene": manifest.scene_name, "rows": rows}


def format_table(table: dict) -> str:
    lines = [f"{'setting':>8} {'erid':>5} {'isfga':>6} {'head':>5} {'psnr':>8} {'ssim':>7} {'lpips':>7} {'time_s':>8}"]
    for r in table["rows"]:
        lp = "-" if r["lpips"] is None else f"{r['lpips']:.3f}"
        p = r["psnr"] if isinstance(r["psnr"], str) else f"{r['psnr']:.2f}"
        lines.append(f"{r['setting']:>8} {str(r['erid'])[0]:>5} {str(r['isfga'])[0]:>6} {str(r['rf_head'])[0]:>5} "
                     f"{p:>8} {r['ssim']:>7.4f} {lp:>7} {r['time_s']:>8.1f}")
    return "\n".join(lines)


def parse_table(text: str) -> list[str]:
    """Setting labels back out of a formatted table."""
    return [line.split()[0] for line in text.strip().splitlines()[1:]]
