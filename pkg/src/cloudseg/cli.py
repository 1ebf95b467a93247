"""Command-line interface.

Subcommands: profile (parameter/MAC report, optionally the four-row ablation
table), train, eval, predict (stitched mask plus an error overlay), gradcheck
(finite-difference suite) and synth (synthetic scene emission). All failures
exit nonzero after printing one JSON error line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from .data import load_scene, save_scene, synth_scene, write_mask_pgm, write_overlay_ppm
from .gradcheck import run_block_suite
from .metrics import report_csv
from .model import CloudSegModel, ModelConfig, ablation_variants, load_checkpoint
from .profiler import COUNTING_NOTE, cost
from .train import TrainConfig, error_overlay, evaluate_scenes, predict_scene, train


def _read_config(path) -> tuple[ModelConfig, dict]:
    """Config JSON: either a bare model config or {"model": ..., "train": ...}."""
    raw = json.loads(Path(path).read_text())
    if "model" in raw:
        return ModelConfig.from_dict(raw["model"]), raw.get("train", {})
    return ModelConfig.from_dict(raw), {}


def _parse_input_shape(text: str) -> tuple[int, ...]:
    parts = [int(p) for p in text.lower().split("x")]
    if len(parts) == 3:
        return (1, *parts)
    if len(parts) == 4:
        return tuple(parts)
    raise ValueError(f"--input must be CxHxW or NxCxHxW, got '{text}'")


def _discover_scenes(data_dir) -> list:
    manifests = sorted(Path(data_dir).glob("*/manifest.json"))
    if not manifests:
        raise FileNotFoundError(f"no scene manifests under {data_dir}")
    return [load_scene(m) for m in manifests]


def _scenes_to_patches(scenes, patch_size):
    from .data import crop
    patches = []
    for scene in scenes:
        patches.extend(crop(scene, patch_size).patches)
    return patches


def cmd_profile(args) -> int:
    config, _ = _read_config(args.config)
    shape = _parse_input_shape(args.input)
    if args.ablation:
        rows = []
        for name, cfg in ablation_variants(config):
            report = cost(CloudSegModel(cfg), shape)
            rows.append({"method": name, "params_m": f"{report.total_params / 1e6:.2f}",
                         "gflops": f"{report.gflops:.2f}"})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=["method", "params_m", "gflops"])
        writer.writeheader()
        writer.writerows(rows)
        text = buf.getvalue()
    else:
        report = cost(CloudSegModel(config), shape)
        text = report.to_csv()
        if args.json_out:
            Path(args.json_out).write_text(report.to_json())
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    print(f"# {COUNTING_NOTE}", file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    config, train_overrides = _read_config(args.config)
    scenes = _discover_scenes(args.data)
    if scenes[0].bands.shape[0] != config.bands:
        raise ValueError(f"config expects {config.bands} bands, data has {scenes[0].bands.shape[0]}")
    patches = _scenes_to_patches(scenes, args.patch_size)
    preset = TrainConfig.desk if args.preset == "desk" else TrainConfig.paper
    overrides = dict(train_overrides)
    for key in ("lr0", "momentum", "batch_size", "epochs", "max_steps", "val_fraction", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    tcfg = preset(**overrides)
    model = CloudSegModel(config)
    result = train(model, patches, tcfg, checkpoint_path=args.out, log=print)
    curve_path = Path(args.curve) if args.curve else Path(str(args.out) + ".curve.csv")
    curve_path.write_text(result.loss_curve_csv)
    print(f"checkpoint: {args.out}")
    print(f"loss curve: {curve_path}")
    if result.val_metrics is not None:
        print("validation:", result.val_metrics.as_row())
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    scenes = _discover_scenes(args.data)
    if scenes[0].bands.shape[0] != model.config.bands:
        raise ValueError(f"checkpoint expects {model.config.bands} bands, "
                         f"data has {scenes[0].bands.shape[0]}")
    # stitched-scene counting: patch merging and whole-scene metrics agree,
    # and reflect-padding pixels are trimmed before counting
    _, mset = evaluate_scenes(model, scenes, args.patch_size)
    report = cost(CloudSegModel(model.config), (1, model.config.bands, args.patch_size, args.patch_size))
    row = {"method": Path(args.ckpt).stem, **mset.as_row(),
           "params_m": f"{report.total_params / 1e6:.2f}", "gflops": f"{report.gflops:.2f}"}
    text = report_csv([row])
    Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.ckpt)
    scene = load_scene(args.manifest)
    if scene.bands.shape[0] != model.config.bands:
        raise ValueError(f"checkpoint expects {model.config.bands} bands, "
                         f"scene has {scene.bands.shape[0]}")
    mask = predict_scene(model, scene, args.patch_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask_path = out / f"{scene.id}_mask.pgm"
    overlay_path = out / f"{scene.id}_overlay.ppm"
    write_mask_pgm(mask_path, mask)
    write_overlay_ppm(overlay_path, error_overlay(mask, scene.mask))
    print(f"mask: {mask_path}")
    print(f"overlay: {overlay_path}")
    return 0


def cmd_gradcheck(args) -> int:
    model_config = _read_config(args.config)[0] if args.config else None
    results = run_block_suite(seed=args.seed, max_per_tensor=args.max_per_tensor,
                              model_config=model_config)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max_rel_err={r.max_rel_error:.3e} (tol {r.tolerance:g})")
        failed += 0 if r.passed else 1
    if failed:
        raise RuntimeError(f"{failed} block(s) failed the gradient check")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    manifests = []
    for i in range(args.scenes):
        density = float(rng.uniform(args.density_min, args.density_max))
        scene = synth_scene(seed=args.seed + i, size=args.size, bands=args.bands,
                            cloud_density=density, texture_level=args.texture,
                            scene_id=f"scene_{i:04d}")
        manifest = save_scene(scene, out / scene.id)
        manifests.append(str(manifest.relative_to(out)))
    (out / "index.json").write_text(json.dumps({"scenes": manifests}, indent=2))
    print(f"wrote {args.scenes} scenes under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudseg",
                                     description="Lightweight cloud segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="parameter/MAC report at an input shape")
    p.add_argument("--config", required=True)
    p.add_argument("--input", default="4x384x384")
    p.add_argument("--ablation", action="store_true", help="emit the four-row ablation table")
    p.add_argument("--out", help="write the CSV here as well as stdout")
    p.add_argument("--json-out", dest="json_out", help="write the JSON report here")
    p.set_defaults(fn=cmd_profile)

    p = sub.add_parser("train", help="train on a scene directory")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--curve", help="loss-curve CSV path")
    p.add_argument("--patch-size", type=int, default=384)
    p.add_argument("--preset", choices=["paper", "desk"], default="desk")
    p.add_argument("--lr0", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--patch-size", type=int, default=384)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="stitched mask + error overlay for one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=384)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", help="model config for the end-to-end check (keep it tiny)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-per-tensor", dest="max_per_tensor", type=int, default=6)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("synth", help="emit synthetic scenes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--size", type=int, default=384)
    p.add_argument("--bands", type=int, default=4)
    p.add_argument("--density-min", dest="density_min", type=float, default=0.2)
    p.add_argument("--density-max", dest="density_max", type=float, default=0.7)
    p.add_argument("--texture", type=float, default=0.6)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
