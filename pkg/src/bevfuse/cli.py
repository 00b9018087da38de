"""Experiment command line.

Every command is a pure function of (config file, flags): outputs land in a
run directory with a manifest recording the config hash and seeds, files are
written atomically (temp + rename), and nothing embeds a timestamp, so any
command re-run with the same inputs produces byte-identical files.

Subcommands: gen-scene, train, depth-sweep, eval, attn-viz, saliency,
ensemble, ablate.  See README for the config key reference.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import trainer
from .boxfusion import (box_csv_row, box_from_csv_row, CSV_FIELDS,
                        default_tta_set, ensemble_pipeline, TtaTransform)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import (RunConfig, config_hash, config_text, load_config,
                     _parse_value)
from .depth import metrics_csv_header, metrics_csv_row
from .fusion import FUSION_MODES
from .model import FusionModel
from .pgmio import to_gray8, write_pgm
from .scene import (bucket_eval, footprint_mask, generate, load_scene,
                    save_scene, transform_scene)
from .trainer import TrainingDiverged


# -- plumbing ----------------------------------------------------------------------


def atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def write_csv(path: str, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_pgm_atomic(path: str, image: np.ndarray) -> None:
    tmp = path + ".tmp"
    write_pgm(tmp, image)
    os.replace(tmp, path)


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        fields = {f.name: f for f in dataclasses.fields(RunConfig)}
        if key not in fields:
            raise ValueError(f"config key '{key}': unknown key")
        overrides[key] = _parse_value(fields[key], raw)
    if args.out:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    return cfg.validate()


def _run_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.out_dir, exist_ok=True)
    return cfg.out_dir


def write_manifest(cfg: RunConfig, command: str, outputs) -> None:
    lines = ["manifest v1",
             f"command {command}",
             f"config_hash {config_hash(cfg)}",
             f"seed {cfg.seed}"]
    lines += [f"file {name}" for name in outputs]
    atomic_write_text(os.path.join(cfg.out_dir, "manifest.txt"),
                      "\n".join(lines) + "\n")
    atomic_write_text(os.path.join(cfg.out_dir, "config.txt"), config_text(cfg))


def _fmt(value) -> str:
    return repr(float(value))


def _load_model(cfg: RunConfig, checkpoint: str | None) -> FusionModel:
    model = trainer.build_model(cfg)
    if checkpoint:
        load_checkpoint(checkpoint, model.named_parameters())
    return model


def _scene_for(cfg: RunConfig, args):
    if getattr(args, "scene", None):
        return load_scene(args.scene, cfg.scene_config())
    seed = getattr(args, "scene_seed", None)
    if seed is None:
        seed = cfg.seed + trainer.EVAL_SEED_BASE
    return generate(cfg.scene_config(), seed)


def _eval_rows(ev) -> tuple:
    """(header, rows) table for a BucketEval: per-distance-bucket counts plus
    the overall line and the bucket-averaged score."""
    header = ["bucket", "tp", "fp", "fn", "precision", "recall", "f1"]
    rows = []
    edges = (0.0,) + tuple(ev.distance_edges) + (float("inf"),)
    for d in range(ev.tp.shape[0]):
        tp, fp, fn = (int(ev.tp[d].sum()), int(ev.fp[d].sum()),
                      int(ev.fn[d].sum()))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        rows.append([f"dist_{edges[d]:g}_{edges[d + 1]:g}", tp, fp, fn,
                     _fmt(prec), _fmt(rec), _fmt(f1)])
    tp, fp, fn = int(ev.tp.sum()), int(ev.fp.sum()), int(ev.fn.sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    rows.append(["overall", tp, fp, fn, _fmt(prec), _fmt(rec),
                 _fmt(ev.overall_f1())])
    rows.append(["score", "", "", "", "", "", _fmt(ev.score())])
    return header, rows


def write_eval_csv(path: str, ev) -> None:
    header, rows = _eval_rows(ev)
    write_csv(path, header, rows)


def write_boxes_csv(path: str, boxes) -> None:
    write_csv(path, CSV_FIELDS, [box_csv_row(b) for b in boxes])


def read_boxes_csv(path: str):
    with open(path) as f:
        lines = f.read().splitlines()
    return [box_from_csv_row(line.split(",")) for line in lines[1:]]


# -- subcommands --------------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    outputs = []
    for i in range(args.count):
        name = f"scene_{i}.txt"
        scene = generate(cfg.scene_config(), cfg.seed + i)
        save_scene(scene, os.path.join(out, name))
        outputs += [name, name + ".feat"]
        print(f"{name}: {len(scene.boxes)} boxes, {len(scene.points)} points")
    write_manifest(cfg, "gen-scene", outputs)
    return 0


def _loss_csv_rows(history):
    keys = sorted({k for row in history for k in row if k != "epoch"})
    header = ["epoch"] + keys
    rows = [[row["epoch"]] + [_fmt(row.get(k, 0.0)) for k in keys]
            for row in history]
    return header, rows


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    model = trainer.build_model(cfg)
    history = trainer.train(model, cfg, trainer.training_data(cfg))
    header, rows = _loss_csv_rows(history)
    write_csv(os.path.join(out, "loss.csv"), header, rows)
    save_checkpoint(os.path.join(out, "model.ckpt"), model.named_parameters())
    ev = trainer.evaluate(model, cfg, trainer.eval_data(cfg))
    write_eval_csv(os.path.join(out, "eval.csv"), ev)
    write_manifest(cfg, "train", ["loss.csv", "model.ckpt", "eval.csv"])
    print(f"trained {cfg.epochs} epochs; "
          f"F1 {ev.overall_f1():.4f}, score {ev.score():.4f}")
    return 0


def cmd_depth_sweep(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    rows = trainer.depth_sweep_rows(cfg)

    def run_row(item):
        label, row_cfg = item
        try:
            return trainer.run_variant_row(row_cfg, label), None
        except TrainingDiverged as err:
            return (label, None, None, None, None), str(err)

    with ThreadPoolExecutor(max_workers=min(len(rows), os.cpu_count() or 1)) as pool:
        results = list(pool.map(run_row, rows))

    table = []
    outputs = ["sweep.csv"]
    for (label, score, mode_m, mean_m, _), error in results:
        if error is not None:
            name = f"row_{label}.error.txt"
            atomic_write_text(os.path.join(out, name),
                              f"row {label} aborted: {error}\n")
            outputs.append(name)
            print(f"{label}: DIVERGED ({error})")
            continue
        table.append(metrics_csv_row(label, score, mode_m, mean_m))
        print(f"{label}: score {score:.4f}" +
              ("" if mode_m is None else
               f", abs_rel {mode_m['abs_rel']:.4f}"))
    write_csv(os.path.join(out, "sweep.csv"), metrics_csv_header(), table)
    write_manifest(cfg, "depth-sweep", outputs)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    model = _load_model(cfg, args.checkpoint)
    data = trainer.eval_data(cfg)
    ev = trainer.evaluate(model, cfg, data)
    write_eval_csv(os.path.join(out, "eval.csv"), ev)
    outputs = ["eval.csv"]
    scenes = [s[-1] if isinstance(s, list) else s for s in data]
    quality = trainer.depth_quality(model, cfg, scenes)
    if quality is not None:
        write_csv(os.path.join(out, "depth.csv"), metrics_csv_header(),
                  [metrics_csv_row(cfg.variant, ev.score(), *quality)])
        outputs.append("depth.csv")
    write_manifest(cfg, "eval", outputs)
    print(f"F1 {ev.overall_f1():.4f}, score {ev.score():.4f}")
    return 0


def cmd_attn_viz(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    model = _load_model(cfg, args.checkpoint)
    scene = _scene_for(cfg, args)
    bev, planes = model.attention_bev(scene)
    mask = footprint_mask(scene.boxes, model.grid)
    total = float(bev.sum())
    ratio = float(bev[mask].sum()) / total if total > 0 else 0.0

    outputs = ["attn_bev.pgm", "attn_bev_masked.pgm", "attn_stats.txt"]
    write_pgm_atomic(os.path.join(out, "attn_bev.pgm"), to_gray8(bev))
    write_pgm_atomic(os.path.join(out, "attn_bev_masked.pgm"),
                     to_gray8(bev * mask))
    for k, plane in enumerate(planes):
        name = f"attn_cam{k}.pgm"
        write_pgm_atomic(os.path.join(out, name), to_gray8(plane))
        outputs.append(name)
    atomic_write_text(os.path.join(out, "attn_stats.txt"),
                      f"mass_inside_boxes {_fmt(ratio)}\n"
                      f"bev_total {_fmt(total)}\n")
    write_manifest(cfg, "attn-viz", outputs)
    print(f"attention mass inside boxes: {ratio:.4f}")
    return 0


def cmd_saliency(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    model = _load_model(cfg, args.checkpoint)
    scene = _scene_for(cfg, args)
    maps, info = model.saliency(scene, args.box_index)
    outputs = ["saliency_info.txt"]
    for k, sal in enumerate(maps):
        name = f"saliency_cam{k}.pgm"
        write_pgm_atomic(os.path.join(out, name),
                         np.round(sal * 255.0).astype(np.uint8))
        outputs.append(name)
    atomic_write_text(
        os.path.join(out, "saliency_info.txt"),
        f"box {args.box_index}\ncell {info['cell'][0]} {info['cell'][1]}\n"
        f"class {info['cls']}\nlogit {_fmt(info['logit'])}\n")
    write_manifest(cfg, "saliency", outputs)
    print(f"saliency for box {args.box_index}: class {info['cls']}, "
          f"cell {info['cell']}")
    return 0


def _tta_set(name: str):
    if name == "identity":
        return [TtaTransform()]
    if name == "full":
        return default_tta_set()
    raise ValueError(f"--tta must be 'identity' or 'full', got {name!r}")


def cmd_ensemble(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    models = [_load_model(cfg, path) for path in args.checkpoints.split(",")]
    tta = _tta_set(args.tta)
    thresholds = {c: cfg.wbf_radius for c in range(cfg.n_classes)}
    scenes = [generate(cfg.scene_config(), cfg.seed + trainer.EVAL_SEED_BASE + i)
              for i in range(cfg.eval_scenes)]

    before = None
    after = None
    outputs = []
    for i, scene in enumerate(scenes):
        plain = models[0].detect_scene(scene)
        ev_b = bucket_eval(plain, scene.boxes)
        before = ev_b if before is None else before.merge(ev_b)

        def make_fn(model):
            return lambda t: model.detect_scene(transform_scene(scene, t))

        fused = ensemble_pipeline([make_fn(m) for m in models], tta,
                                  thresholds)
        ev_a = bucket_eval(fused, scene.boxes)
        after = ev_a if after is None else after.merge(ev_a)
        name = f"boxes_scene{i}.csv"
        write_boxes_csv(os.path.join(out, name), fused)
        outputs.append(name)

    write_eval_csv(os.path.join(out, "eval_before.csv"), before)
    write_eval_csv(os.path.join(out, "eval_after.csv"), after)
    write_manifest(cfg, "ensemble",
                   outputs + ["eval_before.csv", "eval_after.csv"])
    print(f"score before {before.score():.4f} -> after {after.score():.4f} "
          f"({len(models)} model(s), {len(tta)} TTA pass(es))")
    return 0


ABLATE_AXES = {
    "fusion": ("fusion_mode", list(FUSION_MODES)),
    "decoder": ("decoder_layers", [1, 2]),
    "tfa": ("tfa_frames", [1, 3]),
}


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    out = _run_dir(cfg)
    if args.axis not in ABLATE_AXES:
        raise ValueError(f"--axis must be one of {sorted(ABLATE_AXES)}, "
                         f"got {args.axis!r}")
    key, values = ABLATE_AXES[args.axis]
    if args.axis == "decoder" and cfg.variant != "lift_attend_splat":
        raise ValueError("config key 'variant': the decoder ablation needs "
                         "variant=lift_attend_splat")
    rows = [(f"{key}={value}",
             dataclasses.replace(cfg, **{key: value}).validate())
            for value in values]

    def run_row(item):
        label, row_cfg = item
        try:
            model = trainer.build_model(row_cfg)
            trainer.train(model, row_cfg, trainer.training_data(row_cfg))
            ev = trainer.evaluate(model, row_cfg, trainer.eval_data(row_cfg))
            return label, ev, None
        except TrainingDiverged as err:
            return label, None, str(err)

    with ThreadPoolExecutor(max_workers=min(len(rows), os.cpu_count() or 1)) as pool:
        results = list(pool.map(run_row, rows))

    table = []
    outputs = ["ablate.csv"]
    for label, ev, error in results:
        if error is not None:
            name = f"row_{label}.error.txt"
            atomic_write_text(os.path.join(out, name),
                              f"row {label} aborted: {error}\n")
            outputs.append(name)
            print(f"{label}: DIVERGED ({error})")
            continue
        table.append([label, _fmt(ev.overall_f1()), _fmt(ev.score())])
        print(f"{label}: F1 {ev.overall_f1():.4f}, score {ev.score():.4f}")
    write_csv(os.path.join(out, "ablate.csv"), ["row", "f1", "score"], table)
    write_manifest(cfg, "ablate", outputs)
    return 0


# -- argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bevfuse",
        description="camera-lidar BEV fusion experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--out", help="run directory (overrides out_dir)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key")

    p = sub.add_parser("gen-scene", help="write synthetic scene files")
    common(p)
    p.add_argument("--count", type=int, default=1)
    p.set_defaults(fn=cmd_gen_scene)

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("depth-sweep", help="depth supervision study")
    common(p)
    p.set_defaults(fn=cmd_depth_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("attn-viz", help="BEV attention / depth scatter images")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scene", help="scene file (from gen-scene)")
    p.add_argument("--scene-seed", type=int, dest="scene_seed")
    p.set_defaults(fn=cmd_attn_viz)

    p = sub.add_parser("saliency", help="class-logit gradient images")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--scene", help="scene file (from gen-scene)")
    p.add_argument("--scene-seed", type=int, dest="scene_seed")
    p.add_argument("--box-index", type=int, default=0, dest="box_index")
    p.set_defaults(fn=cmd_saliency)

    p = sub.add_parser("ensemble", help="TTA + WBF over one or more checkpoints")
    common(p)
    p.add_argument("--checkpoints", required=True,
                   help="comma-separated checkpoint paths")
    p.add_argument("--tta", default="full", choices=["identity", "full"])
    p.set_defaults(fn=cmd_ensemble)

    p = sub.add_parser("ablate", help="fusion / decoder / TFA comparisons")
    common(p)
    p.add_argument("--axis", required=True, choices=sorted(ABLATE_AXES))
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
