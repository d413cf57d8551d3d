"""Command-line pipeline: data generation, training, sampling, evaluation.

Exit codes: 0 on success, 1 on any named failure (single-line diagnostic
on stderr), 2 on malformed arguments. SHAPEDIFF_THREADS caps the BLAS
thread pools (default 1, for reproducible single-core runs); it must take
effect before numpy loads, so the heavy imports happen inside main().

Every artifact directory receives a manifest.json recording the command,
config snapshot, seeds, paths, tool version, and wall-clock time.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

_THREAD_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
               "VECLIB_MAXIMUM_THREADS", "NUMEXPR_NUM_THREADS")


class CliError(Exception):
    """Failure with a distinct kind used as the diagnostic prefix."""

    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    seeds: dict
    inputs: dict
    outputs: dict
    version: str
    wall_clock_s: float = 0.0

    def write(self, out_dir: Path) -> None:
        blob = json.dumps(asdict(self), sort_keys=True, indent=2)
        (out_dir / "manifest.json").write_text(blob + "\n")


def _version() -> str:
    import shapediff
    return shapediff.__version__


def _claim_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not force:
        raise CliError("output exists", f"{out} (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _claim_file(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not force:
        raise CliError("output exists", f"{out} (use --force to overwrite)")
    out.parent.mkdir(parents=True, exist_ok=True)
    return out


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError("missing file", f"{what}: {p}")
    return p


def _load_items(path: str):
    from shapediff.shapegen import read_dataset
    p = _need_file(path, "dataset")
    if p.is_dir():
        p = _need_file(str(p / "dataset.bin"), "dataset")
    return read_dataset(p)


def _train_config(path: str | None, **overrides):
    from shapediff.train import TrainConfig, parse_config_text
    if path is None:
        cfg = TrainConfig()
    else:
        try:
            cfg = parse_config_text(_need_file(path, "config").read_text())
        except ValueError as e:
            raise CliError("config parse", str(e)) from None
    try:
        return replace(cfg, **overrides) if overrides else cfg
    except ValueError as e:
        raise CliError("task/variant mismatch", str(e)) from None


# ---------------------------------------------------------------------------
# guidance loading and mesh export
# ---------------------------------------------------------------------------

def _spec_from_json(path: Path):
    from shapediff.shapegen import (COLOR_NAMES, COLOR_RGB, SCHEMAS, ShapeSpec,
                                    build_parts)
    try:
        d = json.loads(path.read_text())
        category = d["category"]
        schema = SCHEMAS[category]
        levels = {a.name: int(d.get("levels", {}).get(a.name, 0)) for a in schema}
        values = {}
        for a in schema:
            if a.name == "color":
                values[a.name] = COLOR_RGB[COLOR_NAMES[levels[a.name]]]
            else:
                values[a.name] = float(a.nominals[levels[a.name]])
    except (KeyError, ValueError, IndexError, json.JSONDecodeError) as e:
        raise CliError("invalid input", f"guidance file {path}: {e}") from None
    return ShapeSpec(category, build_parts(category, levels), levels, values, 0)


def _resolve_guidance(arg: str):
    """Accept a spec JSON file or '<dataset>:<index>'. Returns (spec, prompt)
    where prompt is the item's natural text when one exists."""
    from shapediff.shapegen import render_text
    if Path(arg).exists():
        spec = _spec_from_json(Path(arg))
        return spec, render_text(spec)
    if ":" in arg:
        base, _, idx_s = arg.rpartition(":")
        try:
            idx = int(idx_s)
        except ValueError:
            raise CliError("invalid input",
                           f"guidance {arg!r} is neither a file nor dataset:index") from None
        items = _load_items(base)
        if not 0 <= idx < len(items):
            raise CliError("invalid input",
                           f"guidance index {idx} out of range (dataset has {len(items)} items)")
        it = items[idx]
        if it.kind == "edit_pair":
            return it.pair.distractor, it.pair.prompt
        return it.spec, render_text(it.spec)
    raise CliError("missing file", f"guidance: {arg}")


def _point_colors(grid, points):
    import numpy as np
    res = grid.data.shape[0]
    ijk = np.clip((np.asarray(points) * res).astype(int), 0, res - 1)
    return np.clip(grid.data[ijk[:, 0], ijk[:, 1], ijk[:, 2], 1:4], 0.0, 1.0)


def _write_ply(path: Path, points, colors) -> None:
    import numpy as np
    rgb = (np.asarray(colors) * 255).round().astype(int)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z",
             "property uchar red", "property uchar green", "property uchar blue",
             "end_header"]
    for p, c in zip(points, rgb):
        lines.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}")
    path.write_text("\n".join(lines) + "\n")


def _write_obj(path: Path, points, colors) -> None:
    lines = ["# point set export"]
    for p, c in zip(points, colors):
        lines.append(f"v {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                     f"{c[0]:.4f} {c[1]:.4f} {c[2]:.4f}")
    path.write_text("\n".join(lines) + "\n")


def _export_grid(grid, path: Path, fmt: str, rng) -> None:
    from shapediff.codec import point_cloud
    pc = point_cloud(grid, rng=rng)
    colors = _point_colors(grid, pc.points)
    (_write_ply if fmt == "ply" else _write_obj)(path, pc.points, colors)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen_data(args) -> int:
    from shapediff.shapegen import gen_dataset, write_dataset
    t0 = time.time()
    test_count = args.test_count
    if test_count is None:
        test_count = max(args.count // 8, 1)
    out = _claim_dir(args.out, args.force)
    items = gen_dataset(args.seed, args.count, test_count, args.task,
                        tuple(args.categories))
    write_dataset(items, out / "dataset.bin")
    RunManifest(
        command=["gen-data"] + args.raw,
        config={"task": args.task, "categories": list(args.categories),
                "count": args.count, "test_count": test_count},
        seeds={"dataset": args.seed},
        inputs={}, outputs={"dataset": str(out / "dataset.bin")},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out)
    print(f"wrote {len(items)} items to {out / 'dataset.bin'}")
    return 0


def _cmd_pretrain(args) -> int:
    from shapediff.train import pretrain_backbone, save_checkpoint, write_log_csv
    t0 = time.time()
    cfg = _train_config(args.config)
    if cfg.task != "pretrain" or cfg.variant != "shap_e_ft":
        raise CliError("task/variant mismatch",
                       f"pretrain requires task=pretrain variant=shap_e_ft, "
                       f"config has {cfg.task}/{cfg.variant}")
    items = _load_items(args.data)
    out = _claim_dir(args.out, args.force)
    ckpt = pretrain_backbone(items, cfg)
    save_checkpoint(ckpt, out / "checkpoint.bin")
    write_log_csv(out / "log.csv", ckpt.losses, cfg.lr)
    RunManifest(
        command=["pretrain"] + args.raw, config=asdict(cfg),
        seeds={"train": cfg.seed}, inputs={"data": args.data},
        outputs={"checkpoint": str(out / "checkpoint.bin"),
                 "log": str(out / "log.csv")},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out)
    print(f"pretrained {cfg.steps} steps, final loss "
          f"{ckpt.losses[-1]:.6g}, saved {out / 'checkpoint.bin'}")
    return 0


def _cmd_finetune(args) -> int:
    from shapediff.train import (finetune, load_checkpoint, save_checkpoint,
                                 write_log_csv)
    t0 = time.time()
    cfg = _train_config(args.config, task=args.task, variant=args.variant)
    pre = load_checkpoint(_need_file(args.pretrained, "pretrained checkpoint"),
                          expect_kind="shap_e_ft")
    items = _load_items(args.data)
    out = _claim_dir(args.out, args.force)
    try:
        ckpt = finetune(pre, items, cfg)
    except ValueError as e:
        raise CliError("task/variant mismatch", str(e)) from None
    save_checkpoint(ckpt, out / "checkpoint.bin")
    write_log_csv(out / "log.csv", ckpt.losses, cfg.lr)
    RunManifest(
        command=["finetune"] + args.raw, config=asdict(cfg),
        seeds={"train": cfg.seed},
        inputs={"data": args.data, "pretrained": args.pretrained},
        outputs={"checkpoint": str(out / "checkpoint.bin"),
                 "log": str(out / "log.csv")},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out)
    print(f"finetuned {cfg.variant} for {cfg.steps} steps, final loss "
          f"{ckpt.losses[-1]:.6g}, saved {out / 'checkpoint.bin'}")
    return 0


def _cmd_sample(args) -> int:
    import numpy as np
    from shapediff.codec import decode, encode, voxelize
    from shapediff.diffusion import sample, sdedit_sample
    from shapediff.numcore import Rng
    from shapediff.shapegen import abstract_shape, strip_style
    from shapediff.train import load_checkpoint
    t0 = time.time()
    ckpt = load_checkpoint(_need_file(args.checkpoint, "checkpoint"))
    model, sched, codec = ckpt.build_model(), ckpt.schedule(), ckpt.codec()
    conditional = ckpt.kind != "shap_e_ft"

    spec, item_prompt, z_c, guidance_grid = None, None, None, None
    if args.guidance is not None:
        spec, item_prompt = _resolve_guidance(args.guidance)
        if args.transform == "abstract":
            spec = abstract_shape(spec)
        elif args.transform == "strip":
            spec = strip_style(spec)
        guidance_grid = voxelize(spec, codec.resolution)
        z_c = encode(guidance_grid, codec)[None].astype(np.float32)
    elif conditional or args.sdedit_strength is not None:
        raise CliError("task/variant mismatch",
                       f"{ckpt.kind} sampling needs --guidance")
    prompt = args.prompt if args.prompt is not None else (item_prompt or "")

    rng = Rng(args.seed)
    try:
        if args.sdedit_strength is not None:
            toks = sdedit_sample(model, sched, z_c, [prompt], [rng.child(0)],
                                 strength=args.sdedit_strength,
                                 n_steps=args.steps, cfg_scale=args.cfg,
                                 c_clip=ckpt.c_clip)
        else:
            toks = sample(model, sched, [prompt], z_c if conditional else None,
                          [rng.child(0)], n_steps=args.steps,
                          cfg_scale=args.cfg, c_clip=ckpt.c_clip)
    except ValueError as e:
        raise CliError("sampling", str(e)) from None
    grid = decode(toks[0], codec)

    out = _claim_dir(args.out, args.force)
    _export_grid(grid, out / f"output.{args.export}", args.export, rng.child(1))
    if guidance_grid is not None:
        _export_grid(guidance_grid, out / f"guidance.{args.export}",
                     args.export, rng.child(2))
    occupied = int(grid.occupancy.astype(bool).sum())
    RunManifest(
        command=["sample"] + args.raw,
        config={"steps": args.steps, "cfg": args.cfg, "prompt": prompt,
                "transform": args.transform,
                "sdedit_strength": args.sdedit_strength,
                "export": args.export, "variant": ckpt.kind},
        seeds={"sample": args.seed},
        inputs={"checkpoint": args.checkpoint, "guidance": args.guidance},
        outputs={"output": str(out / f"output.{args.export}")},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out)
    print(f"sampled {ckpt.kind} ({occupied} occupied voxels) into {out}")
    return 0


def _parse_checkpoint_args(pairs):
    from shapediff.evaluation import SUITE_VARIANTS
    out = {}
    for pair in pairs:
        name, sep, path = pair.partition("=")
        if not sep or name not in SUITE_VARIANTS:
            raise CliError("task/variant mismatch",
                           f"--checkpoints wants variant=path with variant in "
                           f"{', '.join(SUITE_VARIANTS)}; got {pair!r}")
        out[name] = _need_file(path, f"checkpoint for {name}")
    return out


def _cmd_eval(args) -> int:
    from shapediff.evaluation import run_suite
    t0 = time.time()
    ckpts = _parse_checkpoint_args(args.checkpoints)
    items = [it for it in _load_items(args.data) if it.split == "test"]
    out_csv = _claim_file(args.out, args.force)
    try:
        report = run_suite(ckpts, items, args.task, seed=args.seed,
                           n_steps=args.steps, cfg_scale=args.cfg)
    except ValueError as e:
        raise CliError("sampling", str(e)) from None
    out_csv.write_text(report.to_csv())
    summary = out_csv.with_name(out_csv.stem + "-summary.txt")
    summary.write_text(report.summary())
    RunManifest(
        command=["eval"] + args.raw,
        config={"task": args.task, "steps": args.steps, "cfg": args.cfg,
                "variants": list(report.variants),
                "skipped": list(report.skipped)},
        seeds={"eval": args.seed},
        inputs={"data": args.data,
                "checkpoints": {k: str(v) for k, v in ckpts.items()}},
        outputs={"report": str(out_csv), "summary": str(summary)},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out_csv.parent)
    print(report.summary(), end="")
    return 0


def _cmd_ablate(args) -> int:
    from shapediff.evaluation import SUITE_VARIANTS, run_suite
    from shapediff.train import (finetune, load_checkpoint, save_checkpoint,
                                 write_log_csv)
    t0 = time.time()
    if args.variants == "all":
        variants = list(SUITE_VARIANTS)
    else:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
        bad = [v for v in variants if v not in SUITE_VARIANTS]
        if bad:
            raise CliError("task/variant mismatch",
                           f"unknown variants: {', '.join(bad)}")
    if "sdedit3d" in variants and "shap_e_ft" not in variants:
        raise CliError("task/variant mismatch",
                       "sdedit3d reuses the shap_e_ft checkpoint; include both")
    pre = load_checkpoint(_need_file(args.pretrained, "pretrained checkpoint"),
                          expect_kind="shap_e_ft")
    all_items = _load_items(args.data)
    items = [it for it in all_items if it.split == "test"]
    out = _claim_dir(args.out, args.force)

    ckpts = {}
    for variant in variants:
        sub = out / variant
        sub.mkdir(exist_ok=True)
        if variant == "sdedit3d":
            note = {"policy": "noise-and-denoise sampling on the shap_e_ft "
                              "checkpoint; no training"}
            (sub / "variant.json").write_text(json.dumps(note, indent=2) + "\n")
            RunManifest(command=["ablate", variant], config=note,
                        seeds={}, inputs={"pretrained": args.pretrained},
                        outputs={}, version=_version()).write(sub)
            continue
        cfg = _train_config(args.config, task=args.task, variant=variant)
        try:
            ckpt = finetune(pre, all_items, cfg)
        except ValueError as e:
            raise CliError("task/variant mismatch", str(e)) from None
        save_checkpoint(ckpt, sub / "checkpoint.bin")
        write_log_csv(sub / "log.csv", ckpt.losses, cfg.lr)
        RunManifest(command=["ablate", variant], config=asdict(cfg),
                    seeds={"train": cfg.seed},
                    inputs={"data": args.data, "pretrained": args.pretrained},
                    outputs={"checkpoint": str(sub / "checkpoint.bin")},
                    version=_version()).write(sub)
        ckpts[variant] = ckpt
        print(f"trained {variant}: final loss {ckpt.losses[-1]:.6g}")
    if "sdedit3d" in variants:
        ckpts["sdedit3d"] = ckpts["shap_e_ft"]

    try:
        report = run_suite(ckpts, items, args.task, seed=args.eval_seed,
                           n_steps=args.steps, cfg_scale=args.cfg)
    except ValueError as e:
        raise CliError("sampling", str(e)) from None
    (out / "report.csv").write_text(report.to_csv())
    (out / "summary.txt").write_text(report.summary())
    RunManifest(
        command=["ablate"] + args.raw,
        config={"task": args.task, "variants": variants, "steps": args.steps,
                "cfg": args.cfg},
        seeds={"eval": args.eval_seed},
        inputs={"data": args.data, "pretrained": args.pretrained},
        outputs={"report": str(out / "report.csv")},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out)
    print(report.summary(), end="")
    return 0


# deterministic hand-rolled bar charts; no plotting dependency
_SVG_W, _SVG_H, _SVG_ML, _SVG_MB, _SVG_MT = 640, 360, 60, 70, 30


def _bar_svg(title: str, pairs: list[tuple[str, float]]) -> str:
    top = max((abs(v) for _, v in pairs), default=1.0) or 1.0
    plot_w, plot_h = _SVG_W - _SVG_ML - 20, _SVG_H - _SVG_MT - _SVG_MB
    n = len(pairs)
    step = plot_w / max(n, 1)
    bw = step * 0.7
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SVG_W}" '
             f'height="{_SVG_H}" font-family="monospace" font-size="12">',
             f'<rect width="{_SVG_W}" height="{_SVG_H}" fill="white"/>',
             f'<text x="{_SVG_ML}" y="18" font-size="14">{title}</text>',
             f'<line x1="{_SVG_ML}" y1="{_SVG_MT + plot_h}" '
             f'x2="{_SVG_ML + plot_w}" y2="{_SVG_MT + plot_h}" stroke="black"/>',
             f'<line x1="{_SVG_ML}" y1="{_SVG_MT}" x2="{_SVG_ML}" '
             f'y2="{_SVG_MT + plot_h}" stroke="black"/>',
             f'<text x="{_SVG_ML - 8}" y="{_SVG_MT + 4}" text-anchor="end">'
             f'{top:.3g}</text>',
             f'<text x="{_SVG_ML - 8}" y="{_SVG_MT + plot_h + 4}" '
             f'text-anchor="end">0</text>']
    for i, (name, value) in enumerate(pairs):
        h = plot_h * abs(value) / top
        x = _SVG_ML + i * step + (step - bw) / 2
        y = _SVG_MT + plot_h - h
        parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bw:.1f}" '
                     f'height="{h:.1f}" fill="#4878a8"/>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{y - 4:.1f}" '
                     f'text-anchor="middle">{value:.4g}</text>')
        parts.append(f'<text x="{x + bw / 2:.1f}" y="{_SVG_MT + plot_h + 14:.1f}" '
                     f'text-anchor="middle" '
                     f'transform="rotate(35 {x + bw / 2:.1f} '
                     f'{_SVG_MT + plot_h + 14:.1f})">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _read_mean_rows(path: Path) -> list[dict]:
    import csv as _csv
    with open(path, newline="") as fh:
        rows = [r for r in _csv.DictReader(fh) if r.get("item") == "mean"]
    if not rows:
        raise CliError("report", f"{path} has no per-variant mean rows")
    return rows


def _cmd_report(args) -> int:
    t0 = time.time()
    rows = _read_mean_rows(_need_file(args.inp, "report csv"))
    out = _claim_dir(args.out, args.force)
    charts = []
    for metric, label in (("gd", "mean geometric distance (lower is better)"),
                          ("sim", "mean prompt association"),
                          ("fpd", "feature-distribution distance")):
        pairs = [(r["variant"], float(r[metric])) for r in rows if r.get(metric)]
        if not pairs:
            continue
        (out / f"{metric}.svg").write_text(_bar_svg(label, pairs))
        charts.append(f"{metric}.svg")
    lines = ["variant  " + "  ".join(("gd", "sim", "lab", "cd", "fpd"))]
    for r in rows:
        cells = [r[m] if r.get(m) else "-" for m in ("gd", "sim", "lab", "cd", "fpd")]
        lines.append(f"{r['variant']}  " + "  ".join(cells))
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    RunManifest(
        command=["report"] + args.raw, config={"charts": charts},
        seeds={}, inputs={"report": args.inp},
        outputs={c: str(out / c) for c in charts},
        version=_version(), wall_clock_s=time.time() - t0,
    ).write(out)
    print(f"wrote {', '.join(charts)} and summary.txt to {out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    from shapediff.shapegen import CATEGORIES
    p = argparse.ArgumentParser(
        prog="shapediff",
        description="shape diffusion pipeline: data, training, sampling, metrics")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a deterministic dataset")
    g.add_argument("--task", required=True,
                   choices=["pretrain", "abstraction", "editing", "stylization"])
    g.add_argument("--categories", nargs="+", choices=list(CATEGORIES),
                   default=list(CATEGORIES))
    g.add_argument("--count", type=int, required=True, help="train item count")
    g.add_argument("--test-count", type=int, default=None,
                   help="held-out item count (default count // 8)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("pretrain", help="train the text-only backbone")
    t.add_argument("--data", required=True)
    t.add_argument("--config", default=None, help="key=value training config")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_pretrain)

    f = sub.add_parser("finetune", help="adapt a pretrained backbone to a task")
    f.add_argument("--task", required=True,
                   choices=["abstraction", "editing", "stylization"])
    f.add_argument("--variant", required=True)
    f.add_argument("--pretrained", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--config", default=None)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=_cmd_finetune)

    s = sub.add_parser("sample", help="draw one shape from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--guidance", default=None,
                   help="spec JSON file or DATASET:INDEX")
    s.add_argument("--prompt", default=None)
    s.add_argument("--transform", choices=["none", "abstract", "strip"],
                   default="none", help="apply to the guidance shape")
    s.add_argument("--steps", type=int, default=64)
    s.add_argument("--cfg", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sdedit-strength", type=float, default=None,
                   help="noise-and-denoise from the guidance instead")
    s.add_argument("--export", choices=["ply", "obj"], default="ply")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=_cmd_sample)

    e = sub.add_parser("eval", help="score checkpoints on a held-out split")
    e.add_argument("--checkpoints", nargs="+", required=True,
                   metavar="VARIANT=PATH")
    e.add_argument("--data", required=True)
    e.add_argument("--task", required=True,
                   choices=["abstraction", "editing", "stylization"])
    e.add_argument("--steps", type=int, default=64)
    e.add_argument("--cfg", type=float, default=1.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="report CSV path")
    e.set_defaults(fn=_cmd_eval)

    a = sub.add_parser("ablate", help="train and score the full variant grid")
    a.add_argument("--pretrained", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--task", default="abstraction",
                   choices=["abstraction", "editing", "stylization"])
    a.add_argument("--variants", default="all",
                   help="'all' or comma-separated variant names")
    a.add_argument("--config", default=None)
    a.add_argument("--steps", type=int, default=64)
    a.add_argument("--cfg", type=float, default=1.0)
    a.add_argument("--eval-seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=_cmd_ablate)

    r = sub.add_parser("report", help="render charts from a report CSV")
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=_cmd_report)

    for sp in (g, t, f, s, e, a, r):
        sp.add_argument("--force", action="store_true",
                        help="overwrite existing outputs")
    return p


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("SHAPEDIFF_THREADS", "1")
    for var in _THREAD_ENV:
        os.environ.setdefault(var, threads)
    argv = list(sys.argv[1:] if argv is None else argv)
    args = _build_parser().parse_args(argv)
    args.raw = argv[1:]
    from shapediff.shapegen import DatasetError
    from shapediff.train import CheckpointError
    try:
        return args.fn(args)
    except CliError as e:
        print(f"error: {e.kind}: {e}", file=sys.stderr)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
    except DatasetError as e:
        print(f"error: dataset: {e}", file=sys.stderr)
    except CheckpointError as e:
        print(f"error: checkpoint: {e}", file=sys.stderr)
    except ValueError as e:
        print(f"error: invalid input: {e}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
