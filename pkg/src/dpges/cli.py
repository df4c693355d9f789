"""Command-line entry point: train, render, eval, verify, ablate, make-toy.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 verification failure.
Set DPGES_LOG (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import kernels
from .imageio import ImageFormatError, write_image
from .scene import SceneError, SceneFormatError, load_camera, load_dataset, load_scene, save_scene

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 0, 1, 2, 3

ABLATIONS = ("full", "base-SH", "2-layer", "4-layer", "no-trans-grad", "no-Ls", "no-Lscale", "no-Lt")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {p}")
    return p


def _load_scene(path):
    return load_scene(_existing(path, "scene file"))


def _load_views(path):
    views = load_dataset(_existing(path, "image directory"))
    if not views:
        raise DataError(f"no views found in {path}")
    return views


def _threads(n):
    # kernels are single-threaded; cap the BLAS pools numpy may use
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


# --------------------------------------------------------------------------
# subcommands


def cmd_make_toy(args) -> int:
    from .toys import BUNDLED, SHIPPED, make_toy, perturb_scene

    out = Path(args.out)
    if args.recipe:
        with open(_existing(args.recipe, "recipe")) as fh:
            recipes = {Path(args.recipe).stem: json.load(fh)}
    elif args.name == "all":
        recipes = {n: n for n in SHIPPED}
    elif args.name in BUNDLED:
        recipes = {args.name: args.name}
    else:
        raise UsageError(f"unknown toy {args.name!r}; choose from {', '.join(sorted(BUNDLED))} or all")
    for name, r in recipes.items():
        target = out / name if len(recipes) > 1 else out
        scene, views = make_toy(r, target, layers=args.layers, seed=args.seed)
        save_scene(perturb_scene(scene, args.seed or 0), target / "scene_init.dpges")
        print(f"{name}: {scene.num_surfels} surfels, {scene.num_gaussians} Gaussians, "
              f"{len(views)} views -> {target}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .composite import export_image, render

    scene = _load_scene(args.scene)
    cam_path = _existing(args.camera, "camera")
    cams = ([(p.stem, load_camera(p)) for p in sorted(cam_path.glob("*.json"))]
            if cam_path.is_dir() else [(cam_path.stem, load_camera(cam_path))])
    if not cams:
        raise DataError(f"no camera files in {cam_path}")
    out = Path(args.out)
    many = cam_path.is_dir()
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for stem, cam in cams:
        frame = render(scene, cam, args.layers)
        path = out / f"{stem}{args.ext}" if many else out
        img = frame.image if path.suffix == ".pfm" else export_image(frame.image)
        write_image(path, img)
        if args.dump_layers:
            _dump_layers(frame.stack, Path(args.dump_layers) / stem if many else Path(args.dump_layers))
    print(f"rendered {len(cams)} view(s)")
    return EXIT_OK


def _dump_layers(stack, directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    for k in range(stack.layers):
        write_image(directory / f"depth_{k + 1}.pfm", np.where(stack.ids[..., k] >= 0,
                                                              stack.depth[..., k], 0.0))
        write_image(directory / f"alpha_{k + 1}.pfm", stack.alpha[..., k])
        write_image(directory / f"color_{k + 1}.pfm", stack.color[..., k, :])
    for k in range(stack.layers + 1):
        write_image(directory / f"trans_{k}.pfm", stack.trans[..., k])
    write_image(directory / "surfel_color.pfm", stack.surfel_color)
    cull = np.where(np.isfinite(stack.cull_depth), stack.cull_depth, 0.0)
    write_image(directory / "cull_depth.pfm", cull)


def evaluate(scene, views, layers=3, timing=0):
    from .composite import render
    from .metrics import psnr, ssim

    rows = []
    for i, (cam, target) in enumerate(views):
        img = render(scene, cam, layers).image
        row = {"view": i, "psnr": psnr(img, target), "ssim": ssim(img, target)}
        if timing:
            t0 = time.perf_counter()
            for _ in range(timing):
                render(scene, cam, layers)
            dt = (time.perf_counter() - t0) / timing
            row["ms"] = 1000 * dt
            row["fps"] = 1.0 / dt
        rows.append(row)
    return rows


def _mean_row(rows, label="mean"):
    out = {"view": label}
    for k in rows[0]:
        if k != "view":
            vals = [r[k] for r in rows]
            out[k] = float(np.mean(vals))
    return out


def format_table(rows, fmt="markdown"):
    keys = list(rows[0])

    def cell(v):
        return f"{v:.4f}" if isinstance(v, float) else str(v)

    if fmt == "csv":
        return "\n".join([",".join(keys)] + [",".join(cell(r[k]) for k in keys) for r in rows])
    lines = ["| " + " | ".join(keys) + " |", "|" + "---|" * len(keys)]
    lines += ["| " + " | ".join(cell(r[k]) for k in keys) + " |" for r in rows]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    scene = _load_scene(args.scene)
    views = _load_views(args.images)
    timing = 100 if args.timing else 0
    rows = evaluate(scene, views, args.layers, timing)
    table = format_table(rows + [_mean_row(rows)], args.format)
    _emit(table, args.out)
    return EXIT_OK


def _emit(text, out):
    if out:
        Path(out).write_text(text + "\n")
    print(text)


def cmd_train(args) -> int:
    from .trainer import TrainConfig, TrainingError, train

    scene = _load_scene(args.scene)
    views = _load_views(args.images)
    if args.config:
        try:
            config = TrainConfig.load(_existing(args.config, "config"))
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad config {args.config}: {exc}") from exc
    else:
        config = TrainConfig()
    over = {}
    if args.iterations is not None:
        over["iterations"] = args.iterations
    if args.seed is not None:
        over["seed"] = args.seed
    if args.layers is not None:
        over["layers"] = args.layers
    config = replace(config, **over)
    out = Path(args.out)
    work = Path(args.work_dir) if args.work_dir else out.parent / (out.stem + "_train")
    try:
        result = train(scene, views, config, out_dir=work)
    except TrainingError as exc:
        print(f"training aborted: {exc}; diagnostics in {work / 'abort_dump.json'}", file=sys.stderr)
        return EXIT_DATA
    save_scene(result.scene, out)
    print(f"trained {config.iterations} iterations: {result.scene.num_surfels} surfels, "
          f"{result.scene.num_gaussians} Gaussians -> {out} (log: {work / 'train_log.csv'})")
    return EXIT_OK


def ablation_configs(base):
    """The eight fixed ablation variants as (label, config, sh_degree or None)."""
    return [
        ("full", base, None),
        ("base-SH", base, 0),
        ("2-layer", replace(base, layers=2), None),
        ("4-layer", replace(base, layers=4), None),
        ("no-trans-grad", replace(base, trans_grad_off=True), None),
        ("no-Ls", replace(base, no_Ls=True), None),
        ("no-Lscale", replace(base, no_Lscale=True), None),
        ("no-Lt", replace(base, no_Lt=True), None),
    ]


def truncate_sh(scene, degree):
    from . import sh

    out = scene.copy()
    k = sh.num_coeffs(degree)
    out.surfel_sh = out.surfel_sh[:, :k].copy()
    out.gauss_sh = out.gauss_sh[:, :k].copy()
    out.sh_degree = degree
    return out


def run_ablation(scene, views, base, timing=10):
    from .composite import render
    from .metrics import psnr, ssim
    from .trainer import train

    rows = []
    for label, cfg, deg in ablation_configs(base):
        init = truncate_sh(scene, deg) if deg is not None else scene
        t0 = time.perf_counter()
        res = train(init, views, cfg)
        train_s = time.perf_counter() - t0
        ps, ss = [], []
        for cam, target in views:
            img = render(res.scene, cam, cfg.layers).image
            ps.append(psnr(img, target))
            ss.append(ssim(img, target))
        cam = views[0][0]
        t0 = time.perf_counter()
        for _ in range(timing):
            render(res.scene, cam, cfg.layers)
        ms = 1000 * (time.perf_counter() - t0) / max(timing, 1)
        rows.append({"variant": label, "ssim": float(np.mean(ss)), "psnr": float(np.mean(ps)),
                     "train_s": train_s, "render_ms": ms, "fps": 1000.0 / ms if ms > 0 else 0.0})
    return rows


def cmd_ablate(args) -> int:
    from .trainer import TrainConfig

    views = _load_views(args.images)
    scene = _load_scene(args.scene)
    base = TrainConfig.load(_existing(args.config, "config")) if args.config else TrainConfig(
        iterations=args.iterations, densify_every=0, prune_every=0)
    base = replace(base, seed=args.seed or 0,
                   **({"iterations": args.iterations} if args.config and args.iterations else {}))
    rows = run_ablation(scene, views, base)
    _emit(format_table(rows, args.format), args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import SUITES, run_suites

    names = list(SUITES) if args.suite == "all" else [args.suite]
    reports = run_suites(names, seed=args.seed or 0)
    for r in reports:
        print(r)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_VERIFY


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpges", description="Depth-peeled surfels with sort-free Gaussians.")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    p.add_argument("--backend", choices=sorted(kernels.BACKENDS), default=None,
                   help="kernel backend (default: compiled if available)")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", parents=[common], help="optimize a scene against posed images")
    t.add_argument("--scene", required=True, help="initial scene (.dpges)")
    t.add_argument("--images", required=True, help="directory of view_XXX.json + images")
    t.add_argument("--config", help="TrainConfig JSON")
    t.add_argument("--out", required=True, help="output scene path")
    t.add_argument("--iterations", type=int)
    t.add_argument("--layers", type=int, choices=(2, 3, 4))
    t.add_argument("--work-dir", help="checkpoints and log (default: <out>_train/)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", parents=[common], help="render a scene")
    r.add_argument("--scene", required=True)
    r.add_argument("--camera", required=True, help="camera JSON or a directory of them")
    r.add_argument("--out", required=True, help="image path (or directory for many cameras)")
    r.add_argument("--layers", type=int, choices=(2, 3, 4), default=3)
    r.add_argument("--dump-layers", metavar="DIR", help="write per-layer PFM maps here")
    r.add_argument("--ext", default=".ppm", choices=(".ppm", ".pfm"))
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", parents=[common], help="PSNR/SSIM per view, optional timing")
    e.add_argument("--scene", required=True)
    e.add_argument("--images", required=True)
    e.add_argument("--layers", type=int, choices=(2, 3, 4), default=3)
    e.add_argument("--timing", action="store_true", help="wall clock over 100 renders per view")
    e.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", parents=[common], help="run property suites against the oracles")
    v.add_argument("suite", choices=("peel", "order", "grad", "leakage", "all"))
    v.set_defaults(func=cmd_verify)

    a = sub.add_parser("ablate", parents=[common], help="train the eight ablation variants and compare")
    a.add_argument("--scene", required=True, help="initial scene")
    a.add_argument("--images", required=True)
    a.add_argument("--config")
    a.add_argument("--iterations", type=int, default=300)
    a.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    a.add_argument("--out")
    a.set_defaults(func=cmd_ablate)

    m = sub.add_parser("make-toy", parents=[common], help="write a bundled recipe, its scene and rendered views")
    m.add_argument("name", nargs="?", default="all")
    m.add_argument("--recipe", help="custom recipe JSON instead of a bundled name")
    m.add_argument("--out", required=True)
    m.add_argument("--layers", type=int, choices=(2, 3, 4), default=3)
    m.set_defaults(func=cmd_make_toy)
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("DPGES_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "dpges: error: a subcommand is required")
        _threads(args.threads)
        if args.backend:
            kernels.set_backend(args.backend)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SceneError, SceneFormatError, ImageFormatError, FileNotFoundError) as exc:
        print(f"dpges: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
