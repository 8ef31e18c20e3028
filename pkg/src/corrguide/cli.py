"""``corrguide gen|run|ablate|gradcheck`` command-line entry point.

Exit codes: 0 success, 1 I/O failure, 2 usage or parse error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import corr, evaluation, guide
from .domain import GuidanceConfig, MatchingMap
from .synthdata import GenerationError, SceneParams, embed_stitched, generate_scene, load_scene, random_params, save_scene
from .toydiff import Mode, NumericError, ToyDenoiser, build_schedule, denoiser_forward, run_inpaint, write_trace

log = logging.getLogger("corrguide")

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3

CONFIG_VERSION = 1
GEN_DEFAULT_COUNT = 500
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def load_config(path: str | None) -> tuple[GuidanceConfig, SceneParams]:
    """Read a versioned JSON config; every key is optional, so ``{}`` is valid.

    Top-level keys are GuidanceConfig fields, plus ``version`` and an optional
    ``scene`` object of SceneParams fields.
    """
    if path is None:
        return GuidanceConfig(), SceneParams()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise UsageError(f"config not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError("config must be a JSON object")
    data = dict(data)
    version = data.pop("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise UsageError(f"unsupported config version {version}")
    scene = data.pop("scene", {})
    known = {f.name for f in fields(GuidanceConfig)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    try:
        return GuidanceConfig(**data), SceneParams.from_dict(scene)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _scene_name(seed: int) -> str:
    return f"scene_{seed:06d}.crfs"


def cmd_gen(args) -> int:
    _, base = load_config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    failed = 0
    for seed in range(args.seed, args.seed + args.count):
        try:
            scene = generate_scene(seed, random_params(seed, base))
            path, sidecar = save_scene(scene, out / _scene_name(seed))
        except (OSError, GenerationError) as exc:
            print(f"error: seed {seed}: {exc}", file=sys.stderr)
            failed += 1
            continue
        print(f"{path}\t{sidecar}")
    return EXIT_IO if failed else EXIT_OK


def cmd_run(args) -> int:
    cfg, _ = load_config(args.config)
    try:
        scene = load_scene(args.scene)
    except FileNotFoundError as exc:
        raise UsageError(f"scene not found: {args.scene}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        result = run_inpaint(scene, cfg, args.mode, keep_attention=not args.no_attention)
    except NumericError as exc:
        print(f"numeric error at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    if args.out:
        write_trace(args.out, result.traces, include_attention=not args.no_attention)
    metrics = evaluation.scene_metrics(result.restored, scene)
    correct, total = evaluation.count_correct(result.field, scene)
    print(f"mode={args.mode} psnr={metrics['psnr_mask']:.4f} ssim={metrics['ssim']:.4f} correct={correct}/{total}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg, _ = load_config(args.config)
    try:
        modes = [Mode(m.strip()) for m in args.modes.split(",")] if args.modes else list(evaluation.DEFAULT_MODES)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    seeds = list(range(args.seed, args.seed + args.count))
    report = evaluation.ablation_suite(seeds, cfg, modes, jobs=args.jobs)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        evaluation.emit_report(report, out / "report.json", "json")
        evaluation.emit_report(report, out / "report.csv", "csv")
        for row in report["rows"]:
            with open(out / f"curve_{row['mode']}.csv", "w") as fh:
                fh.write("step,correct\n")
                for k, v in enumerate(row["correct_curve"]):
                    fh.write(f"{k},{json.dumps(v)}\n")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for row in report["rows"]:
        print(
            f"{row['mode']:<18} psnr={row['psnr_mask']} ssim={row['ssim']} "
            f"correct={row['final_correct']} failed={row['n_failed']}"
        )
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg, base = load_config(args.config)
    scene = generate_scene(args.seed, random_params(args.seed, base))
    z = embed_stitched(scene)
    model = ToyDenoiser(z.d, build_schedule(cfg.steps_total))
    t = max(1, cfg.steps_total // 2)
    try:
        out = denoiser_forward(model, z, t)
        field = corr.refine(
            corr.estimate(MatchingMap(scene.shape, out.tar2ref.scores)), cfg.outlier_threshold, cfg.win_s
        )
        mask = guide.build_attention_mask(field, cfg, scene.shape)
        err, _, _ = guide.finite_difference_check(model, z, t, field, mask, corrupt=args.corrupt)
    except (guide.GradientError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ok = err < GRADCHECK_TOL
    print(f"max relative error {err:.3e} ({'pass' if ok else 'fail'})")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corrguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic scene pairs")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--count", type=int, default=GEN_DEFAULT_COUNT)
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("run", help="inpaint one scene and write its trace")
    p.add_argument("scene")
    p.add_argument("--config")
    p.add_argument("--mode", default=Mode.FULL.value, choices=[m.value for m in Mode])
    p.add_argument("--out", help="trace path (JSON lines)")
    p.add_argument("--no-attention", action="store_true", help="omit attention maps from the trace")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the ablation suite")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--config")
    p.add_argument("--modes", help="comma-separated subset of modes")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the latent gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--corrupt", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("CORRGUIDE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
