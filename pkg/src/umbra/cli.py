"""Command-line entry point: ``umbra {gen-data,render,reconstruct,eval,gradcheck}``.

Exit codes: 0 success, 1 IO or usage error, 2 scene generation exhausted,
3 optimisation or verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .dataio import (
    COMPOSITE_CATEGORY,
    DatasetConfig,
    dumps_json,
    generate_dataset,
    load_dataset,
    read_scene,
    read_shadow,
    write_losses_csv,
    write_obj,
    write_pgm,
    write_results_csv,
    write_shadow,
)
from .errors import DegenerateScene, EmptyLevelSet, EmptyTrainingSet, ParseError, SchemaVersionMismatch, UmbraError
from .evaluation import IOU_SAMPLES, best_iou, nearest_neighbor_baseline, random_baseline, volumetric_iou
from .generator import CATEGORIES
from .gradcheck import STAGES, TOLERANCE, run_gradcheck
from .occfield import Mesh, extract_mesh
from .optimizer import OptimizerConfig, reconstruct
from .shadow import DEFAULT_TAU, render_segmentation, render_shadow

EXIT_OK, EXIT_IO, EXIT_DEGENERATE, EXIT_FAILED = 0, 1, 2, 3
SEED_ENV = "UMBRA_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage errors map to exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _add_globals(p: argparse.ArgumentParser, top: bool) -> None:
    # subcommands accept the global flags too; SUPPRESS keeps them from
    # overwriting values given before the subcommand
    default = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=default(None), help=f"RNG seed (fallback: ${SEED_ENV}, then 0)")
    p.add_argument("--threads", type=_positive_int, default=default(1), help="worker pool size")
    p.add_argument("--verbose", action="store_true", default=default(False), help="echo resolved config as JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="umbra", description="Shape reconstruction from a single shadow by latent search.")
    _add_globals(parser, True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    _add_globals(g, False)
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=_positive_int, required=True)
    g.add_argument("--category", default="blob", choices=sorted(CATEGORIES) + [COMPOSITE_CATEGORY])

    r = sub.add_parser("render", help="render a scene's shadow from its latent or stored shape")
    _add_globals(r, False)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True, help="output PGM; a .valid.pgm companion is written next to it")
    r.add_argument("--mode", choices=("hard", "smooth"), default="hard")
    r.add_argument("--tau", type=float, default=DEFAULT_TAU)
    r.add_argument("--segmentation", help="optional PGM path for the camera-view object mask")

    c = sub.add_parser("reconstruct", help="latent search on one observed shadow")
    _add_globals(c, False)
    c.add_argument("--shadow", required=True)
    c.add_argument("--scene", required=True)
    c.add_argument("--unknown-light", action="store_true")
    c.add_argument("--unknown-pose", action="store_true")
    c.add_argument("--restarts", type=_positive_int, default=8)
    c.add_argument("--steps", type=_positive_int, default=300)
    c.add_argument("--lr", type=float, default=None, help="default 1.0, or 0.01 with an --unknown flag")
    c.add_argument("--tau", type=float, default=DEFAULT_TAU)
    c.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a method over a dataset's test split")
    _add_globals(e, False)
    e.add_argument("--dataset", required=True)
    e.add_argument("--method", choices=("latent", "nn", "random"), required=True)
    e.add_argument("--restarts", type=_positive_int, default=8)
    e.add_argument("--steps", type=_positive_int, default=300)
    e.add_argument("--lr", type=float, default=None)
    e.add_argument("--unknown-light", action="store_true")
    e.add_argument("--unknown-pose", action="store_true")
    e.add_argument("--iou-samples", type=int, default=IOU_SAMPLES)
    e.add_argument("--out", required=True)

    k = sub.add_parser("gradcheck", help="finite-difference check of every gradient stage")
    _add_globals(k, False)
    k.add_argument("--cases", type=int, default=3)
    k.add_argument("--category", default="mixed", choices=sorted(CATEGORIES))
    return parser


def resolve_seed(seed: int | None) -> int:
    if seed is None:
        env = os.environ.get(SEED_ENV, "")
        try:
            seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    if seed < 0:
        raise UsageError(f"seed must be non-negative, got {seed}")
    return seed


def _emit(obj) -> None:
    sys.stdout.write(dumps_json(obj))


def _config_echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


# --------------------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    manifest = generate_dataset(args.out, args.n, args.category, args.seed, DatasetConfig(), args.threads)
    print(f"wrote {manifest['n']} scenes to {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    desc = read_scene(args.scene, check_files=False)
    shape = desc.truth_shape()
    if shape is None:
        raise UsageError(f"{args.scene}: scene has neither a latent nor a shape to render")
    scene = desc.to_scene()
    img = render_shadow(scene, shape, args.mode, args.tau)
    write_shadow(args.out, img)
    if args.segmentation:
        write_pgm(args.segmentation, render_segmentation(scene, shape))
    return EXIT_OK


def _mesh_or_empty(shape) -> Mesh:
    try:
        return extract_mesh(shape)
    except EmptyLevelSet:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def _optimizer_config(args, seed: int) -> OptimizerConfig:
    return OptimizerConfig(steps=args.steps, lr=args.lr, restarts=args.restarts, unknown_light=args.unknown_light,
                           unknown_pose=args.unknown_pose, seed=seed, threads=args.threads,
                           tau=getattr(args, "tau", DEFAULT_TAU))


def cmd_reconstruct(args) -> int:
    desc = read_scene(args.scene, check_files=False)
    observed = read_shadow(args.shadow)
    scene = desc.to_scene()
    if observed.values.shape != scene.shape_hw:
        raise UsageError(f"{args.shadow}: size {observed.values.shape} does not match the scene camera")
    gen = desc.generator_spec()
    config = _optimizer_config(args, args.seed)
    try:
        result = reconstruct(observed, scene, gen, config)
    except UmbraError as exc:
        print(f"reconstruction failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    best = result.best
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {
        "best_restart": best.index,
        "final_loss": best.final_loss,
        "lr": config.step_size,
        "latent": best.z.tolist(),
        "light": np.asarray(best.light).tolist(),
        "pose": {"translation": best.pose.translation.tolist(), "quaternion": best.pose.quaternion.tolist()},
        "restarts": [{"index": r.index, "final_loss": None if r.failed else r.final_loss, "failed": r.failed,
                      "message": r.message} for r in result.by_index()],
    }
    truth = desc.truth_shape()
    if truth is not None:
        summary["iou_to_truth"] = volumetric_iou(best.shape.canonical(), truth).value
    (out / "result.json").write_text(dumps_json(summary))
    write_losses_csv(out / "losses.csv", {r.index: r.losses for r in result.by_index()})
    write_obj(out / "best.obj", _mesh_or_empty(best.shape.canonical()))
    best_scene = scene.with_light(type(scene.light)(best.light)).with_pose(best.pose)
    write_pgm(out / "best_shadow.pgm", render_shadow(best_scene, best.shape.canonical(), "hard").values)
    print(f"best restart {best.index} loss {best.final_loss:.6f}")
    return EXIT_OK


def _train_shapes(dataset) -> list:
    train = [(s.index, s.truth) for s in load_dataset(dataset, "train")]
    train = [(i, t) for i, t in train if t is not None]
    if not train:
        raise EmptyTrainingSet(f"{dataset}: no training scenes with a ground-truth shape")
    return train


def evaluate_scene(item, method: str, args, seed: int, train) -> float:
    """Best-of-N IoU of one test scene under ``method``.

    Every method gets ``--restarts`` attempts and is scored by its highest
    IoU: latent restarts, independent random draws, or the (deterministic)
    nearest neighbour.
    """
    truth = item.truth
    scene = item.scene
    if method == "latent":
        # scenes run in parallel, restarts within a scene serially
        config = replace(_optimizer_config(args, seed * 1_000_003 + item.index), threads=1)
        try:
            result = reconstruct(item.shadow, scene, item.descriptor.generator_spec(), config)
        except UmbraError:
            return 0.0
        candidates = [r.shape.canonical() for r in result.completed]
    elif method == "nn":
        # training shapes rendered under this scene's camera, light and pose
        rendered = [(render_shadow(scene, t, "hard").binarized(), t) for _, t in train]
        candidates = [nearest_neighbor_baseline(item.shadow, rendered)]
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(item.index,)))
        candidates = [random_baseline([t for _, t in train], rng) for _ in range(args.restarts)]
    return best_iou(candidates, truth, args.iou_samples)


def cmd_eval(args) -> int:
    if not Path(args.dataset, "manifest.json").exists():
        raise FileNotFoundError(f"{args.dataset}: no manifest.json")
    test = [s for s in load_dataset(args.dataset, "test") if s.truth is not None]
    if not test:
        raise EmptyTrainingSet(f"{args.dataset}: empty test split")
    train = [] if args.method == "latent" else _train_shapes(args.dataset)

    def work(item):
        return evaluate_scene(item, args.method, args, args.seed, train)

    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            ious = list(pool.map(work, test))
    else:
        ious = [work(s) for s in test]
    rows = [{"method": args.method, "category": s.descriptor.category, "scene": s.index, "iou": v}
            for s, v in zip(test, ious)]
    write_results_csv(args.out, rows)
    for cat in sorted({r["category"] for r in rows}):
        vals = [r["iou"] for r in rows if r["category"] == cat]
        print(f"{args.method} {cat} mean_iou {float(np.mean(vals)):.4f} n {len(vals)}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.cases < 1:
        raise UsageError("gradcheck: --cases must be at least 1")
    errors = run_gradcheck(args.cases, args.seed, args.category)
    for stage in STAGES:
        print(f"{stage} max_rel_error {errors[stage]:.3e}")
    return EXIT_OK if all(errors[s] < TOLERANCE for s in STAGES) else EXIT_FAILED


COMMANDS = {
    "gen-data": cmd_gen_data,
    "render": cmd_render,
    "reconstruct": cmd_reconstruct,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if any(a in ("-h", "--help") for a in argv):
        try:
            parser.parse_args(argv)
        except SystemExit as exc:
            return int(exc.code or 0)
    try:
        args = parser.parse_args(argv)
        args.seed = resolve_seed(args.seed)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_IO
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.verbose:
        _emit(_config_echo(args))
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_IO
    except DegenerateScene as exc:
        print(f"scene generation failed: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (OSError, ParseError, SchemaVersionMismatch, EmptyTrainingSet, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
