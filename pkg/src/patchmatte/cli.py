"""Command line entry point: matte, train, eval, viz-attn.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines using the
long flag names (``patch-size=320``); flags given on the command line win.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, network, pipeline
from .trimap import REGION_NAMES

log = logging.getLogger("patchmatte")

DEFAULTS = {
    "patch-size": 320,
    "margin": 80,
    "k": 3,
    "pool": 30,
    "mem-budget": 512 * pipeline.MiB,
    "seed": 0,
    "out-depth": 8,
    "steps": 200,
    "batch": 8,
    "lr": 5e-4,
    "train-patch": 64,
    "mode": "tgnl",
    "synthetic-side": 256,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict[str, str]:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("_", "-")] = value
    return values


def _resolve(args, name: str, cast):
    flag = getattr(args, name.replace("-", "_"), None)
    if flag is not None:
        return cast(flag)
    if name in args.config_values:
        return cast(args.config_values[name])
    return cast(DEFAULTS[name])


def _inference_config(args) -> pipeline.InferenceConfig:
    try:
        return pipeline.InferenceConfig(
            patch_side=_resolve(args, "patch-size", int),
            margin=_resolve(args, "margin", int),
            k=_resolve(args, "k", int),
            pool_limit=_resolve(args, "pool", int),
            memory_budget_bytes=_resolve(args, "mem-budget", int),
            seed=_resolve(args, "seed", int),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _add_inference_flags(p):
    p.add_argument("--patch-size", type=int)
    p.add_argument("--margin", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--mem-budget", type=int)
    p.add_argument("--seed", type=int)


def cmd_matte(args) -> None:
    cfg = _inference_config(args)
    depth = _resolve(args, "out-depth", int)
    if depth not in (8, 16):
        raise UsageError("--out-depth must be 8 or 16")
    image = data.read_image(args.image)
    trimap = data.read_trimap(args.trimap)
    model = network.load_checkpoint(args.checkpoint)
    alpha = pipeline.matte_image(image, trimap, model, cfg)
    data.write_alpha(args.out, alpha, depth=depth)


def cmd_train(args) -> None:
    seed = _resolve(args, "seed", int)
    if args.data:
        dataset = data.load_dataset(args.data)
    else:
        side = _resolve(args, "synthetic-side", int)
        dataset = [data.synth_scene(seed * 100003 + i, side) for i in range(args.synthetic)]
    mode = _resolve(args, "mode", str)
    if mode not in ("tgnl", "none"):
        raise UsageError("--mode must be tgnl or none")
    tp = _resolve(args, "train-patch", int)
    cfg = pipeline.TrainConfig(
        steps=_resolve(args, "steps", int),
        batch=_resolve(args, "batch", int),
        lr=_resolve(args, "lr", float),
        seed=seed,
        k=_resolve(args, "k", int),
        patch_side=tp,
        scales=(tp, tp * 3 // 2, tp * 2),
    )
    model = network.build_model(network.NetConfig(context_mode=mode), seed=seed)

    def progress(step, loss):
        if step % 50 == 0:
            log.info("step %d loss %.5f", step, loss.l_overall)

    result = pipeline.train(dataset, model, cfg, progress=progress)
    network.save_checkpoint(result.model, args.out)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".loss.csv")
    log_path.write_text(result.loss_log())


def cmd_eval(args) -> None:
    cfg = _inference_config(args)
    dataset = data.load_dataset(args.data)
    model = network.load_checkpoint(args.checkpoint)
    reports = pipeline.evaluate(dataset, model, cfg)
    Path(args.report).write_text(pipeline.reports_csv(reports))
    print(pipeline.format_summary(reports))


def _parse_pixel(text: str) -> tuple[int, int]:
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--pixel expects r,c, got {text!r}") from exc
    return r, c


def cmd_viz(args) -> None:
    cfg = _inference_config(args)
    pixel = _parse_pixel(args.pixel)
    image = data.read_image(args.image)
    trimap = data.read_trimap(args.trimap)
    model = network.load_checkpoint(args.checkpoint)
    viz = pipeline.visualize_attention(image, trimap, model, args.patch, pixel, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data.write_image(out / "query.png", viz.query_patch)
    names = {v: k for k, v in REGION_NAMES.items()}
    lines = ["context,patch_index,origin_row,origin_col,side"]
    for i, (j, spec) in enumerate(zip(viz.context_indices, viz.context_specs)):
        lines.append(f"{i},{j},{spec.origin_row},{spec.origin_col},{spec.side}")
        for region, heat in viz.heatmaps[i].items():
            data.write_alpha(out / f"context{i}_{names[region]}.png", heat)
    (out / "contexts.csv").write_text("\n".join(lines) + "\n")
    data.write_image(out / "overview.png", _overview(image, viz))


def _overview(image, viz) -> np.ndarray:
    """Whole image with the query box in green and context boxes in red."""
    out = image.astype(np.float32).copy()
    h, w = out.shape[:2]

    def box(spec, color):
        r0, c0 = max(spec.origin_row, 0), max(spec.origin_col, 0)
        r1, c1 = min(spec.origin_row + spec.side, h) - 1, min(spec.origin_col + spec.side, w) - 1
        out[r0:r1 + 1, [c0, c1]] = color
        out[[r0, r1], c0:c1 + 1] = color

    for spec in viz.context_specs:
        box(spec, (1.0, 0.0, 0.0))
    box(viz.query_spec, (0.0, 1.0, 0.0))
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="patchmatte", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("matte", help="matte one image with tiled inference")
    p.add_argument("--image", required=True)
    p.add_argument("--trimap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", required=True)
    _add_inference_flags(p)
    p.add_argument("--out-depth", type=int)
    p.add_argument("--config")
    p.set_defaults(func=cmd_matte)

    p = sub.add_parser("train", help="train a model")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--synthetic", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--train-patch", type=int)
    p.add_argument("--synthetic-side", type=int)
    p.add_argument("--mode", choices=("tgnl", "none"))
    p.add_argument("--log")
    p.add_argument("--config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--report", required=True)
    _add_inference_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-attn", help="dump attention heatmaps for one query pixel")
    p.add_argument("--image", required=True)
    p.add_argument("--trimap", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patch", type=int, required=True)
    p.add_argument("--pixel", required=True)
    p.add_argument("--out-dir", required=True)
    _add_inference_flags(p)
    p.add_argument("--config")
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.config_values = read_config(args.config) if args.config else {}
        if args.command == "train" and args.synthetic is not None and args.synthetic < 1:
            raise UsageError("--synthetic needs at least one scene")
        args.func(args)
    except UsageError as exc:
        print(f"patchmatte: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"patchmatte: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
