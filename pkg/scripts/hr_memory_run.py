"""Matte a large synthetic scene under a feature-cache budget and report seams."""

import argparse
import dataclasses
import resource

from patchmatte import experiments as ex
from patchmatte.data import synth_scene, write_alpha
from patchmatte.metrics import evaluate_matte
from patchmatte.network import NetConfig, build_model, load_checkpoint
from patchmatte.pipeline import InferenceConfig, MiB


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--checkpoint", default=None, help="untrained toy model when omitted")
    p.add_argument("--side", type=int, default=4096)
    p.add_argument("--seed", type=int, default=2)
    p.add_argument("--patch-size", type=int, default=320)
    p.add_argument("--margin", type=int, default=80)
    p.add_argument("--budget-mib", type=int, default=512)
    p.add_argument("--out", default=None, help="write the alpha matte PNG here")
    args = p.parse_args()

    base = ex.ABLATION_SCENES
    scenes = dataclasses.replace(base, canvas_side=args.side, window_side=base.window_side * args.side // base.canvas_side)
    sample = synth_scene(args.seed, config=scenes)
    model = load_checkpoint(args.checkpoint) if args.checkpoint else build_model(NetConfig())
    cfg = InferenceConfig(patch_side=args.patch_size, margin=args.margin, memory_budget_bytes=args.budget_mib * MiB)
    run = ex.large_run(sample, model, cfg)
    seam, interior, ratio = ex.seam_ratio(run.alpha, sample.trimap, run.plan)
    print(f"{len(run.plan)} patches in {run.seconds:.0f}s")
    print(f"feature cache peak {run.peak_bytes / MiB:.1f} MiB of {args.budget_mib} MiB, {run.evictions} evictions")
    print(f"process peak RSS {resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024:.0f} MiB")
    print(f"seam |d alpha| {seam:.4f}, interior {interior:.4f}, ratio {ratio:.2f}")
    print("metrics", evaluate_matte(run.alpha, sample.alpha, sample.trimap))
    if args.out:
        write_alpha(args.out, run.alpha, depth=16)


if __name__ == "__main__":
    main()
