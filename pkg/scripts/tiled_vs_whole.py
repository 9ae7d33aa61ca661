"""Compare tiled inference with a single whole-image patch on a 1280x1280 scene."""

import argparse
import dataclasses

from patchmatte import experiments as ex
from patchmatte.data import synth_scene
from patchmatte.network import load_checkpoint
from patchmatte.pipeline import InferenceConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("checkpoint")
    p.add_argument("--side", type=int, default=1280)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--patch-size", type=int, default=320)
    p.add_argument("--margin", type=int, default=80)
    args = p.parse_args()

    scenes = dataclasses.replace(ex.ABLATION_SCENES, canvas_side=args.side,
                                 window_side=ex.ABLATION_SCENES.window_side * args.side // ex.ABLATION_SCENES.canvas_side)
    sample = synth_scene(args.seed, config=scenes)
    model = load_checkpoint(args.checkpoint)
    res = ex.whole_vs_tiled(sample, model, InferenceConfig(patch_side=args.patch_size, margin=args.margin))
    print(f"tiled SAD vs ground truth  {res.tiled_sad:.4f}")
    print(f"whole SAD vs ground truth  {res.whole_sad:.4f}")
    print(f"SAD(tiled, whole)          {res.difference_sad:.4f} ({100 * res.ratio:.2f}% of tiled)")
    print(f"{res.seconds:.1f}s")


if __name__ == "__main__":
    main()
