"""Write a directory of synthetic scenes usable by `patchmatte train/eval --data`."""

import argparse

from patchmatte.data import SceneConfig, save_dataset, synth_scene
from patchmatte.experiments import ABLATION_SCENES


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--side", type=int, default=None, help="canvas side (default from the preset)")
    p.add_argument("--preset", choices=["default", "ablation"], default="default")
    args = p.parse_args()

    scenes = ABLATION_SCENES if args.preset == "ablation" else SceneConfig()
    samples = [synth_scene(args.first_seed + i, args.side, scenes) for i in range(args.count)]
    save_dataset(args.out, samples)
    print(f"wrote {len(samples)} scenes to {args.out}")


if __name__ == "__main__":
    main()
