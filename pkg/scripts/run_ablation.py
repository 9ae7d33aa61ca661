"""Train Model A (no context) and Model C (TGNL) on the ablation scenes and compare SAD."""

import argparse
import dataclasses
from pathlib import Path

from patchmatte import experiments as ex
from patchmatte.metrics import format_table
from patchmatte.network import save_checkpoint
from patchmatte.pipeline import mean_report


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=ex.ABLATION_TRAIN.steps)
    p.add_argument("--train-scenes", type=int, default=512)
    p.add_argument("--test-scenes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=Path, default=None, help="save both checkpoints here")
    args = p.parse_args()

    train_set, test_set = ex.ablation_data(args.train_scenes, args.test_scenes)
    cfg = dataclasses.replace(ex.ABLATION_TRAIN, steps=args.steps, seed=args.seed)

    def progress(step, losses):
        if step % 200 == 0:
            print(f"  step {step}: L_overall {losses.l_overall:.4f}", flush=True)

    arms = {}
    for name, mode in (("Model A", "none"), ("Model C", "tgnl")):
        print(f"training {name} ({mode}) for {args.steps} steps", flush=True)
        arms[name] = ex.run_arm(mode, train_set, test_set, cfg, model_seed=args.seed, progress=progress)
        print(f"  {arms[name].train_seconds:.0f}s, held-out SAD {arms[name].sad:.4f}", flush=True)
        if args.out_dir:
            args.out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(arms[name].model, args.out_dir / f"{mode}.ckpt")

    print(format_table([(n, mean_report(a.reports)) for n, a in arms.items()]))
    gain = 1 - arms["Model C"].sad / arms["Model A"].sad
    print(f"Model C SAD lower by {100 * gain:.1f}%")


if __name__ == "__main__":
    main()
