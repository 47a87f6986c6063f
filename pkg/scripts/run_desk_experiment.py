"""LEAVES pretraining + fine-tuning vs a supervised model trained from scratch on the same labels.

    python scripts/run_desk_experiment.py --out runs/desk --seed 0
"""

import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

from leaves.data import SyntheticSpec, gen_synthetic, normalize, split
from leaves.trainer import (
    TrainConfig,
    finetune,
    pretrain_adversarial,
    save_augment,
    save_encoder,
    supervised_baseline,
    table_cell,
)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--noise", type=float, default=SyntheticSpec.noise)
    ap.add_argument("--pretrain-epochs", type=int, default=20)
    ap.add_argument("--label-fraction", type=float, default=0.1)
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = gen_synthetic(SyntheticSpec(noise=args.noise))
    train, test = split(ds, (2 / 3, 1 / 3), seed=0)
    train, stats = normalize(train)
    test, _ = normalize(test, stats=stats)
    config = replace(TrainConfig(seed=args.seed, pretrain_epochs=args.pretrain_epochs),
                     label_fraction=args.label_fraction)

    t0 = time.perf_counter()
    encoder, params, runlog = pretrain_adversarial(train, config)
    t_pre = time.perf_counter() - t0
    save_encoder(out / "encoder.ckpt", encoder)
    save_augment(out / "augment.ckpt", params)
    runlog.write_jsonl(out / "runlog.jsonl")
    runlog.write_trajectories(out / "trajectories.csv")
    _, leaves_metrics = finetune(encoder, train, test, config)
    _, sup_metrics = supervised_baseline(train, test, config)
    elapsed = time.perf_counter() - t0

    result = {"leaves": leaves_metrics, "supervised": sup_metrics, "effective_augmentation": params.effective(),
              "pretrain_seconds": t_pre, "total_seconds": elapsed}
    (out / "results.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"LEAVES      {table_cell(leaves_metrics['accuracy'], leaves_metrics['macro_f1'])}")
    print(f"supervised  {table_cell(sup_metrics['accuracy'], sup_metrics['macro_f1'])}")
    print(f"learned augmentation {params.effective()}")
    print(f"{elapsed:.0f}s total ({t_pre:.0f}s pretraining)")


if __name__ == "__main__":
    main()
