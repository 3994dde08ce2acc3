"""A short toy training run: full model and the contrastive-only ablation.

Run with ``python demos/train_toy.py [epochs]`` (default 40, under a minute).
"""

import sys
import time

from evact.trainer import DatasetSpec, TrainConfig, build_dataset, train


def main(epochs=40):
    ds = build_dataset(DatasetSpec(items_per_class=30), seed=0)
    print(f"{len(ds.items)} clips, classes {[c[0] for c in ds.labels()]}")
    for variant in ("none", "all"):
        cfg = TrainConfig(epochs=epochs, seed=0).ablate(variant)
        t0 = time.perf_counter()
        res = train(ds, cfg)
        first, last = res.metrics[0], res.metrics[-1]
        name = "full model" if variant == "none" else "contrastive only"
        print(f"\n{name} ({time.perf_counter() - t0:.0f}s)")
        print(f"  loss {first['final']:.3f} -> {last['final']:.3f}")
        print(f"  train top-1 {res.train_report.top1:.3f}, test top-1 {res.report.top1:.3f}")
        print("  per class", " ".join(f"{a:.2f}" for a in res.report.per_class))


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 40)
