"""Adaptive slicing versus fixed slicing on a scene that alternates motion and flicker.

Run with ``python demos/adaptive_slicing.py``. Prints where the AFE tree put
its frames and how a fixed-count slicer of similar granularity compares.
"""

import numpy as np

from evact.events import Segment, SyntheticScene, generate_scene
from evact.representation import AfeConfig, afe_slice, fixed_count_slice, fixed_duration_slice


def main():
    segs = []
    for k in range(10):
        if k % 2 == 0:
            segs.append(Segment(500_000, "bar", ("right", "down", "left", "up")[k // 2 % 4], 0.02, seed=k))
        else:
            segs.append(Segment(500_000, "texture", rate=0.02, pattern_seed=k, seed=k))
    stream = generate_scene(SyntheticScene(tuple(segs), 32, 32, 0.0, seed=1))
    print(f"{len(stream)} events over {stream.duration / 1e6:.1f} s")

    tree = afe_slice(stream, AfeConfig(delta=0.5, n_min=500))
    print(f"AFE: {len(tree.leaves)} frames, reasons {tree.reason_tally()}")
    print("\nsegment   kind     frames  mean events/frame")
    for k, seg in enumerate(segs):
        lo, hi = k * 500_000, (k + 1) * 500_000
        sizes = [lf.count for lf in tree.leaves if lo <= stream.t[lf.start] < hi]
        mean = f"{np.mean(sizes):10.0f}" if sizes else "         -"
        print(f"{k:7d}   {seg.kind:8s} {len(sizes):6d}  {mean}")

    # the busy segments get short frames, the flicker gets long ones
    per_frame = len(stream) // len(tree.leaves)
    print(f"\nfixed count at {per_frame} events/frame: {len(fixed_count_slice(stream, per_frame))} frames")
    print(f"fixed 50 ms windows: {len(fixed_duration_slice(stream, 50_000))} frames")


if __name__ == "__main__":
    main()
