"""What the uncertainty head does to an embedding, and how sampling behaves.

Run with ``python demos/gaussian_head.py``.
"""

import numpy as np

from evact import autodiff as ad
from evact.autodiff import AttentionBlock, ParamStore
from evact.crue import reparam_sample, smooth_l1_loss, uncertainty_estimate


def main():
    store = ParamStore(seed=0)
    att1, att2 = AttentionBlock(store, "att1", 2), AttentionBlock(store, "att2", 2)
    f = np.array([0.8, -0.3, 1.2, 0.1, -0.5, 0.0, 0.4, 2.0])
    g = uncertainty_estimate(f, att1, att2)
    np.set_printoptions(precision=3, suppress=True)
    print("f     ", f)
    print("mu    ", g.mu.data)
    print("sigma ", g.sigma.data)

    s = reparam_sample(g, 20_000, np.random.default_rng(1))
    x = s.samples.data
    print("\n20000 samples")
    print("mean  ", x.mean(0))
    print("std   ", x.std(0))

    target = ad.mean_std_normalize(f)
    print(f"\nsmooth-L1 of the samples against normalised f: {smooth_l1_loss(s.samples, target).item():.4f}")
    print(f"sum of sigma^2: {float((g.sigma.data ** 2).sum()):.4f}")


if __name__ == "__main__":
    main()
