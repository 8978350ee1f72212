"""Check that each network variant can memorize a small noise-free synthetic set.

    python3 scripts/overfit.py --samples 64 --max-epochs 2000
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from precipcnn.channelizer import build_inputs, make_windows, resolve_levels
from precipcnn.dataio import SyntheticSpec, compute_stats, generate_synthetic, standardize, standardize_targets
from precipcnn.network import NetworkConfig, Variant, build
from precipcnn.trainer import TrainConfig, fit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--max-epochs", type=int, default=2000)
    p.add_argument("--target", type=float, default=1e-2, help="stop once training MSE (standardized) is this low")
    p.add_argument("--seed", type=int, default=7)
    a = p.parse_args()

    ds = generate_synthetic(SyntheticSpec(days=a.samples, grid=(8, 8), levels=resolve_levels("v1"), variables=4,
                                          seed=a.seed, noise_std=0.0))
    stats = compute_stats(ds, (0, ds.days))
    z, y = standardize(ds.stack, stats), standardize_targets(ds.targets, stats)
    for variant in Variant:
        batch = build_inputs(z, y, make_windows(ds.days, "ts4"), variant)
        data = (batch.inputs, batch.targets)
        net = build(NetworkConfig(variant=variant, conv_channels=(8, 8), fc_hidden=32), batch.inputs.shape[1:],
                    np.random.default_rng(0))
        t0 = time.perf_counter()
        res = fit(net, data, data, TrainConfig(batch_size=16, max_epochs=a.max_epochs, patience_epochs=a.max_epochs,
                                               target_loss=a.target), np.random.default_rng(1))
        print(f"{variant.value:8s} MSE {res.best_val_loss:.3e} after {res.epochs_run} epochs "
              f"({time.perf_counter() - t0:.1f}s)")


if __name__ == "__main__":
    main()
