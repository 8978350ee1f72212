"""Compare 3D-CNN-Vert with the 2D CNN on a synthetic record whose target
depends on a vertical humidity difference.

Both networks get (nearly) the same number of parameters and the same
training configuration. For each base seed a full restart sweep is run and
the validation NSE of the selected network is recorded; the medians are
printed at the end.

    python3 scripts/vert_vs_2d.py --days 365 --base-seeds 5 --restarts 5
"""
from __future__ import annotations

import argparse
import json
import time

import numpy as np

from precipcnn import dataio, metrics, network, trainer
from precipcnn.experiment import prepare, resolve_split


def matched_configs(input_shapes, conv_channels=(4, 8), fc_vert=16):
    """Vert config plus a 2D config whose fc width is tuned to the nearest parameter count."""
    vert = network.NetworkConfig(variant="3d-vert", conv_channels=conv_channels, fc_hidden=fc_vert)
    target = network.parameter_count(vert, input_shapes["3d-vert"])
    flat = min(
        (network.NetworkConfig(variant="2d", conv_channels=conv_channels, fc_hidden=h) for h in range(1, 1025)),
        key=lambda c: abs(network.parameter_count(c, input_shapes["2d"]) - target),
    )
    return {"3d-vert": vert, "2d": flat}


def run(days=365, data_seed=11, noise_std=0.1, timesteps="ts4", base_seeds=5, restarts=5,
        max_epochs=60, patience=10, batch_size=32, conv_channels=(4, 8), fc_vert=16, verbose=True):
    ds = dataio.generate_synthetic(dataio.SyntheticSpec(days=days, grid=(8, 8), levels=(1000, 925, 850, 700, 500),
                                                        variables=4, seed=data_seed, noise_std=noise_std))
    spec, _ = resolve_split(ds, "auto")
    prepared = {v: prepare(ds, v, timesteps, "v1", spec) for v in ("2d", "3d-vert")}
    configs = matched_configs({v: p.input_shape for v, p in prepared.items()}, conv_channels, fc_vert)
    out = {"params": {}, "nse": {}}
    for variant, prep in prepared.items():
        cfg = configs[variant]
        out["params"][variant] = network.parameter_count(cfg, prep.input_shape)
        train_xy, (x_val, y_val) = prep.xy("train"), prep.xy("validation")
        scores = []
        for b in range(base_seeds):
            tconf = trainer.TrainConfig(batch_size=batch_size, max_epochs=max_epochs, patience_epochs=patience,
                                        restarts=restarts, base_seed=1000 * b)
            best, _ = trainer.multi_restart_fit(network.Builder(cfg, prep.input_shape), train_xy, (x_val, y_val),
                                                tconf)
            net = network.Builder(cfg, prep.input_shape)(np.random.default_rng(0))
            net.load_state(best.snapshot)
            scores.append(metrics.nse(net.predict(x_val), y_val))
            if verbose:
                print(f"{variant} base_seed={1000 * b} seed={best.seed} val NSE={scores[-1]:.4f}", flush=True)
        out["nse"][variant] = scores
    out["median"] = {v: float(np.median(s)) for v, s in out["nse"].items()}
    return out


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--days", type=int, default=365)
    p.add_argument("--data-seed", type=int, default=11)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--timesteps", default="ts4")
    p.add_argument("--base-seeds", type=int, default=5)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=60)
    p.add_argument("--patience", type=int, default=10)
    a = p.parse_args()
    t0 = time.time()
    res = run(a.days, a.data_seed, a.noise_std, a.timesteps, a.base_seeds, a.restarts, a.max_epochs, a.patience)
    res["seconds"] = round(time.time() - t0, 1)
    print(json.dumps(res, indent=2))


if __name__ == "__main__":
    main()
