"""Central finite-difference checks for every layer and for the full network."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from . import layers as L
from .network import NetworkConfig, Variant, build

STEP = 1e-5
TOLERANCE = 1e-4
# denominator floor: components below it are held to an absolute error of TOLERANCE * FLOOR,
# which keeps finite-difference roundoff (~1e-10) on exactly-zero gradients from failing
FLOOR = 1e-4


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``f()`` with respect to ``x``, perturbed in place."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_layer(layer: L.Layer, x: np.ndarray, rng: np.random.Generator, training: bool = True) -> Dict[str, float]:
    """Relative errors of input and parameter gradients for the scalar loss sum(out * G)."""
    out = layer.forward(x, training=training)
    weights = rng.standard_normal(out.shape)
    gx = layer.backward(weights)
    analytic = {"input": gx, **{k: v.copy() for k, v in layer.grads.items()}}

    def loss():
        return float(np.sum(layer.forward(x, training=training) * weights))

    errors = {"input": rel_error(analytic["input"], numerical_grad(loss, x))}
    for name, p in layer.params.items():
        errors[name] = rel_error(analytic[name], numerical_grad(loss, p))
    layer._cache = None
    return errors


def spaced_values(rng: np.random.Generator, shape) -> np.ndarray:
    """Random arrangement of well-separated values (gaps >> STEP), so max pooling has no near-ties."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(-0.01, 0.01, n) - n * 0.05).reshape(shape)


def _conv_instance(rng, nd):
    m, p = rng.integers(1, 4), rng.integers(1, 4)
    k = tuple(rng.integers(1, 4, size=nd))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    spatial = tuple(int(kk + rng.integers(0, 4)) for kk in k)
    layer = L.make_conv(nd, rng.standard_normal((p, m) + k), rng.standard_normal(p), stride, pad)
    return layer, rng.standard_normal((2, m) + spatial)


def _pool_instance(rng, nd):
    k = tuple(int(v) for v in rng.integers(1, 4, size=nd))
    stride = int(rng.integers(1, 3))
    spatial = tuple(int(kk + rng.integers(0, 3)) for kk in k)
    return L.make_maxpool(nd, k, stride), spaced_values(rng, (2, int(rng.integers(1, 3))) + spatial)


def _bn_instance(rng):
    c = int(rng.integers(1, 4))
    layer = L.BatchNorm(c)
    layer.params["gamma"][...] = rng.uniform(0.5, 1.5, c)
    layer.params["beta"][...] = rng.standard_normal(c)
    shape = (int(rng.integers(2, 5)), c) + tuple(int(v) for v in rng.integers(1, 4, size=int(rng.integers(0, 4))))
    return layer, rng.standard_normal(shape) * rng.uniform(0.5, 3.0)


def _linear_instance(rng):
    i, o = rng.integers(1, 6, size=2)
    return L.Linear(rng.standard_normal((o, i)), rng.standard_normal(o)), rng.standard_normal((3, i))


def _relu_instance(rng):
    # keep inputs away from the kink at zero
    x = rng.standard_normal((3, 5))
    x = np.where(np.abs(x) < 1e-2, 0.5, x)
    return L.ReLU(), x


LAYER_CASES = {
    "conv2d": lambda rng: _conv_instance(rng, 2),
    "conv3d": lambda rng: _conv_instance(rng, 3),
    "maxpool2d": lambda rng: _pool_instance(rng, 2),
    "maxpool3d": lambda rng: _pool_instance(rng, 3),
    "batchnorm": _bn_instance,
    "linear": _linear_instance,
    "relu": _relu_instance,
}


def check_mse(rng: np.random.Generator) -> float:
    n = int(rng.integers(1, 8))
    pred, target = rng.standard_normal(n), rng.standard_normal(n)
    _, g = L.mse_loss(pred, target)
    return rel_error(g, numerical_grad(lambda: L.mse_loss(pred, target)[0], pred))


TINY_SAMPLE = (2, 3, 2)  # V, L, T
TINY_GRID = (6, 6)


def tiny_network(variant, rng: np.random.Generator, activation: str = "relu"):
    from .channelizer import input_shape

    config = NetworkConfig(variant=variant, conv_channels=(2, 2), fc_hidden=4, activation=activation)
    shape = input_shape(variant, *TINY_SAMPLE, *TINY_GRID)
    net = build(config, shape, rng)
    for _, bn in net.batchnorms():
        bn.params["gamma"][...] = rng.uniform(0.5, 1.5, bn.channels)
        bn.params["beta"][...] = rng.uniform(-0.5, 0.5, bn.channels)
    return net


class KinkCrossed(Exception):
    """A finite-difference probe changed a ReLU mask or a max-pool argmax."""


def _pattern(net) -> List[np.ndarray]:
    out = []
    for _, layer in net.layers:
        if isinstance(layer, L.ReLU):
            out.append(layer._cache)
        elif isinstance(layer, L.MaxPoolND):
            out.append(layer._cache[1])
    return out


def check_network(variant, rng: np.random.Generator, batch: int = 4) -> float:
    """Largest relative error over all parameters for the training-mode MSE loss.

    Raises ``KinkCrossed`` when the instance sits within one step of a
    non-differentiable point, where central differences are meaningless.
    """
    net = tiny_network(variant, rng)
    x = rng.standard_normal((batch,) + net.input_shape)
    y = rng.standard_normal(batch)
    pred = net.forward(x, training=True)
    reference = [a.copy() for a in _pattern(net)]
    _, g = L.mse_loss(pred, y)
    net.backward(g)
    analytic = {k: v.copy() for k, v in net.grads.items()}

    def loss():
        value = L.mse_loss(net.forward(x, training=True), y)[0]
        if any(not np.array_equal(a, b) for a, b in zip(reference, _pattern(net))):
            raise KinkCrossed
        return value

    return max(rel_error(analytic[k], numerical_grad(loss, p)) for k, p in net.params.items())


def check_network_instances(variant, rng: np.random.Generator, instances: int, max_resample: int = 100):
    """(worst error, number of resampled kink instances) over ``instances`` valid instances."""
    worst, done, skipped = 0.0, 0, 0
    while done < instances:
        try:
            worst = max(worst, check_network(variant, rng))
            done += 1
        except KinkCrossed:
            skipped += 1
            if skipped > max_resample:
                raise RuntimeError(f"{variant}: too many instances at non-differentiable points")
    return worst, skipped


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    resampled: int = 0

    @property
    def passed(self) -> bool:
        return self.max_error <= TOLERANCE


def run_suite(instances: int = 20, seed: int = 0, networks: bool = True) -> List[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in LAYER_CASES.items():
        worst = 0.0
        for _ in range(instances):
            layer, x = make(rng)
            worst = max(worst, max(check_layer(layer, x, rng).values()))
        results.append(CheckResult(name, instances, worst))
    results.append(CheckResult("mse", instances, max(check_mse(rng) for _ in range(instances))))
    if networks:
        for variant in Variant:
            worst, skipped = check_network_instances(variant, rng, instances)
            results.append(CheckResult(f"network-{variant.value}", instances, worst, skipped))
    return results
