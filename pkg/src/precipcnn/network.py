"""The CNN used for all three input layouts.

conv -> BN -> act -> conv -> BN -> act -> max-pool -> flatten -> FC -> act -> FC(1)

The 2D variant convolves over (lat, lon); the two 3D variants convolve over
(depth, lat, lon), where depth is time steps (``3d-time``) or pressure levels
(``3d-vert``). Everything else is shared.
"""
from __future__ import annotations

import dataclasses
import enum
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import layers as L
from .dataio import FormatError, read_blob, write_blob
from .tensor import dtype_of

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class Variant(str, enum.Enum):
    CNN2D = "2d"
    CNN3D_TIME = "3d-time"
    CNN3D_VERT = "3d-vert"

    @property
    def spatial_dims(self) -> int:
        return 2 if self is Variant.CNN2D else 3


@dataclass
class NetworkConfig:
    variant: Variant = Variant.CNN2D
    conv_channels: Tuple[int, int] = (32, 64)
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1
    pool_kernel: int = 3
    pool_stride: int = 1
    fc_hidden: int = 64
    activation: str = "relu"
    precision: str = "f64"
    # shrink the depth-axis pool window to the depth when it is shallower than pool_kernel
    depth_pool_clamp: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.conv_channels = tuple(int(c) for c in self.conv_channels)
        if len(self.conv_channels) != 2 or min(self.conv_channels) < 1:
            raise ValueError(f"conv_channels must be two positive ints, got {self.conv_channels}")
        if self.fc_hidden < 1:
            raise ValueError("fc_hidden must be >= 1")
        if self.activation not in ("none", "relu"):
            raise ValueError(f"activation must be 'none' or 'relu', got {self.activation!r}")
        if self.kernel_size < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError("invalid kernel_size/stride/padding")
        if self.pool_kernel < 1 or self.pool_stride < 1:
            raise ValueError("invalid pool_kernel/pool_stride")
        dtype_of(self.precision)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def pool_window(config: NetworkConfig, feature_shape: Sequence[int]) -> Tuple[Tuple[int, ...], bool]:
    """Pool window for a per-sample feature map shape; second item says whether depth was clamped."""
    spatial = tuple(feature_shape[1:])
    window = [config.pool_kernel] * len(spatial)
    clamped = False
    if config.variant.spatial_dims == 3 and config.depth_pool_clamp and spatial[0] < config.pool_kernel:
        window[0] = spatial[0]
        clamped = True
    return tuple(window), clamped


def infer_shapes(config: NetworkConfig, input_shape: Sequence[int]) -> List[Tuple[str, Tuple[int, ...]]]:
    """Per-layer output shapes (batch axis excluded) for one input sample.

    Raises ``layers.ShapeError`` if any intermediate dimension would be
    non-positive.
    """
    input_shape = tuple(int(d) for d in input_shape)
    nd = config.variant.spatial_dims
    if len(input_shape) != nd + 1:
        raise L.ShapeError(
            f"variant {config.variant.value} expects input rank {nd + 1} (channels + {nd} axes), got {input_shape}"
        )
    if min(input_shape) < 1:
        raise L.ShapeError(f"non-positive input dimension in {input_shape}")
    shapes = []
    shape = input_shape
    for i, channels in enumerate(config.conv_channels, start=1):
        spatial = []
        for size in shape[1:]:
            n = (size + 2 * config.padding - config.kernel_size) // config.stride + 1
            if size + 2 * config.padding < config.kernel_size or n < 1:
                raise L.ShapeError(f"conv{i}: kernel {config.kernel_size} does not fit {shape}")
            spatial.append(n)
        shape = (channels, *spatial)
        shapes += [(f"conv{i}", shape), (f"bn{i}", shape)]
        if config.activation != "none":
            shapes.append((f"act{i}", shape))
    window, _ = pool_window(config, shape)
    spatial = []
    for size, k in zip(shape[1:], window):
        n = (size - k) // config.pool_stride + 1
        if size < k or n < 1:
            raise L.ShapeError(f"pool: window {window} leaves a non-positive dimension for input {shape}")
        spatial.append(n)
    shape = (shape[0], *spatial)
    shapes.append(("pool", shape))
    shapes.append(("flatten", (int(np.prod(shape)),)))
    shapes.append(("fc1", (config.fc_hidden,)))
    if config.activation != "none":
        shapes.append(("act3", (config.fc_hidden,)))
    shapes.append(("fc2", (1,)))
    return shapes


def parameter_count(config: NetworkConfig, input_shape: Sequence[int]) -> int:
    """Closed-form learnable-parameter count."""
    nd = config.variant.spatial_dims
    kvol = config.kernel_size ** nd
    c1, c2 = config.conv_channels
    m = input_shape[0]
    flat = infer_shapes(config, input_shape)
    flat_len = dict(flat)["flatten"][0]
    conv = c1 * m * kvol + c1 + c2 * c1 * kvol + c2
    bn = 2 * c1 + 2 * c2
    fc = config.fc_hidden * flat_len + config.fc_hidden + config.fc_hidden + 1
    return conv + bn + fc


class Network:
    """Ordered layers plus a flat ``name -> array`` parameter registry."""

    def __init__(self, config: NetworkConfig, input_shape: Sequence[int], layers: List[Tuple[str, L.Layer]],
                 seed: Optional[int] = None, notes: Optional[List[str]] = None):
        self.config = config
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layers = layers
        self.seed = seed
        self.notes = notes or []

    @property
    def params(self) -> Dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params.items()}

    @property
    def grads(self) -> Dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.grads.items()}

    def batchnorms(self) -> List[Tuple[str, L.BatchNorm]]:
        return [(name, layer) for name, layer in self.layers if isinstance(layer, L.BatchNorm)]

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise L.ShapeError(f"batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        x = x.astype(dtype_of(self.config.precision), copy=False)
        for _, layer in self.layers:
            x = layer.forward(x, training=training)
        return x[:, 0]

    def backward(self, grad_pred: np.ndarray) -> None:
        g = np.asarray(grad_pred)[:, None]
        for _, layer in reversed(self.layers):
            g = layer.backward(g)

    def state(self) -> Dict[str, np.ndarray]:
        """Copy of all parameters and batch-norm running statistics."""
        out = {k: v.copy() for k, v in self.params.items()}
        for name, bn in self.batchnorms():
            out[f"{name}.running_mean"] = bn.running_mean.copy()
            out[f"{name}.running_var"] = bn.running_var.copy()
        return out

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        params = self.params
        for key, value in state.items():
            if key in params:
                if params[key].shape != value.shape:
                    raise L.ShapeError(f"{key}: shape {value.shape} does not match {params[key].shape}")
                params[key][...] = value
        for name, bn in self.batchnorms():
            bn.running_mean = state[f"{name}.running_mean"].astype(bn.running_mean.dtype).copy()
            bn.running_var = state[f"{name}.running_var"].astype(bn.running_var.dtype).copy()

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        """Inference-mode forward in chunks."""
        out = [self.forward(x[i:i + batch_size], training=False) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0, dtype=dtype_of(self.config.precision))


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build(config: NetworkConfig, input_shape: Sequence[int], rng: np.random.Generator,
          seed: Optional[int] = None) -> Network:
    """Instantiate the network with weights uniform in +-sqrt(6 / fan_in) and zero biases."""
    shapes = infer_shapes(config, input_shape)
    dtype = dtype_of(config.precision)
    nd = config.variant.spatial_dims
    k = (config.kernel_size,) * nd
    kvol = config.kernel_size ** nd
    layers: List[Tuple[str, L.Layer]] = []
    notes = []
    channels = input_shape[0]
    shape = tuple(input_shape)
    for i, p in enumerate(config.conv_channels, start=1):
        kern = _uniform(rng, (p, channels) + k, channels * kvol, dtype)
        conv = L.make_conv(nd, kern, np.zeros(p, dtype=dtype), stride=config.stride, padding=config.padding)
        layers.append((f"conv{i}", conv))
        shape = conv.output_shape(shape)
        layers.append((f"bn{i}", L.BatchNorm(p, eps=config.bn_eps, momentum=config.bn_momentum, dtype=dtype)))
        if config.activation == "relu":
            layers.append((f"act{i}", L.ReLU()))
        channels = p
    window, clamped = pool_window(config, shape)
    if clamped:
        msg = f"depth-axis pool window clamped from {config.pool_kernel} to {window[0]} (depth {shape[1]})"
        log.info(msg)
        notes.append(msg)
    layers.append(("pool", L.make_maxpool(nd, window, stride=config.pool_stride)))
    layers.append(("flatten", L.Flatten()))
    flat = dict(shapes)["flatten"][0]
    layers.append(("fc1", L.Linear(_uniform(rng, (config.fc_hidden, flat), flat, dtype),
                                   np.zeros(config.fc_hidden, dtype=dtype))))
    if config.activation == "relu":
        layers.append(("act3", L.ReLU()))
    layers.append(("fc2", L.Linear(_uniform(rng, (1, config.fc_hidden), config.fc_hidden, dtype),
                                   np.zeros(1, dtype=dtype))))
    return Network(config, input_shape, layers, seed=seed, notes=notes)


@dataclass
class Builder:
    """Picklable ``rng -> Network`` factory for restart sweeps."""

    config: NetworkConfig
    input_shape: Tuple[int, ...]

    def __call__(self, rng: np.random.Generator) -> Network:
        return build(self.config, self.input_shape, rng)


def save_checkpoint(net: Network, path, extra: Optional[Dict[str, np.ndarray]] = None,
                    meta: Optional[dict] = None) -> Path:
    """Write ``checkpoint.json`` + ``params.bin`` under directory ``path``.

    ``extra`` holds additional float64 arrays (e.g. standardization
    statistics) kept in ``extra.bin``; ``meta`` is free-form JSON.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    dtype = dtype_of(net.config.precision)
    tensors = net.state()
    names = sorted(tensors)
    flat = np.concatenate([tensors[n].astype(dtype).ravel() for n in names])
    extra = {k: np.asarray(v, dtype=np.float64) for k, v in (extra or {}).items()}
    extra_names = sorted(extra)
    extra_flat = np.concatenate([extra[n].ravel() for n in extra_names]) if extra else np.zeros(0)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "precision": net.config.precision,
        "param_file": "params.bin",
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
        "extra_file": "extra.bin",
        "extra_tensors": [{"name": n, "shape": list(extra[n].shape)} for n in extra_names],
        "notes": net.notes,
        "meta": meta or {},
    }
    write_blob(path / "params.bin", b"PRM1", flat)
    write_blob(path / "extra.bin", b"XTR1", extra_flat)
    (path / "checkpoint.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def _unpack(path, magic, specs, dtype) -> Dict[str, np.ndarray]:
    try:
        shapes = [(s["name"], tuple(int(d) for d in s["shape"])) for s in specs]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed tensor table for {path}: {exc}") from exc
    flat = read_blob(path, magic, sum(int(np.prod(sh, dtype=np.int64)) for _, sh in shapes), dtype)
    out, offset = {}, 0
    for name, sh in shapes:
        n = int(np.prod(sh, dtype=np.int64))
        out[name] = flat[offset:offset + n].reshape(sh)
        offset += n
    return out


def load_checkpoint(path) -> Tuple[Network, Dict[str, np.ndarray], dict]:
    """Return (network, extra arrays, header) from a checkpoint directory."""
    path = Path(path)
    try:
        header = json.loads((path / "checkpoint.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint header in {path}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {header.get('format_version')!r}")
    try:
        config = NetworkConfig.from_dict(header["config"])
        specs = header["tensors"]
        extra_specs = header["extra_tensors"]
        input_shape = header["input_shape"]
        param_file, extra_file = header["param_file"], header["extra_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from exc
    state = _unpack(path / param_file, b"PRM1", specs, dtype_of(config.precision))
    extra = _unpack(path / extra_file, b"XTR1", extra_specs, np.float64)
    net = build(config, input_shape, np.random.default_rng(0), seed=header.get("seed"))
    expected = set(net.state())
    if set(state) != expected:
        raise FormatError(f"checkpoint tensors {sorted(set(state) ^ expected)} do not match the architecture")
    net.load_state(state)
    return net, extra, header
