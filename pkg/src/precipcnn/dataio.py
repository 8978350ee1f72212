"""Dataset container, calendar splits, standardization and the synthetic generator.

On disk a dataset is a directory::

    manifest.json   format_version, dims {D,S,V,L,H,W}, variables, levels_hpa,
                    start_date, slots, precision, stack_file, target_file
    stack.bin       b"AGR1" + row-major little-endian [D,S,V,L,H,W] array
    targets.bin     b"TGT1" + D little-endian scalars (mm/day)

Any other binary file in the package (checkpoints, statistics) uses the same
convention: four magic bytes followed by raw little-endian scalars.
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import dtype_of

FORMAT_VERSION = 1
SLOTS = ("03:00", "09:00", "15:00", "21:00")
DIM_KEYS = ("D", "S", "V", "L", "H", "W")

DEFAULT_VARIABLES = {
    1: ["specific_humidity"],
    2: ["specific_humidity", "air_temperature"],
    3: ["specific_humidity", "zonal_wind", "air_temperature"],
    4: ["specific_humidity", "meridional_wind", "zonal_wind", "air_temperature"],
    5: ["specific_humidity", "meridional_wind", "zonal_wind", "vertical_wind", "air_temperature"],
}


class FormatError(ValueError):
    """A file on disk does not follow the container format."""


def _le(dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<")


def write_blob(path, magic: bytes, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(array.astype(_le(array.dtype), copy=False).tobytes(order="C"))


def read_blob(path, magic: bytes, count: int, dtype) -> np.ndarray:
    """Read exactly ``count`` scalars after ``magic``; anything else is an error."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if raw[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic {raw[:len(magic)]!r}, expected {magic!r}")
    itemsize = np.dtype(dtype).itemsize
    expected = len(magic) + count * itemsize
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "has trailing bytes"
        raise FormatError(f"{path}: blob {kind} ({len(raw)} bytes, expected {expected})")
    return np.frombuffer(raw, dtype=_le(dtype), offset=len(magic)).astype(dtype)


@dataclass
class AtmosDataset:
    stack: np.ndarray  # [D, S, V, L, H, W]
    targets: np.ndarray  # [D], mm/day
    start_date: dt.date
    variables: List[str]
    levels: List[float]
    slots: List[str] = field(default_factory=lambda: list(SLOTS))

    def __post_init__(self):
        if self.stack.ndim != 6:
            raise ValueError(f"stack must be [D,S,V,L,H,W], got shape {self.stack.shape}")
        D, S, V, L, _, _ = self.stack.shape
        if self.targets.shape != (D,):
            raise ValueError(f"targets shape {self.targets.shape} does not match D={D}")
        if S != len(self.slots) or V != len(self.variables) or L != len(self.levels):
            raise ValueError("stack dims disagree with slots/variables/levels metadata")
        if D < 1:
            raise ValueError("dataset needs at least one day")

    @property
    def days(self) -> int:
        return self.stack.shape[0]

    @property
    def grid(self) -> Tuple[int, int]:
        return self.stack.shape[4], self.stack.shape[5]

    @property
    def precision(self) -> str:
        return "f32" if self.stack.dtype == np.float32 else "f64"

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=self.days - 1)

    def date(self, index: int) -> dt.date:
        return self.start_date + dt.timedelta(days=int(index))

    def day_index(self, date: dt.date) -> int:
        return (date - self.start_date).days


def save_dataset(ds: AtmosDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": dict(zip(DIM_KEYS, (int(d) for d in ds.stack.shape))),
        "variables": list(ds.variables),
        "levels_hpa": [float(v) for v in ds.levels],
        "start_date": ds.start_date.isoformat(),
        "slots": list(ds.slots),
        "precision": ds.precision,
        "stack_file": "stack.bin",
        "target_file": "targets.bin",
    }
    write_blob(path / manifest["stack_file"], b"AGR1", ds.stack)
    write_blob(path / manifest["target_file"], b"TGT1", ds.targets.astype(ds.stack.dtype))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_dataset(path) -> AtmosDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read {path / 'manifest.json'}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict):
        raise FormatError("manifest.json must hold a JSON object")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported format_version {manifest.get('format_version')!r}")
    try:
        dims = tuple(int(manifest["dims"][k]) for k in DIM_KEYS)
        variables = [str(v) for v in manifest["variables"]]
        levels = [float(v) for v in manifest["levels_hpa"]]
        start = dt.date.fromisoformat(manifest["start_date"])
        slots = [str(s) for s in manifest["slots"]]
        dtype = dtype_of(manifest["precision"])
        stack_file, target_file = manifest["stack_file"], manifest["target_file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc!r}") from exc
    if min(dims) < 1:
        raise FormatError(f"non-positive dimension in {dims}")
    D, S, V, L, _, _ = dims
    if (S, V, L) != (len(slots), len(variables), len(levels)):
        raise FormatError(f"dims {dims} disagree with slots/variables/levels lists")
    stack = read_blob(path / stack_file, b"AGR1", int(np.prod(dims, dtype=np.int64)), dtype).reshape(dims)
    targets = read_blob(path / target_file, b"TGT1", D, dtype)
    return AtmosDataset(stack, targets, start, variables, levels, slots)


# --- calendar splits ---------------------------------------------------------

DateRange = Tuple[dt.date, dt.date]  # inclusive


@dataclass(frozen=True)
class SplitSpec:
    train: DateRange = (dt.date(1980, 1, 1), dt.date(2005, 12, 31))
    validation: DateRange = (dt.date(2006, 1, 1), dt.date(2010, 12, 31))
    test: DateRange = (dt.date(2011, 1, 1), dt.date(2015, 12, 31))

    def items(self):
        return (("train", self.train), ("validation", self.validation), ("test", self.test))

    def to_dict(self) -> dict:
        return {k: [a.isoformat(), b.isoformat()] for k, (a, b) in self.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        conv = lambda pair: (dt.date.fromisoformat(pair[0]), dt.date.fromisoformat(pair[1]))
        return cls(conv(d["train"]), conv(d["validation"]), conv(d["test"]))


def split(ds: AtmosDataset, spec: SplitSpec = SplitSpec()) -> Dict[str, Tuple[int, int]]:
    """Half-open day-index ranges for each period.

    Periods must be ordered and back to back (no overlap, no gap) and lie
    entirely inside the dataset calendar.
    """
    out = {}
    prev_end = None
    for name, (a, b) in spec.items():
        if b < a:
            raise ValueError(f"{name} range ends before it starts: {a}..{b}")
        if prev_end is not None:
            if a <= prev_end:
                raise ValueError(f"{name} range {a}..{b} overlaps the previous period")
            if a != prev_end + dt.timedelta(days=1):
                raise ValueError(f"gap between previous period (ends {prev_end}) and {name} (starts {a})")
        if a < ds.start_date or b > ds.end_date:
            raise ValueError(
                f"{name} range {a}..{b} not covered by dataset calendar {ds.start_date}..{ds.end_date}"
            )
        out[name] = (ds.day_index(a), ds.day_index(b) + 1)
        prev_end = b
    return out


def scaled_split(ds: AtmosDataset, weights: Sequence[float] = (26, 5, 5)) -> SplitSpec:
    """Partition the dataset calendar by day counts in the given proportions (default 26:5:5 years)."""
    if ds.days < 3:
        raise ValueError("need at least 3 days to form three periods")
    w = np.asarray(weights, dtype=float)
    bounds = np.round(np.cumsum(w) / w.sum() * ds.days).astype(int)
    bounds = np.clip(bounds, 1, ds.days)
    n_train = max(1, min(bounds[0], ds.days - 2))
    n_val = max(1, min(bounds[1] - n_train, ds.days - n_train - 1))
    cuts = [0, n_train, n_train + n_val, ds.days]
    ranges = [(ds.date(cuts[i]), ds.date(cuts[i + 1] - 1)) for i in range(3)]
    return SplitSpec(*ranges)


# --- standardization -----------------------------------------------------------

@dataclass
class ChannelStats:
    """Per (slot, variable, level) mean/std plus target mean/std, from training days only."""

    mean: np.ndarray  # [S, V, L]
    std: np.ndarray  # [S, V, L]; forced to 1 where constant
    constant: np.ndarray  # [S, V, L] bool
    target_mean: float
    target_std: float

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "stats.mean": self.mean,
            "stats.std": self.std,
            "stats.constant": self.constant.astype(np.float64),
            "stats.target": np.array([self.target_mean, self.target_std]),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ChannelStats":
        t = arrays["stats.target"]
        return cls(np.asarray(arrays["stats.mean"], dtype=np.float64),
                   np.asarray(arrays["stats.std"], dtype=np.float64),
                   np.asarray(arrays["stats.constant"]) > 0.5, float(t[0]), float(t[1]))


def compute_stats(ds: AtmosDataset, train_range: Tuple[int, int]) -> ChannelStats:
    start, stop = train_range
    if stop <= start:
        raise ValueError("training range is empty")
    block = ds.stack[start:stop].astype(np.float64)
    mean = block.mean(axis=(0, 4, 5))
    std = block.std(axis=(0, 4, 5))
    constant = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    std = np.where(constant, 1.0, std)
    t = ds.targets[start:stop].astype(np.float64)
    t_std = float(t.std())
    return ChannelStats(mean, std, constant, float(t.mean()), t_std if t_std > 0 else 1.0)


def standardize(stack: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Standardize a [..., S, V, L, H, W] array channel by channel; constant channels become 0."""
    shape = stats.mean.shape + (1, 1)
    z = (stack - stats.mean.reshape(shape)) / stats.std.reshape(shape)
    z = np.where(stats.constant.reshape(shape), 0.0, z)
    return z.astype(stack.dtype, copy=False)


def standardize_targets(y: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return (np.asarray(y, dtype=np.float64) - stats.target_mean) / stats.target_std


def unstandardize_targets(z: np.ndarray, stats: ChannelStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.target_std + stats.target_mean


# --- synthetic generator -------------------------------------------------------

# target = SCALE * softplus(A*Q + B*(Qlow - Qup)*Tmid + C*dQ + OFFSET + noise)
SYNTHETIC_CONSTANTS = {
    "a": 0.8,
    "b": 1.5,
    "c": 1.0,
    "offset": -1.0,
    "scale_mm": 10.0,
    "humidity_level_hpa": 925.0,
    "upper_level_hpa": 500.0,
    "temperature_level_hpa": 850.0,
    "field_noise": 0.05,
    "n_modes": 4,
    # correlation between levels decays as exp(-|dp| / scale); 0 makes levels independent
    "vertical_scale_hpa": 300.0,
}


@dataclass
class SyntheticSpec:
    days: int = 730
    grid: Tuple[int, int] = (8, 8)
    levels: Sequence[float] = (500, 700, 850, 925, 1000)
    variables: int = 4
    seed: int = 0
    noise_std: float = 0.0
    start_date: dt.date = dt.date(1980, 1, 1)
    precision: str = "f64"
    # overrides for SYNTHETIC_CONSTANTS (e.g. {"b": 0.0})
    constants: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "days": self.days, "grid": list(self.grid), "levels": [float(v) for v in self.levels],
            "variables": self.variables, "seed": self.seed, "noise_std": self.noise_std,
            "start_date": self.start_date.isoformat(), "precision": self.precision,
            "constants": {**SYNTHETIC_CONSTANTS, **self.constants},
        }


def central_mask(h: int, w: int) -> Tuple[slice, slice]:
    """Fixed central region: the middle half of each horizontal axis."""
    return slice(h // 4, h - h // 4), slice(w // 4, w - w // 4)


def _nearest(levels: Sequence[float], target: float) -> int:
    return int(np.argmin(np.abs(np.asarray(levels, dtype=float) - target)))


def target_roles(variables: Sequence[str], levels: Sequence[float], constants: dict) -> Dict[str, int]:
    """Indices of the humidity/temperature variables and the three reference levels."""
    temp = [i for i, v in enumerate(variables) if "temperature" in v]
    return {
        "q": 0,
        "t": temp[0] if temp else len(variables) - 1,
        "low": _nearest(levels, constants["humidity_level_hpa"]),
        "up": _nearest(levels, constants["upper_level_hpa"]),
        "mid": _nearest(levels, constants["temperature_level_hpa"]),
    }


def synthetic_signal(stack: np.ndarray, variables, levels, constants: Optional[dict] = None) -> np.ndarray:
    """Noise-free pre-softplus signal for every day of ``stack``."""
    k = {**SYNTHETIC_CONSTANTS, **(constants or {})}
    r = target_roles(variables, levels, k)
    ys, xs = central_mask(stack.shape[4], stack.shape[5])
    m = stack[:, :, :, :, ys, xs].astype(np.float64).mean(axis=(4, 5))  # [D, S, V, L]
    q15 = m[:, 2, r["q"], r["low"]]
    q03 = m[:, 0, r["q"], r["low"]]
    vert = m[:, 2, r["q"], r["low"]] - m[:, 2, r["q"], r["up"]]
    temp = m[:, 2, r["t"], r["mid"]]
    return k["a"] * q15 + k["b"] * vert * temp + k["c"] * (q15 - q03) + k["offset"]


def generate_synthetic(spec: SyntheticSpec) -> AtmosDataset:
    """Seeded smooth fields (low-frequency sinusoids in space and time, plus noise)
    and a deterministic precipitation target computed from them."""
    if spec.days < 3:
        raise ValueError("synthetic dataset needs at least 3 days")
    h, w = spec.grid
    if h < 3 or w < 3:
        raise ValueError(f"grid {spec.grid} too small for a 3x3 kernel")
    if spec.variables < 1 or not spec.levels:
        raise ValueError("need at least one variable and one level")
    if spec.noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    k = {**SYNTHETIC_CONSTANTS, **spec.constants}
    variables = DEFAULT_VARIABLES.get(spec.variables) or [f"var{i}" for i in range(spec.variables)]
    levels = sorted(float(v) for v in spec.levels)
    V, L, K = spec.variables, len(levels), int(k["n_modes"])
    S = len(SLOTS)
    root = np.random.SeedSequence(spec.seed)
    field_rng, noise_rng = (np.random.default_rng(s) for s in root.spawn(2))

    # spatial patterns: mode 0 is uniform, others are one-wavelength plane waves
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    waves = field_rng.integers(0, 2, size=(V, L, K, 2))
    waves[:, :, 0] = 0
    phase = field_rng.uniform(0, 2 * np.pi, size=(V, L, K))
    phase[:, :, 0] = 0.0
    patterns = np.cos(2 * np.pi * (waves[..., 0, None, None] * yy + waves[..., 1, None, None] * xx)
                      + phase[..., None, None])  # [V, L, K, h, w]

    # temporal amplitudes: two sinusoids per mode, frequencies in rad per 6-hour slot
    t = np.arange(spec.days * S, dtype=np.float64)
    freq = field_rng.uniform(0.05, 0.8, size=(2, V, L, K))
    tphase = field_rng.uniform(0, 2 * np.pi, size=(2, V, L, K))
    amp = field_rng.uniform(0.5, 1.0, size=(2, V, L, K)) / np.sqrt(K)
    coeff = sum(amp[j] * np.sin(freq[j] * t[:, None, None, None] + tphase[j]) for j in range(2))  # [T, V, L, K]
    fields = np.einsum("tvlk,vlkyx->tvlyx", coeff, patterns)
    if k["vertical_scale_hpa"] > 0 and L > 1:
        p = np.asarray(levels)
        corr = np.exp(-np.abs(p[:, None] - p[None, :]) / k["vertical_scale_hpa"])
        fields = np.einsum("lm,tvmyx->tvlyx", np.linalg.cholesky(corr), fields)
    fields += k["field_noise"] * field_rng.standard_normal(fields.shape)
    stack = fields.reshape(spec.days, S, V, L, h, w).astype(dtype_of(spec.precision))

    z = synthetic_signal(stack, variables, levels, k)
    if spec.noise_std > 0:
        z = z + spec.noise_std * noise_rng.standard_normal(spec.days)
    targets = (k["scale_mm"] * np.logaddexp(0.0, z)).astype(stack.dtype)
    return AtmosDataset(stack, targets, spec.start_date, variables, levels, list(SLOTS))
