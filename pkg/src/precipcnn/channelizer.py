"""Turn (variable, level, time, lat, lon) samples into per-variant CNN inputs.

Layouts, with channel order the row-major linearization of the listed tuple:

    2d       [V*L*T, H, W]      channel = (variable, level, time)
    3d-time  [V*L, T, H, W]     channel = (variable, level), depth = time
    3d-vert  [V*T, L, H, W]     channel = (variable, time),  depth = level
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataio import AtmosDataset
from .network import Variant

LEVEL_PRESETS = {
    "v1": (500.0, 700.0, 850.0, 925.0, 1000.0),
    "v2": (300.0, 500.0, 700.0, 850.0, 925.0, 1000.0),
    "v3": (200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 750.0, 800.0, 850.0, 900.0, 950.0, 1000.0),
}


class TimeSelector(str, enum.Enum):
    """Sub-daily slots used per day; slot indices are 0=03:00, 1=09:00, 2=15:00, 3=21:00."""

    TS2 = "ts2"
    TS4 = "ts4"
    TS6 = "ts6"

    @property
    def offsets(self) -> Tuple[Tuple[int, int], ...]:
        """(day offset, slot) pairs in chronological order."""
        return {
            "ts2": ((0, 0), (0, 2)),
            "ts4": ((0, 0), (0, 1), (0, 2), (0, 3)),
            "ts6": ((-1, 3), (0, 0), (0, 1), (0, 2), (0, 3), (1, 0)),
        }[self.value]

    @property
    def steps(self) -> int:
        return len(self.offsets)


def resolve_levels(levels: Union[str, Sequence[float]]) -> Tuple[float, ...]:
    """Preset name ("v1"/"v2"/"v3"), comma-separated string, or explicit list -> strictly increasing hPa."""
    if isinstance(levels, str):
        key = levels.lower()
        if key in LEVEL_PRESETS:
            return LEVEL_PRESETS[key]
        levels = [float(v) for v in levels.split(",") if v.strip()]
    out = tuple(float(v) for v in levels)
    if not out:
        raise ValueError("level set is empty")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"pressure levels must be strictly increasing, got {out}")
    return out


def num_channels(variant, V: int, L: int, T: int) -> int:
    variant = Variant(variant)
    if min(V, L, T) < 1:
        raise ValueError("V, L and T must be >= 1")
    if variant is Variant.CNN2D:
        return V * L * T
    if variant is Variant.CNN3D_TIME:
        return V * L
    return V * T


def input_shape(variant, V: int, L: int, T: int, H: int, W: int) -> Tuple[int, ...]:
    variant = Variant(variant)
    if variant is Variant.CNN2D:
        return (V * L * T, H, W)
    if variant is Variant.CNN3D_TIME:
        return (V * L, T, H, W)
    return (V * T, L, H, W)


def channelize(sample: np.ndarray, variant, dims: Optional[Tuple[int, int, int]] = None) -> np.ndarray:
    """Rearrange ``[..., V, L, T, H, W]`` into the variant's layout (leading axes kept)."""
    sample = np.asarray(sample)
    if sample.ndim < 5:
        raise ValueError(f"sample must be [..., V, L, T, H, W], got shape {sample.shape}")
    lead = sample.shape[:-5]
    V, L, T, H, W = sample.shape[-5:]
    if dims is not None and tuple(dims) != (V, L, T):
        raise ValueError(f"sample has (V, L, T) = {(V, L, T)}, expected {tuple(dims)}")
    variant = Variant(variant)
    if variant is Variant.CNN3D_VERT:
        k = len(lead)
        sample = np.moveaxis(sample, k + 2, k + 1)  # [..., V, T, L, H, W]
    return np.ascontiguousarray(sample).reshape(lead + input_shape(variant, V, L, T, H, W))


@dataclass(frozen=True)
class SampleWindow:
    day: int
    selector: TimeSelector
    slots: Tuple[Tuple[int, int], ...]  # absolute (day, slot) pairs


def make_windows(n_days: Union[int, AtmosDataset], selector, day_range: Optional[Tuple[int, int]] = None,
                 slots_per_day: int = 4) -> List[SampleWindow]:
    """One window per eligible day of ``day_range`` (half-open, default the whole record).

    A day is eligible when every slot it needs lies inside the range, so TS6
    drops the first and last day and never reaches across a split boundary.
    """
    if isinstance(n_days, AtmosDataset):
        slots_per_day = n_days.stack.shape[1]
        n_days = n_days.days
    if slots_per_day != 4:
        raise ValueError(f"windowing needs 4 sub-daily slots, dataset has {slots_per_day}")
    selector = TimeSelector(selector)
    start, stop = day_range if day_range is not None else (0, n_days)
    if not 0 <= start <= stop <= n_days:
        raise ValueError(f"day range {(start, stop)} outside record of {n_days} days")
    lo = min(o for o, _ in selector.offsets)
    hi = max(o for o, _ in selector.offsets)
    windows = [
        SampleWindow(d, selector, tuple((d + o, s) for o, s in selector.offsets))
        for d in range(start - lo, stop - hi)
    ]
    if not windows:
        raise ValueError(
            f"no day in range {(start, stop)} has the neighbours required by {selector.value}"
        )
    return windows


@dataclass
class InputBatch:
    inputs: np.ndarray
    targets: np.ndarray
    days: np.ndarray
    variant: Variant
    layout: str

    def __len__(self):
        return len(self.targets)


LAYOUTS = {
    Variant.CNN2D: "N, C=(variable, level, time), lat, lon",
    Variant.CNN3D_TIME: "N, C=(variable, level), time, lat, lon",
    Variant.CNN3D_VERT: "N, C=(variable, time), level, lat, lon",
}


def level_indices(dataset_levels: Sequence[float], wanted: Sequence[float]) -> List[int]:
    lookup = {float(v): i for i, v in enumerate(dataset_levels)}
    missing = [v for v in wanted if float(v) not in lookup]
    if missing:
        raise ValueError(f"levels {missing} not present in dataset levels {list(dataset_levels)}")
    return [lookup[float(v)] for v in wanted]


def build_inputs(stack: np.ndarray, targets: np.ndarray, windows: Sequence[SampleWindow], variant,
                 levels: Optional[Sequence[int]] = None) -> InputBatch:
    """Gather windows from a [D, S, V, L, H, W] stack and channelize them.

    ``levels`` are indices into the stack's level axis (default: all).
    """
    variant = Variant(variant)
    day_idx = np.array([[d for d, _ in w.slots] for w in windows])
    slot_idx = np.array([[s for _, s in w.slots] for w in windows])
    raw = stack[day_idx, slot_idx]  # [N, T, V, L, H, W]
    if levels is not None:
        raw = raw[:, :, :, list(levels)]
    raw = np.moveaxis(raw, 1, 3)  # [N, V, L, T, H, W]
    days = np.array([w.day for w in windows])
    return InputBatch(channelize(raw, variant), np.asarray(targets)[days], days, variant, LAYOUTS[variant])
