"""Glue between a dataset on disk and model-ready arrays for each period."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Sequence, Tuple, Union

import numpy as np

from .channelizer import (InputBatch, TimeSelector, build_inputs, input_shape, level_indices, make_windows,
                          num_channels, resolve_levels)
from .dataio import AtmosDataset, ChannelStats, SplitSpec, compute_stats, scaled_split, split, standardize, \
    standardize_targets
from .network import Variant
from .tensor import dtype_of

PERIODS = ("train", "validation", "test")


def resolve_split(ds: AtmosDataset, mode: Union[str, SplitSpec] = "auto") -> Tuple[SplitSpec, str]:
    """``calendar`` (1980-2005 / 2006-2010 / 2011-2015), ``scaled`` (26:5:5 of the record) or ``auto``."""
    if isinstance(mode, SplitSpec):
        return mode, "explicit"
    fixed = SplitSpec()
    if mode == "calendar":
        return fixed, "calendar"
    if mode == "scaled":
        return scaled_split(ds), "scaled"
    if mode == "auto":
        covered = ds.start_date <= fixed.train[0] and ds.end_date >= fixed.test[1]
        return (fixed, "calendar") if covered else (scaled_split(ds), "scaled")
    raise ValueError(f"unknown split mode {mode!r}")


@dataclass
class Prepared:
    variant: Variant
    selector: TimeSelector
    levels: Tuple[float, ...]
    split: SplitSpec
    ranges: Dict[str, Tuple[int, int]]
    stats: ChannelStats
    batches: Dict[str, InputBatch]  # inputs standardized; targets in mm
    input_shape: Tuple[int, ...]
    n_channels: int

    def xy(self, period: str, precision: str = "f64"):
        """(inputs, standardized targets) for one period."""
        b = self.batches[period]
        dtype = dtype_of(precision)
        return b.inputs.astype(dtype, copy=False), standardize_targets(b.targets, self.stats).astype(dtype)


def prepare(ds: AtmosDataset, variant, selector, levels: Union[str, Sequence[float]],
            split_spec: SplitSpec, stats: ChannelStats | None = None) -> Prepared:
    """Split, standardize (training statistics unless ``stats`` is given), window and channelize."""
    variant = Variant(variant)
    selector = TimeSelector(selector)
    levels = resolve_levels(levels)
    idx = level_indices(ds.levels, levels)
    ranges = split(ds, split_spec)
    if stats is None:
        stats = compute_stats(ds, ranges["train"])
    z = standardize(ds.stack, stats)
    batches = {}
    for period in PERIODS:
        try:
            windows = make_windows(ds, selector, ranges[period])
        except ValueError as exc:
            raise ValueError(f"{period} period: {exc}") from exc
        batches[period] = build_inputs(z, ds.targets, windows, variant, idx)
    V, L, T = len(ds.variables), len(levels), selector.steps
    H, W = ds.grid
    return Prepared(variant, selector, levels, split_spec, ranges, stats, batches,
                    input_shape(variant, V, L, T, H, W), num_channels(variant, V, L, T))
