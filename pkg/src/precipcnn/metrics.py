"""Evaluation metrics (RMSE, NSE, peak RMSE) and comparison tables."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

PERIOD_TITLES = {"train": "Training", "validation": "Validation", "test": "Test"}
METRIC_NAMES = ("rmse", "nse", "rmse99")
METRIC_TITLES = {"rmse": "RMSE", "nse": "NSE", "rmse99": "RMSE99"}


def _pair(pred, obs) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    obs = np.asarray(obs, dtype=np.float64).ravel()
    if pred.shape != obs.shape:
        raise ValueError(f"length mismatch: {pred.size} predictions vs {obs.size} observations")
    if pred.size == 0:
        raise ValueError("empty series")
    return pred, obs


def rmse(pred, obs) -> float:
    pred, obs = _pair(pred, obs)
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


def nse(pred, obs) -> float:
    """Nash-Sutcliffe efficiency; undefined (ValueError) for constant observations."""
    pred, obs = _pair(pred, obs)
    denom = np.sum((obs - obs.mean()) ** 2)
    if denom == 0:
        raise ValueError("NSE is undefined for constant observations")
    return float(1.0 - np.sum((obs - pred) ** 2) / denom)


def percentile(values, q: float) -> float:
    """Linear-interpolation quantile: h = (n-1)q between sorted neighbours."""
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if x.size == 0:
        raise ValueError("percentile of an empty series")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    h = (x.size - 1) * q
    lo = int(math.floor(h))
    if lo >= x.size - 1:
        return float(x[-1])
    return float(x[lo] + (h - lo) * (x[lo + 1] - x[lo]))


def rmse99(pred, obs, q: float = 0.99) -> Tuple[float, float, int]:
    """RMSE over the days whose observation is at or above the q-quantile.

    Returns (rmse over that subset, threshold, subset size).
    """
    pred, obs = _pair(pred, obs)
    threshold = percentile(obs, q)
    peak = obs >= threshold
    n = int(peak.sum())
    if n == 0:
        raise ValueError("no observation reaches the percentile threshold")
    return rmse(pred[peak], obs[peak]), threshold, n


@dataclass
class PeriodMetrics:
    rmse: float
    nse: float
    rmse99: float
    p99_threshold: float
    n_samples: int
    n_peak_samples: int

    @classmethod
    def compute(cls, pred, obs, q: float = 0.99) -> "PeriodMetrics":
        r99, thr, n_peak = rmse99(pred, obs, q)
        return cls(rmse(pred, obs), nse(pred, obs), r99, thr, len(np.ravel(obs)), n_peak)


@dataclass
class EvalReport:
    case: str
    periods: Dict[str, PeriodMetrics]
    meta: dict = field(default_factory=dict)

    def cells(self) -> List[float]:
        return [getattr(self.periods[p], m) for p in PERIOD_TITLES for m in METRIC_NAMES]

    def to_dict(self) -> dict:
        return {"case": self.case, "periods": {k: asdict(v) for k, v in self.periods.items()}, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["case"], {k: PeriodMetrics(**v) for k, v in d["periods"].items()}, d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def format_sig(x: float, digits: int = 3) -> str:
    """Three significant figures, keeping trailing zeros (9.90, 0.720, 105)."""
    if not math.isfinite(x):
        return str(x)
    if x == 0:
        return "0"
    if abs(x) >= 10 ** digits:
        return str(int(round(x)))
    s = f"{x:#.{digits}g}"
    if "e" in s:
        return str(int(round(x))) if abs(x) >= 1 else f"{x:.{digits - 1}e}"
    return s.rstrip(".")


def render_comparison(reports: Sequence[Tuple[str, EvalReport]], fmt: str = "markdown") -> str:
    """One row per case, columns period x (RMSE, NSE, RMSE99)."""
    if not reports:
        raise ValueError("need at least one report")
    keys = [(p, m) for p in PERIOD_TITLES for m in METRIC_NAMES]
    rows = [[label] + [format_sig(getattr(rep.periods[p], m)) for p, m in keys] for label, rep in reports]
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["case"] + [f"{p}_{m}" for p, m in keys])
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        head = ["Case"] + [f"{PERIOD_TITLES[p]} {METRIC_TITLES[m]}" for p, m in keys]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {fmt!r}")


def predict_periods(checkpoint_dir, dataset, split_spec=None) -> Tuple[dict, Dict[str, dict]]:
    """Inference-mode predictions (mm) per period for a saved checkpoint.

    Returns (checkpoint header, {period: {"days", "obs", "pred", "pred_std",
    "target_std"}}). The split and channel layout recorded in the checkpoint
    are used unless ``split_spec`` is given.
    """
    from .dataio import ChannelStats, SplitSpec, unstandardize_targets
    from .experiment import PERIODS, prepare
    from .network import load_checkpoint

    net, extra, header = load_checkpoint(checkpoint_dir)
    meta = header["meta"]
    spec = split_spec or SplitSpec.from_dict(meta["split"])
    stats = ChannelStats.from_arrays(extra)
    prep = prepare(dataset, meta["variant"], meta["timesteps"], meta["levels"], spec, stats=stats)
    if prep.n_channels != meta["n_channels"] or tuple(prep.input_shape) != net.input_shape:
        raise ValueError(
            f"checkpoint expects input {net.input_shape} (NC {meta['n_channels']}), "
            f"dataset/layout gives {prep.input_shape} (NC {prep.n_channels})"
        )
    out = {}
    for period in PERIODS:
        x, y_std = prep.xy(period, net.config.precision)
        pred_std = net.predict(x)
        out[period] = {
            "days": prep.batches[period].days,
            "obs": np.asarray(prep.batches[period].targets, dtype=np.float64),
            "pred": unstandardize_targets(pred_std, stats),
            "pred_std": pred_std,
            "target_std": y_std,
        }
    return header, out


def evaluate(checkpoint_dir, dataset, split_spec=None, case: Optional[str] = None, clamp: bool = False,
             q: float = 0.99) -> EvalReport:
    """Metrics for train/validation/test with predictions un-standardized to mm.

    ``clamp`` sets negative predictions to zero before scoring.
    """
    header, preds = predict_periods(checkpoint_dir, dataset, split_spec)
    periods = {}
    for period, d in preds.items():
        pred = np.maximum(d["pred"], 0.0) if clamp else d["pred"]
        periods[period] = PeriodMetrics.compute(pred, d["obs"], q)
    meta = header["meta"]
    meta_out = {k: meta.get(k) for k in ("variant", "timesteps", "levels", "n_channels", "split", "seed")}
    meta_out["clamp"] = clamp
    return EvalReport(case or meta.get("case", "case"), periods, meta_out)
