"""Training protocol: MSE loss, Adam, shuffled mini-batches, early stopping and best-of-N restarts."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .layers import mse_loss
from .network import Network

log = logging.getLogger(__name__)

Data = Tuple[np.ndarray, np.ndarray]


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 512
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    patience_epochs: int = 40
    max_epochs: int = 1000
    restarts: int = 200
    base_seed: int = 0
    # stop as soon as the validation loss reaches this value (None: never)
    target_loss: Optional[float] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization needs two samples)")
        if self.patience_epochs < 1:
            raise ValueError("patience_epochs must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              config: TrainConfig) -> None:
    """One in-place Adam update with bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)


def shuffle_batches(n_samples: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Seeded permutation cut into batches; a final batch of one sample is dropped."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    perm = rng.permutation(n_samples)
    batches = [perm[i:i + batch_size] for i in range(0, n_samples, batch_size)]
    if len(batches[-1]) < 2:
        batches.pop()
    return batches


@dataclass
class RunResult:
    seed: Optional[int]
    best_val_loss: float
    best_epoch: int
    snapshot: Dict[str, np.ndarray]
    train_curve: List[float]
    val_curve: List[float]
    epochs_run: int
    failed: bool = False
    failure: str = ""
    wall_time: float = 0.0

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "best_val_loss": self.best_val_loss,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "failed": self.failed,
            "failure": self.failure,
            "wall_time_s": round(self.wall_time, 3),
        }


def evaluate_loss(net: Network, data: Data, batch_size: int = 1024) -> float:
    x, y = data
    pred = net.predict(x, batch_size=batch_size)
    loss, _ = mse_loss(pred, np.asarray(y, dtype=pred.dtype))
    return loss


def fit(net: Network, train: Data, val: Data, config: TrainConfig, rng: np.random.Generator,
        val_loss_fn: Optional[Callable[[Network], float]] = None) -> RunResult:
    """Train until the validation loss has not improved for more than ``patience_epochs`` epochs.

    ``val_loss_fn`` replaces the default inference-mode validation MSE; tests
    use it to script loss sequences. The returned snapshot holds the
    parameters and running statistics from the best epoch.
    """
    x_train, y_train = train
    if len(x_train) < 2 or len(val[0]) < 1:
        raise ValueError("training needs >= 2 samples and a non-empty validation split")
    y_train = np.asarray(y_train, dtype=np.float64)
    if val_loss_fn is None:
        val_loss_fn = lambda model: evaluate_loss(model, val)
    state = AdamState()
    best = RunResult(net.seed, math.inf, -1, net.state(), [], [], 0)
    t0 = time.perf_counter()
    for epoch in range(config.max_epochs):
        total, count = 0.0, 0
        try:
            for idx in shuffle_batches(len(x_train), config.batch_size, rng):
                pred = net.forward(x_train[idx], training=True)
                loss, grad = mse_loss(pred, y_train[idx].astype(pred.dtype))
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
                net.backward(grad)
                adam_step(net.params, net.grads, state, config)
                total += loss * len(idx)
                count += len(idx)
            val_loss = float(val_loss_fn(net))
            if not math.isfinite(val_loss):
                raise FloatingPointError(f"non-finite validation loss at epoch {epoch}")
        except FloatingPointError as exc:
            best.failed, best.failure = True, str(exc)
            best.epochs_run = epoch + 1
            log.warning("run seed=%s failed: %s", net.seed, exc)
            break
        best.train_curve.append(total / count)
        best.val_curve.append(val_loss)
        best.epochs_run = epoch + 1
        if val_loss < best.best_val_loss:
            best.best_val_loss, best.best_epoch = val_loss, epoch
            best.snapshot = net.state()
        log.debug("epoch %d train %.6g val %.6g", epoch, best.train_curve[-1], val_loss)
        if config.target_loss is not None and val_loss <= config.target_loss:
            break
        if epoch - best.best_epoch > config.patience_epochs:
            break
    best.wall_time = time.perf_counter() - t0
    return best


def restart_seeds(config: TrainConfig) -> List[int]:
    return [config.base_seed + i for i in range(config.restarts)]


def run_restart(net_builder: Callable[[np.random.Generator], Network], train: Data, val: Data,
                config: TrainConfig, seed: int, fit_fn=fit) -> RunResult:
    """One restart: weights and batch order both derive from ``seed``."""
    init_ss, shuffle_ss = np.random.SeedSequence(seed).spawn(2)
    net = net_builder(np.random.default_rng(init_ss))
    net.seed = seed
    result = fit_fn(net, train, val, config, np.random.default_rng(shuffle_ss))
    result.seed = seed
    return result


def select_best(results: Sequence[RunResult]) -> RunResult:
    """Lowest best_val_loss among non-failed runs; ties go to the smaller seed."""
    ok = [r for r in results if not r.failed and math.isfinite(r.best_val_loss)]
    if not ok:
        raise TrainingError(f"all {len(results)} restarts failed")
    return min(ok, key=lambda r: (r.best_val_loss, r.seed))


def multi_restart_fit(net_builder, train: Data, val: Data, config: TrainConfig, jobs: int = 1,
                      fit_fn=fit) -> Tuple[RunResult, List[RunResult]]:
    """Run ``config.restarts`` independent fits (seeds base_seed + i) and keep the best.

    With ``jobs > 1`` restarts run in worker processes; ``net_builder`` and
    ``fit_fn`` must then be picklable. Results come back ordered by seed.
    """
    seeds = restart_seeds(config)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_restart, net_builder, train, val, config, s, fit_fn) for s in seeds]
            results = [f.result() for f in futures]
    else:
        results = []
        for s in seeds:
            r = run_restart(net_builder, train, val, config, s, fit_fn)
            log.info("restart seed=%d best_val_loss=%.6g best_epoch=%d epochs=%d", s, r.best_val_loss,
                     r.best_epoch, r.epochs_run)
            results.append(r)
    results.sort(key=lambda r: r.seed)
    return select_best(results), results
