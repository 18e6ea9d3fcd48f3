"""PSGD, BinaryConnect and two-phase BinaryRelax, plus the epoch loop.

All three keep a float trajectory ``y`` and a (pseudo-)quantized ``x``.
Gradients are always evaluated at ``x``. PSGD restarts its gradient step
from ``x``; BinaryConnect and BinaryRelax apply it to ``y`` (the hybrid
update). BinaryRelax sets ``x`` to the relaxed prox of ``y`` during phase
I and to the exact projection during phase II.
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .diagnostics import alpha_value
from .objectives import Dataset, GradientOracle
from .quantizer import QuantScheme, dist_to_q, project
from .relaxation import LambdaState, RelaxationSchedule, advance_lambda, relaxed_prox

log = logging.getLogger(__name__)


class Optimizer(str, enum.Enum):
    PSGD = "psgd"
    BINARYCONNECT = "binaryconnect"
    BINARYRELAX = "binaryrelax"
    FLOAT = "float"


class Phase(str, enum.Enum):
    RELAXED = "relaxed"
    EXACT = "exact"
    FLOAT = "float"


class TrainingError(RuntimeError):
    """A run hit a non-finite gradient or loss."""

    def __init__(self, message: str, iteration: int, records=None):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
        self.records = list(records or [])


MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> int:
    """One output of the splitmix64 generator seeded at ``state``."""
    z = (state + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(master: int, stream: int) -> int:
    """Independent 64-bit seed for ``stream`` under ``master``.

    Stream ``i`` takes the ``i``-th splitmix64 output starting from
    ``master``: ``splitmix64(master + i * 0x9E3779B97F4A7C15)``.
    """
    return splitmix64((master + stream * 0x9E3779B97F4A7C15) & MASK64)


STREAM_INIT = 1
STREAM_SHUFFLE = 2


@dataclass(frozen=True)
class LearningRateSchedule:
    """``step``: ``gamma0 * factor**(decays passed)``; ``inverse``: ``gamma0 / (k + 1)``."""

    gamma0: float = 0.1
    decay_epochs: tuple[int, ...] = (120, 220)
    decay_factor: float = 0.1
    kind: str = "step"

    def __post_init__(self) -> None:
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))

    def errors(self) -> list[str]:
        errs = []
        if not self.gamma0 > 0:
            errs.append(f"lr.gamma0 must be > 0, got {self.gamma0}")
        if self.kind not in ("step", "inverse"):
            errs.append(f"lr.kind must be 'step' or 'inverse', got {self.kind!r}")
        if list(self.decay_epochs) != sorted(self.decay_epochs):
            errs.append("lr.decay_epochs must be sorted")
        if not 0 < self.decay_factor < 1:
            errs.append(f"lr.decay_factor must lie in (0, 1), got {self.decay_factor}")
        return errs

    def at(self, epoch: int, k: int = 0) -> float:
        if self.kind == "inverse":
            return self.gamma0 / (k + 1)
        return lr_at(self, epoch)


def lr_at(schedule: LearningRateSchedule, epoch: float) -> float:
    """Piecewise-constant step size after ``epoch`` completed epochs."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    passed = sum(1 for e in schedule.decay_epochs if epoch >= e)
    return schedule.gamma0 * schedule.decay_factor ** passed


@dataclass
class OptimizerState:
    y: np.ndarray
    x: np.ndarray
    velocity: np.ndarray
    k: int = 0
    lambda_state: LambdaState | None = None
    phase: Phase = Phase.EXACT
    # True when x is the exact projection of y (needed for alpha_k).
    x_is_projection: bool = False


def init_state(y0, optimizer: Optimizer, scheme: QuantScheme | None,
               relax: RelaxationSchedule | None = None) -> OptimizerState:
    y0 = np.array(y0, dtype=np.float64)
    v0 = np.zeros_like(y0)
    optimizer = Optimizer(optimizer)
    if optimizer is Optimizer.FLOAT:
        return OptimizerState(y0, y0.copy(), v0, phase=Phase.FLOAT)
    if optimizer is Optimizer.BINARYRELAX:
        lam = relax.initial_state()
        if relax.phase2_epoch > 0:
            return OptimizerState(y0, relaxed_prox(y0, lam.lam, scheme), v0,
                                  lambda_state=lam, phase=Phase.RELAXED)
        return OptimizerState(y0, project(y0, scheme).materialized, v0,
                              lambda_state=lam, x_is_projection=True)
    return OptimizerState(y0, project(y0, scheme).materialized, v0, x_is_projection=True)


def _gradient(state: OptimizerState, oracle: GradientOracle, batch, base: np.ndarray,
              weight_decay: float) -> tuple[np.ndarray, np.ndarray]:
    g = oracle.stochastic_grad(state.x, batch)
    if not np.all(np.isfinite(g)):
        raise TrainingError("non-finite gradient", state.k)
    if weight_decay:
        return g, g + weight_decay * base
    return g, g


def _move(base: np.ndarray, velocity: np.ndarray, direction: np.ndarray, gamma: float,
          momentum: float) -> tuple[np.ndarray, np.ndarray]:
    if momentum:
        v = momentum * velocity - gamma * direction
        return base + v, v
    return base - gamma * direction, velocity


def psgd_step(state: OptimizerState, oracle: GradientOracle, batch, gamma: float,
              scheme: QuantScheme, *, momentum: float = 0.0,
              weight_decay: float = 0.0) -> OptimizerState:
    """``y <- x - gamma * grad f_k(x)``, ``x <- proj(y)``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    _, d = _gradient(state, oracle, batch, state.x, weight_decay)
    y, v = _move(state.x, state.velocity, d, gamma, momentum)
    return replace(state, y=y, x=project(y, scheme).materialized, velocity=v,
                   k=state.k + 1, x_is_projection=True)


def binaryconnect_step(state: OptimizerState, oracle: GradientOracle, batch, gamma: float,
                       scheme: QuantScheme, *, momentum: float = 0.0,
                       weight_decay: float = 0.0) -> OptimizerState:
    """``y <- y - gamma * grad f_k(x)``, ``x <- proj(y)``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    _, d = _gradient(state, oracle, batch, state.y, weight_decay)
    y, v = _move(state.y, state.velocity, d, gamma, momentum)
    return replace(state, y=y, x=project(y, scheme).materialized, velocity=v,
                   k=state.k + 1, x_is_projection=True)


def binaryrelax_step(state: OptimizerState, oracle: GradientOracle, batch, gamma: float,
                     scheme: QuantScheme, schedule: RelaxationSchedule, *,
                     epochs_delta: float = 0.0, momentum: float = 0.0,
                     weight_decay: float = 0.0) -> OptimizerState:
    """Hybrid ``y`` update, then relaxed prox (phase I) or projection (phase II).

    In phase I, ``lam`` is advanced by ``epochs_delta`` after the step.
    """
    if state.phase is Phase.EXACT:
        return binaryconnect_step(state, oracle, batch, gamma, scheme,
                                  momentum=momentum, weight_decay=weight_decay)
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    _, d = _gradient(state, oracle, batch, state.y, weight_decay)
    y, v = _move(state.y, state.velocity, d, gamma, momentum)
    lam = state.lambda_state
    x = relaxed_prox(y, lam.lam, scheme)
    return replace(state, y=y, x=x, velocity=v, k=state.k + 1,
                   lambda_state=advance_lambda(schedule, lam, epochs_delta),
                   x_is_projection=False)


def sgd_step(state: OptimizerState, oracle: GradientOracle, batch, gamma: float, *,
             momentum: float = 0.0, weight_decay: float = 0.0) -> OptimizerState:
    """Unconstrained float baseline; ``x`` tracks ``y``."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    _, d = _gradient(state, oracle, batch, state.y, weight_decay)
    y, v = _move(state.y, state.velocity, d, gamma, momentum)
    return replace(state, y=y, x=y.copy(), velocity=v, k=state.k + 1)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: Optimizer = Optimizer.BINARYRELAX
    epochs: int = 60
    batch_size: int = 32
    lr: LearningRateSchedule = field(default_factory=LearningRateSchedule)
    relax: RelaxationSchedule | None = None
    scheme: QuantScheme | None = None
    momentum: float = 0.0
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))

    def errors(self, num_samples: int | None = None) -> list[str]:
        errs = list(self.lr.errors())
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        elif num_samples is not None and self.batch_size > num_samples:
            errs.append(f"batch_size {self.batch_size} exceeds the {num_samples} training samples")
        if not 0 <= self.momentum < 1:
            errs.append(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if self.optimizer is not Optimizer.FLOAT and self.scheme is None:
            errs.append(f"optimizer {self.optimizer.value} needs a quantization scheme")
        if self.optimizer is Optimizer.BINARYRELAX:
            if self.relax is None:
                errs.append("optimizer binaryrelax needs a relaxation schedule")
            else:
                errs.extend(self.relax.errors())
        return errs


@dataclass
class MetricsRecord:
    epoch: int
    iter: int
    phase: str
    lam: float
    gamma: float
    train_loss: float
    val_loss: float
    val_acc: float
    dist_to_q: float
    alpha_mean: float
    alpha_min: float
    alpha_undef_count: int
    stationarity_proxy: float


@dataclass
class StepInfo:
    """Everything about one iteration, handed to ``on_step`` callbacks."""

    k: int
    epoch: int
    phase: Phase
    gamma: float
    lam: float | None
    y_prev: np.ndarray
    x_prev: np.ndarray
    y: np.ndarray
    x: np.ndarray
    x_prev_is_projection: bool
    alpha: float | None


@dataclass
class TrainingResult:
    records: list[MetricsRecord]
    state: OptimizerState
    sigma2: float
    alpha_min: float
    alpha_max: float
    alpha_undefined: int
    wall_time: float
    switch_lambda: float | None = None

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def _batches(rng: np.random.Generator, n: int, size: int) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [np.sort(perm[i:i + size]) for i in range(0, n, size)]


def gradient_variance(oracle: GradientOracle, x, batch_size: int,
                      rng: np.random.Generator) -> float:
    """Mean of ``||grad_B(x) - grad(x)||^2`` over one random partition into batches."""
    full = oracle.grad(x)
    if batch_size >= oracle.num_samples:
        return 0.0
    batches = _batches(rng, oracle.num_samples, batch_size)
    return float(np.mean([np.sum((oracle.stochastic_grad(x, b) - full) ** 2) for b in batches]))


def phase_for_epoch(optimizer: Optimizer, relax: RelaxationSchedule | None, epoch: int) -> Phase:
    """Phase of 0-based ``epoch``: relaxed while ``epoch < phase2_epoch``."""
    if optimizer is Optimizer.FLOAT:
        return Phase.FLOAT
    if optimizer is Optimizer.BINARYRELAX and epoch < relax.phase2_epoch:
        return Phase.RELAXED
    return Phase.EXACT


def run_training(config: TrainConfig, oracle: GradientOracle, val: Dataset | None = None, *,
                 init=None, on_step: Callable[[StepInfo], None] | None = None,
                 per_iteration: bool = False) -> TrainingResult:
    """Run the epoch loop and return one ``MetricsRecord`` per epoch.

    With ``per_iteration`` a record is also emitted after every step (the
    ``epoch`` field then holds the epoch in progress). The run is a pure
    function of ``(config, oracle, val, init)``.
    """
    errs = config.errors(oracle.num_samples)
    if errs:
        raise ValueError("; ".join(errs))
    opt = config.optimizer
    scheme = config.scheme.with_groups(oracle.groups) if config.scheme is not None else None
    relax = config.relax
    if opt is Optimizer.BINARYRELAX:
        warning = relax.window_warning()
        if warning:
            log.warning(warning)

    init_rng = np.random.default_rng(derive_seed(config.seed, STREAM_INIT))
    shuffle_rng = np.random.default_rng(derive_seed(config.seed, STREAM_SHUFFLE))
    y0 = oracle.init_params(init_rng) if init is None else np.array(init, dtype=np.float64)
    state = init_state(y0, opt, scheme, relax)

    records: list[MetricsRecord] = []
    alphas_all: list[float] = []
    undefined_all = 0
    switch_lambda = None
    start = time.perf_counter()
    n_batches = math.ceil(oracle.num_samples / config.batch_size)
    for epoch in range(config.epochs):
        phase = phase_for_epoch(opt, relax, epoch)
        if phase is not state.phase:
            if state.phase is Phase.EXACT:
                raise AssertionError("phase may only go from relaxed to exact")
            switch_lambda = state.lambda_state.lam
            state = replace(state, phase=phase)
        epoch_alphas: list[float] = []
        undefined = 0
        proxies: list[float] = []
        gamma = config.lr.at(epoch, state.k)
        for j, batch in enumerate(_batches(shuffle_rng, oracle.num_samples, config.batch_size)):
            gamma = config.lr.at(epoch, state.k)
            prev = state
            if opt is Optimizer.PSGD:
                state = psgd_step(state, oracle, batch, gamma, scheme,
                                  momentum=config.momentum, weight_decay=config.weight_decay)
            elif opt is Optimizer.BINARYCONNECT:
                state = binaryconnect_step(state, oracle, batch, gamma, scheme,
                                           momentum=config.momentum,
                                           weight_decay=config.weight_decay)
            elif opt is Optimizer.BINARYRELAX:
                delta = (epoch + (j + 1) / n_batches) - prev.lambda_state.epochs_elapsed
                state = binaryrelax_step(state, oracle, batch, gamma, scheme, relax,
                                         epochs_delta=delta if phase is Phase.RELAXED else 0.0,
                                         momentum=config.momentum,
                                         weight_decay=config.weight_decay)
            else:
                state = sgd_step(state, oracle, batch, gamma, momentum=config.momentum,
                                 weight_decay=config.weight_decay)

            if not np.all(np.isfinite(state.y)):
                raise TrainingError("non-finite parameters", state.k, records)
            step = state.x - prev.x
            step_sq = float(step @ step)
            proxies.append(step_sq / (gamma * gamma))
            alpha = None
            if prev.x_is_projection and state.x_is_projection:
                alpha = alpha_value(prev.y, prev.x, state.x)
                if alpha is None:
                    undefined += 1
                else:
                    epoch_alphas.append(alpha)
            if on_step is not None:
                on_step(StepInfo(prev.k, epoch, phase, gamma,
                                 None if prev.lambda_state is None else prev.lambda_state.lam,
                                 prev.y, prev.x, state.y, state.x, prev.x_is_projection, alpha))
            if per_iteration:
                records.append(_record(epoch + 1, state, phase, gamma, oracle, val, scheme,
                                       opt, [] if alpha is None else [alpha],
                                       int(alpha is None and prev.x_is_projection
                                           and state.x_is_projection),
                                       [proxies[-1]], records))

        alphas_all.extend(epoch_alphas)
        undefined_all += undefined
        records.append(_record(epoch + 1, state, phase, gamma, oracle, val, scheme, opt,
                               epoch_alphas, undefined, proxies, records))

    sigma2 = gradient_variance(oracle, state.x, config.batch_size,
                               np.random.default_rng(derive_seed(config.seed, STREAM_SHUFFLE + 1)))
    return TrainingResult(
        records=records,
        state=state,
        sigma2=sigma2,
        alpha_min=min(alphas_all) if alphas_all else math.nan,
        alpha_max=max(alphas_all) if alphas_all else math.nan,
        alpha_undefined=undefined_all,
        wall_time=time.perf_counter() - start,
        switch_lambda=switch_lambda,
    )


def _lambda_column(opt: Optimizer, state: OptimizerState) -> float:
    if opt is Optimizer.BINARYRELAX:
        return state.lambda_state.lam
    if opt is Optimizer.FLOAT:
        return 0.0
    return math.inf


def _record(epoch, state, phase, gamma, oracle, val, scheme, opt, alphas, undefined,
            proxies, records) -> MetricsRecord:
    train_loss = oracle.full_loss(state.x)
    if not math.isfinite(train_loss):
        raise TrainingError("non-finite training loss", state.k, records)
    if val is not None and oracle.classification:
        val_loss = oracle.full_loss(state.x, val)
        val_acc = oracle.accuracy(state.x, val)
    else:
        val_loss = val_acc = math.nan
    dist = dist_to_q(state.x, scheme) if scheme is not None else math.nan
    return MetricsRecord(
        epoch=epoch,
        iter=state.k,
        phase=phase.value,
        lam=_lambda_column(opt, state),
        gamma=gamma,
        train_loss=train_loss,
        val_loss=val_loss,
        val_acc=val_acc,
        dist_to_q=dist,
        alpha_mean=float(np.mean(alphas)) if alphas else math.nan,
        alpha_min=float(np.min(alphas)) if alphas else math.nan,
        alpha_undef_count=undefined,
        stationarity_proxy=float(np.mean(proxies)) if proxies else math.nan,
    )
