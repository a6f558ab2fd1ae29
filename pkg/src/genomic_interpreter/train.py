"""Poisson regression training with Adam and cosine annealing."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng, Tape, Tensor
from .errors import ConfigError, ContractError, NumericalError
from .metrics import evaluate
from .model import InterpreterConfig, InterpreterParams, build, forward

logger = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "train_loss", "val_overall_pearson")


class DomainError(NumericalError):
    pass


class DivergenceError(NumericalError):
    """Training produced a non-finite loss; ``last_good`` holds the parameters before that step."""

    def __init__(self, message, last_good=None, log=None):
        super().__init__(message)
        self.last_good = last_good
        self.log = log or []


def poisson_nll(pred: Tensor, target) -> Tensor:
    """mean(pred - target * log(pred)); the log(target!) constant is dropped."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise ContractError(f"prediction {pred.shape} vs target {target.shape}")
    if not (pred.data > 0).all():
        raise DomainError("Poisson loss needs strictly positive predictions")
    return ad.mean(pred - ad.log(pred) * Tensor(target))


@dataclass
class LrSchedule:
    base_lr: float = 3e-4
    t_max: int = 1000
    eta_min: float = 0.0

    def __post_init__(self):
        if self.t_max <= 0:
            raise ConfigError(f"T_max must be positive, got {self.t_max}")


def cosine_lr(step: int, sched: LrSchedule) -> float:
    if sched.t_max <= 0:
        raise ConfigError(f"T_max must be positive, got {sched.t_max}")
    s = min(max(step, 0), sched.t_max)
    return sched.eta_min + (sched.base_lr - sched.eta_min) * (1 + math.cos(math.pi * s / sched.t_max)) / 2


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            bad = np.argwhere(~np.isfinite(g))[0]
            raise NumericalError(f"non-finite gradient in {name} at {tuple(bad)}; step aborted")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ContractError(f"gradient {g.shape} vs parameter {name} {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = Tensor(p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps), requires_grad=True)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t, b1, b2, state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm <= 0 or total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


@dataclass
class TrainHyper:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 3e-4
    t_max: int | None = None
    eta_min: float = 0.0
    clip: float = 1.0
    eval_every: int = 0
    init_seed: int | None = None

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.t_max or max(self.steps, 1), self.eta_min)


@dataclass
class TrainResult:
    params: InterpreterParams
    best_params: InterpreterParams
    best_val: float | None
    log: list[tuple]


def batch_order(count: int, batch_size: int, steps: int, seed: int):
    """Yield index batches from successive seeded permutations (epoch-wise shuffling)."""
    rng = Rng(seed, stream=0xBA7C)
    pool: list[int] = []
    for _ in range(steps):
        while len(pool) < batch_size:
            pool.extend(int(i) for i in rng.permutation(count))
        yield np.array(pool[:batch_size])
        del pool[:batch_size]


def loss_and_grads(params: InterpreterParams, config: InterpreterConfig, x: np.ndarray, y: np.ndarray):
    flat = params.flat()
    with Tape():
        pred, _ = forward(Tensor(x, dtype=flat["embed.w"].dtype), params, config)
        loss = poisson_nll(pred, y)
    grads = ad.backward(loss)
    return loss.item(), {name: grads.get(t, np.zeros_like(t.data)) for name, t in flat.items()}


def train_loop(
    config: InterpreterConfig,
    ds_train,
    ds_val=None,
    hyper: TrainHyper | None = None,
    seed: int = 0,
    params: InterpreterParams | None = None,
) -> TrainResult:
    """Mini-batch Adam on the Poisson loss; fully determined by ``seed``.

    Log rows are ``(step, lr, train_loss, val_overall_pearson)`` with the
    validation entry None except every ``eval_every`` steps (and the last
    step) when validation data is given.
    """
    hyper = hyper or TrainHyper()
    if ds_train.count == 0 and hyper.steps > 0:
        raise ContractError("training set is empty")
    if (ds_train.n, ds_train.m, ds_train.tracks) != (config.n, config.m, config.tracks):
        raise ConfigError(
            f"data (n={ds_train.n}, m={ds_train.m}, T={ds_train.tracks}) incompatible with model "
            f"(n={config.n}, m={config.m}, T={config.tracks})"
        )
    if params is None:
        params = build(config, seed if hyper.init_seed is None else hyper.init_seed)
    sched = hyper.schedule()
    state = AdamState()
    best, best_val = params, None
    log: list[tuple] = []
    for step, idx in enumerate(batch_order(ds_train.count, hyper.batch_size, hyper.steps, seed)):
        lr = cosine_lr(step, sched)
        try:
            with np.errstate(all="ignore"):
                loss, grads = loss_and_grads(params, config, ds_train.onehot[idx], ds_train.targets[idx])
        except NumericalError as exc:
            raise DivergenceError(f"step {step + 1}: {exc}", last_good=params, log=log) from None
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at step {step + 1}", last_good=params, log=log)
        grads = clip_global_norm(grads, hyper.clip)
        try:
            flat, state = adam_step(params.flat(), grads, state, lr)
        except NumericalError as exc:
            raise DivergenceError(str(exc), last_good=params, log=log) from None
        params = InterpreterParams.from_flat(config, flat)
        val = None
        last = step + 1 == hyper.steps
        if ds_val is not None and ds_val.count and (last or (hyper.eval_every and (step + 1) % hyper.eval_every == 0)):
            val = evaluate(params, config, ds_val).overall
            if val is not None and (best_val is None or val > best_val):
                best, best_val = params, val
        log.append((step + 1, lr, loss, val))
        if (step + 1) % 100 == 0:
            logger.info("step %d lr %.3g loss %.5f val %s", step + 1, lr, loss, val)
    return TrainResult(params, best, best_val, log)
