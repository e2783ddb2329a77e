"""Triangular cyclical learning rate, momentum SGD and the training loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import checkpoint
from .arch import Network
from .data import Frame

logger = logging.getLogger(__name__)


@dataclass
class CLRPolicy:
    base_lr: float
    max_lr: float
    stepsize: int

    def __post_init__(self):
        if self.stepsize <= 0:
            raise ValueError(f"stepsize must be positive, got {self.stepsize}")
        if self.base_lr <= 0 or self.max_lr < self.base_lr:
            raise ValueError(f"need 0 < base_lr <= max_lr, got [{self.base_lr}, {self.max_lr}]")

    @property
    def total_iters(self) -> int:
        return 6 * self.stepsize


def clr_lr(t: int, policy: CLRPolicy) -> float:
    """Triangular wave: ``base_lr`` at t=0, ``max_lr`` at t=stepsize, period 2*stepsize."""
    if t < 0:
        raise ValueError("iteration must be non-negative")
    cycle = math.floor(1 + t / (2 * policy.stepsize))
    x = abs(t / policy.stepsize - 2 * cycle + 1)
    return policy.base_lr + (policy.max_lr - policy.base_lr) * max(0.0, 1.0 - x)


@dataclass
class SGDState:
    momentum: float = 0.99
    weight_decay: float = 0.0005
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], lr: float,
             state: SGDState, no_decay: Sequence[str] = ()) -> None:
    """In-place ``v = mu*v - lr*(g + wd*p); p += v``.

    Parameters named in ``no_decay`` get no weight decay.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        wd = 0.0 if name in no_decay else state.weight_decay
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p)
        v *= state.momentum
        v -= lr * (g + wd * p) if wd else lr * g
        p += v


@dataclass
class TrainConfig:
    base_lr: float = 1e-7
    max_lr: float = 1e-5
    stepsize: Optional[int] = None  # None: 2 x number of training frames
    momentum: float = 0.99
    weight_decay: float = 0.0005
    seed: int = 0
    checkpoint_every: Optional[int] = None  # None: once per stepsize

    def policy(self, n_train: int) -> CLRPolicy:
        return CLRPolicy(self.base_lr, self.max_lr, self.stepsize or 2 * n_train)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    log: list[tuple]
    final_checkpoint: Path
    loss_names: list[str]
    diverged: bool = False


def _fmt(v: float) -> str:
    return repr(float(v))


def train_loop(net: Network, frames: Sequence[Frame], cfg: TrainConfig, out_dir,
               means: Sequence[float] = (0.0, 0.0, 0.0), iterations: Optional[int] = None) -> TrainResult:
    """Run ``6 * stepsize`` batch-size-1 SGD iterations on randomly drawn frames.

    ``iterations`` truncates the schedule (the LR range test runs one
    rising half-cycle only).

    Writes ``train_log.txt`` (one record per iteration: iteration, lr, total
    loss, per-term losses), ``train_timing.txt`` (wall-clock ms per
    iteration), periodic ``iter_XXXXXX.tnck`` checkpoints and ``final.tnck``.
    On a non-finite loss training stops and ``final.tnck`` holds the last
    good weights.
    """
    if not frames:
        raise ValueError("training split is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    policy = cfg.policy(len(frames))
    every = cfg.checkpoint_every or policy.stepsize
    state = SGDState(cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5A4D]))
    names = net.loss_names()
    arrays = {k: p.data for k, p in net.params.items()}

    log: list[tuple] = []
    last_good = checkpoint.to_bytes(net, means)
    diverged = False
    with open(out / "train_log.txt", "w", encoding="utf-8") as flog, \
            open(out / "train_timing.txt", "w", encoding="utf-8") as ftime:
        flog.write("# iteration,lr,total," + ",".join(names) + "\n")
        ftime.write("# iteration,wall_ms\n")
        total_iters = policy.total_iters if iterations is None else iterations
        for t in range(total_iters):
            start = time.perf_counter()
            frame = frames[int(rng.integers(len(frames)))]
            lr = clr_lr(t, policy)
            preds = net.forward(frame.image, mode="train", iteration=t)
            total, terms = net.loss(preds, frame.target)
            if not math.isfinite(total.item()):
                logger.error("loss became non-finite at iteration %d; keeping last good checkpoint", t)
                diverged = True
                break
            last_good = checkpoint.to_bytes(net, means)
            net.backward(total)
            try:
                sgd_step(arrays, {k: p.grad for k, p in net.params.items()}, lr, state, net.no_decay)
            except FloatingPointError as exc:
                logger.error("iteration %d: %s; keeping last good checkpoint", t, exc)
                diverged = True
                break
            record = (t, lr, total.item(), *terms)
            log.append(record)
            flog.write(",".join([str(t)] + [_fmt(v) for v in record[1:]]) + "\n")
            ftime.write(f"{t},{(time.perf_counter() - start) * 1e3:.3f}\n")
            if (t + 1) % every == 0 and t + 1 < total_iters:
                checkpoint.save(net, out / f"iter_{t + 1:06d}.tnck", means)
            if t % max(1, policy.stepsize // 2) == 0:
                logger.info("iter %d lr %.3g loss %.5f", t, lr, total.item())
    final = out / "final.tnck"
    final.write_bytes(last_good if diverged else checkpoint.to_bytes(net, means))
    return TrainResult(log, final, names, diverged)
