"""Desk-scale training: full-batch momentum SGD with global-norm clipping."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import RunConfig
from .geometry.synth import SyntheticPair, synth_pair
from .model import FMRT

log = logging.getLogger(__name__)

VELOCITY_PREFIX = "__velocity__/"


class NumericalError(RuntimeError):
    pass


@dataclass
class TraceRow:
    step: int
    coarse: float
    fine: float
    total: float


@dataclass
class TrainResult:
    trace: List[TraceRow]
    velocity: Dict[str, np.ndarray]
    steps_done: int

    @property
    def initial_loss(self) -> float:
        return self.trace[0].total

    @property
    def final_loss(self) -> float:
        return self.trace[-1].total


@dataclass
class MomentumSGD:
    lr: float
    momentum: float = 0.9
    clip: float = 0.5
    warmup_steps: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self, step: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        return self.lr

    def step(self, model: FMRT, step: int) -> float:
        """Apply one clipped update; returns the pre-clip global gradient norm."""
        named = list(model.named_parameters())
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in named}
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        if not np.isfinite(norm):
            raise NumericalError(f"non-finite gradient norm at step {step}")
        scale = self.clip / norm if self.clip > 0 and norm > self.clip else 1.0
        lr = self.learning_rate(step)
        for name, p in named:
            g = grads[name] * scale
            v = self.velocity.get(name)
            v = g if v is None else self.momentum * v + g
            self.velocity[name] = v.astype(p.dtype)
            p.data = (p.data - lr * self.velocity[name]).astype(p.dtype)
        return norm


def make_pairs(cfg: RunConfig, n: Optional[int] = None, seed: Optional[int] = None) -> List[SyntheticPair]:
    """``n`` training pairs with seeds derived from the run seed."""
    n = cfg.n_pairs if n is None else n
    base = cfg.seed if seed is None else seed
    ss = np.random.SeedSequence(base)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(n)]
    return [synth_pair(s, cfg.image_size, cfg.warp_magnitude, cfg.photometric) for s in seeds]


def batch_loss(model: FMRT, pairs: Sequence[SyntheticPair]):
    terms = model.batch_losses(
        np.stack([p.img_a for p in pairs]), np.stack([p.img_b for p in pairs]), [p.warp for p in pairs]
    )
    scale = 1.0 / len(terms)
    total = terms[0].total
    for t in terms[1:]:
        total = total + t.total
    total = total * scale
    lc = float(np.mean([t.coarse.item() for t in terms]))
    lf = float(np.mean([t.fine.item() for t in terms]))
    return total, lc, lf


def micro_train(
    model: FMRT,
    pairs: Sequence[SyntheticPair],
    steps: int,
    cfg: Optional[RunConfig] = None,
    start_step: int = 0,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> TrainResult:
    """Run ``steps`` updates; the trace holds the loss before each update and after the last.

    ``start_step``/``velocity`` resume an interrupted run exactly.
    """
    cfg = cfg or model.cfg
    if not pairs:
        raise ValueError("no training pairs")
    opt = MomentumSGD(cfg.lr, cfg.momentum, cfg.clip, cfg.warmup_steps, dict(velocity or {}))
    trace: List[TraceRow] = []
    for k in range(steps + 1):
        step = start_step + k
        model.zero_grad()
        total, lc, lf = batch_loss(model, pairs)
        value = total.item()
        if not np.isfinite(value):
            raise NumericalError(f"loss became {value} at step {step}")
        trace.append(TraceRow(step, lc, lf, value))
        if k == steps:
            break
        total.backward()
        gnorm = opt.step(model, step)
        if step % 20 == 0:
            log.info("step %d loss %.4f (coarse %.4f fine %.4f) |g| %.3f", step, value, lc, lf, gnorm)
    model.zero_grad()
    return TrainResult(trace, opt.velocity, start_step + steps)


def trace_to_csv(trace: Sequence[TraceRow], cfg: Optional[RunConfig] = None) -> str:
    buf = io.StringIO()
    if cfg is not None:
        buf.write("# config: " + json.dumps(cfg.to_dict(), sort_keys=True) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "Lc", "Lf", "total"])
    for row in trace:
        writer.writerow([row.step, repr(row.coarse), repr(row.fine), repr(row.total)])
    return buf.getvalue()


def trace_from_csv(text: str) -> List[TraceRow]:
    lines = [ln for ln in text.splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [TraceRow(int(r["step"]), float(r["Lc"]), float(r["Lf"]), float(r["total"])) for r in reader]
