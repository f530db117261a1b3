"""Baseline training of the refinement model on synthetic scenes.

Supervision is an exponentially weighted L1 sequence loss over the recorded
disparity estimates, so later iterations dominate and the model genuinely
uses its full unroll depth.
"""

from __future__ import annotations

import numpy as np

from .dataio import stack_samples
from .model import RefineModel, epe
from .tensor import Adam, GradTape, Tensor, add, l1_mean, scale


def sequence_l1(record, gt: Tensor, gamma: float = 0.9):
    """Weighted sum over t of gamma^(T-t) * L1(d_t, gt), normalized."""
    T = record.T
    weights = [gamma ** (T - t) for t in range(T + 1)]
    total = None
    for w, d in zip(weights, record.disparities):
        term = scale(l1_mean(d, gt), w)
        total = term if total is None else add(total, term)
    return scale(total, 1.0 / sum(weights))


def sample_batch(dataset, batch_size: int, rng) -> tuple[Tensor, Tensor, Tensor]:
    idx = rng.integers(0, len(dataset), size=batch_size)
    return stack_samples([dataset[i] for i in idx])


def evaluate_epe(model: RefineModel, samples, T: int, batch_size: int = 8) -> float:
    """Mean end-point error of the final estimate over a held-out set."""
    errs = []
    for i in range(0, len(samples), batch_size):
        left, right, gt = stack_samples(samples[i:i + batch_size])
        rec, _ = model.refine_pair(left, right, T, record=False)
        errs.append(epe(rec.disparities[-1], gt) * left.data.shape[0])
    return float(sum(errs) / len(samples))


def train_baseline(model: RefineModel, dataset, T: int, steps: int, lr: float = 2e-4,
                   batch_size: int = 8, seed: int = 0, gamma: float = 0.9,
                   lr_decay: bool = True, log=None) -> list[dict]:
    """Train encoder, GRU and head jointly; returns per-step loss rows."""
    if steps < 1:
        raise ValueError(f"train_baseline: steps must be >= 1, got {steps}")
    model.set_trainable(gru=True, head=True, encoder=True)
    opt = Adam(model.parameters(), lr)
    rng = np.random.default_rng(seed)
    rows = []
    for step in range(steps):
        if lr_decay:
            opt.lr = lr * 0.5 * (1.0 + np.cos(np.pi * step / steps))
        left, right, gt = sample_batch(dataset, batch_size, rng)
        opt.zero_grad()
        with GradTape() as tape:
            rec, _ = model.refine_pair(left, right, T)
            loss = sequence_l1(rec, gt, gamma)
            tape.backward(loss)
        opt.step()
        rows.append({"step": step, "loss": loss.item(), "lr": opt.lr})
        if log is not None and (step % 25 == 0 or step == steps - 1):
            log(f"step {step:5d}  loss {loss.item():.4f}")
    return rows
