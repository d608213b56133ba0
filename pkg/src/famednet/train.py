"""Losses, momentum SGD, learning-rate schedule, patch sampling and the training loop."""

from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .network import FamedNet, NetConfig, build_network
from .tensor import bilinear_resize


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 48
    crop: int = 128
    lr0: float = 1e-5
    lr_drop_points: tuple = (0.5, 0.8)
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha_scales: float | tuple = 1.0
    alpha_fusion: float = 1.0
    total_iters: int = 400_000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        self.lr_drop_points = tuple(self.lr_drop_points)
        for name in ("lr0", "momentum", "weight_decay", "alpha_fusion", "lr_drop_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if any(a < 0 for a in np.atleast_1d(self.alpha_scales)):
            raise ValueError("alpha_scales must be non-negative")
        pts = self.lr_drop_points
        if any(not 0 < p < 1 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValueError(f"lr_drop_points must be strictly increasing in (0, 1), got {pts}")
        if self.batch_size < 1 or self.crop < 1 or self.total_iters < 0:
            raise ValueError("batch_size and crop must be >= 1 and total_iters >= 0")

    def scale_weight(self, s: int) -> float:
        a = self.alpha_scales
        return float(a) if np.isscalar(a) else float(a[s])

    def to_dict(self):
        d = asdict(self)
        d["lr_drop_points"] = list(self.lr_drop_points)
        return d


# ---------------------------------------------------------------- losses


def l2_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error and its gradient with respect to ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"l2_loss: shapes differ, {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(np.square(diff, dtype=np.float64)))
    return loss, (2.0 / diff.size) * diff


def multiscale_loss(outputs, J_gt: np.ndarray, config: TrainConfig, scales: int | None = None):
    """Deep-supervised loss over every scale plus the fused output.

    Returns ``(loss, dJ_per_scale, dJ_fusion)``.
    """
    S = len(outputs.J) if scales is None else scales
    if len(outputs.J) < S or any(j is None for j in outputs.J[:S]) or outputs.J_fusion is None:
        raise ValueError(f"multiscale_loss: expected {S} scale outputs plus a fused output")
    total = 0.0
    dJ = []
    for s in range(S):
        a = config.scale_weight(s)
        target = J_gt if s == 0 else bilinear_resize(J_gt, *outputs.J[s].shape[2:])
        loss, g = l2_loss(outputs.J[s], target)
        total += a * loss
        dJ.append(a * g)
    loss, g = l2_loss(outputs.J_fusion, J_gt)
    total += config.alpha_fusion * loss
    return total, dJ, config.alpha_fusion * g


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    velocity: dict = field(default_factory=dict)
    iteration: int = 0


def sgd_step(weights, state: OptimizerState, lr: float, momentum: float, weight_decay: float):
    """Heavy-ball update: v <- m v - lr (g + wd w); w <- w + v.

    Decay only touches parameters flagged for it (conv weights).
    """
    for name, p in weights.items():
        if not p.learnable:
            continue
        g = p.grad
        if weight_decay and p.decay:
            g = g + weight_decay * p.value
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(p.value)
        if v.shape != p.value.shape:
            raise ValueError(f"velocity for {name} has shape {v.shape}, parameter {p.value.shape}")
        v *= momentum
        v -= lr * g
        p.value += v
    state.iteration += 1


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    lr = config.lr0
    for p in config.lr_drop_points:
        if iteration >= int(round(p * config.total_iters)):
            lr *= config.lr_drop_factor
    return lr


# ---------------------------------------------------------------- data


def sample_training_batch(dataset: Sequence, config: TrainConfig, rng: np.random.Generator):
    """Aligned random crops from randomly chosen (hazy, clear) pairs.

    Each dataset item is a pair of (3, h, w) arrays.  Pairs smaller than
    the crop are skipped with a warning.
    """
    c = config.crop
    usable = [i for i, (hz, _) in enumerate(dataset) if hz.shape[1] >= c and hz.shape[2] >= c]
    if len(usable) < len(dataset):
        warnings.warn(f"skipping {len(dataset) - len(usable)} image pair(s) smaller than {c}x{c}")
    if not usable:
        raise ValueError("no training pair is large enough for the crop size")
    hazy = np.empty((config.batch_size, 3, c, c), dtype=np.float32)
    clear = np.empty_like(hazy)
    for b in range(config.batch_size):
        hz, cl = dataset[usable[rng.integers(len(usable))]]
        y = rng.integers(hz.shape[1] - c + 1)
        x = rng.integers(hz.shape[2] - c + 1)
        hazy[b] = hz[:, y : y + c, x : x + c]
        clear[b] = cl[:, y : y + c, x : x + c]
    return hazy, clear


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    net: FamedNet
    losses: list  # (iteration, lr, loss)

    def smoothed(self, window: int = 50) -> np.ndarray:
        v = np.array([l for _, _, l in self.losses])
        if len(v) < window:
            return v
        return np.convolve(v, np.ones(window) / window, mode="valid")


def train_step(net: FamedNet, hazy, clear, config: TrainConfig, state: OptimizerState, lr: float) -> float:
    net.zero_grad()
    out = net.forward(hazy, mode="train")
    loss, dJ, dJf = multiscale_loss(out, clear, config)
    if not math.isfinite(loss):
        return loss
    net.backward(out, dJ, dJf)
    sgd_step(net.weights, state, lr, config.momentum, config.weight_decay)
    return loss


def canonical_order(dataset: Sequence) -> list:
    """Sort pairs by a content digest so training does not depend on dataset order."""

    def key(pair):
        h = hashlib.blake2b(digest_size=16)
        for a in pair:
            h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
            h.update(repr(a.shape).encode())
        return h.digest()

    return sorted(dataset, key=key)


def train(
    dataset: Sequence,
    net_config: NetConfig,
    config: TrainConfig,
    net: FamedNet | None = None,
    checkpoint: Callable[[FamedNet, int], None] | None = None,
    progress: Callable[[int, float, float], None] | None = None,
) -> TrainResult:
    """Run ``config.total_iters`` SGD iterations; fully determined by ``config.seed``."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    dataset = canonical_order(dataset)
    if net is None:
        net = build_network(net_config, seed=config.seed)
    rng = np.random.default_rng(config.seed + 1)
    state = OptimizerState()
    losses = []
    for it in range(config.total_iters):
        lr = lr_schedule(it, config)
        hazy, clear = sample_training_batch(dataset, config, rng)
        loss = train_step(net, hazy, clear, config, state, lr)
        if not math.isfinite(loss):
            if checkpoint is not None:
                checkpoint(net, it)
            raise TrainingDiverged(f"loss became {loss} at iteration {it} (lr={lr:g})")
        losses.append((it, lr, loss))
        if progress is not None and config.log_every and (it % config.log_every == 0 or it == config.total_iters - 1):
            progress(it, lr, loss)
        if checkpoint is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            checkpoint(net, it + 1)
    net.weights.initialized = True
    return TrainResult(net=net, losses=losses)


def write_loss_log(losses, path) -> None:
    from .files import atomic_write_text

    lines = ["iter,lr,loss"] + [f"{i},{lr:.6g},{l:.8g}" for i, lr, l in losses]
    atomic_write_text(Path(path), "\n".join(lines) + "\n")


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict  # name -> max relative error beyond rounding
    tol: float
    raw_max_rel_error: float = 0.0  # without the rounding allowance

    @property
    def flagged(self) -> list:
        return [k for k, v in self.per_tensor.items() if v >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.flagged


def gradient_check(
    net: FamedNet,
    hazy: np.ndarray,
    clear: np.ndarray,
    config: TrainConfig | None = None,
    tol: float = 1e-3,
    step: float = 1e-6,
    mode: str = "train",
    max_per_tensor: int = 64,
    seed: int = 0,
    grad_hook: Callable[[dict], None] | None = None,
) -> GradCheckReport:
    """Compare analytic parameter gradients of the full loss with central differences.

    Large tensors are subsampled to ``max_per_tensor`` entries.  ``grad_hook``
    sees the analytic gradients before comparison (used for fault injection).
    Relative error is max(|a - n| - r, 0) / max(|a|, |n|, 1e-7), where
    r = 64 eps |L| / (2 step) bounds the rounding error of the central
    difference.  Without r, parameters whose true gradient is zero (a conv
    bias feeding batch norm) would be judged on pure rounding noise.
    """
    config = config or TrainConfig(weight_decay=0.0)
    rng = np.random.default_rng(seed)
    snapshot = {k: p.value.copy() for k, p in net.weights.items() if not p.learnable}

    def restore_stats():
        for k, v in snapshot.items():
            net.weights[k].value[...] = v

    def loss_only():
        out = net.forward(hazy, mode=mode)
        restore_stats()
        return multiscale_loss(out, clear, config)[0]

    net.zero_grad()
    out = net.forward(hazy, mode=mode)
    restore_stats()
    _, dJ, dJf = multiscale_loss(out, clear, config)
    net.backward(out, dJ, dJf)
    analytic = {k: p.grad.copy() for k, p in net.weights.learnable()}
    if grad_hook is not None:
        grad_hook(analytic)

    per_tensor = {}
    raw = 0.0
    for name, p in net.weights.learnable():
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_per_tensor:
            idx = rng.choice(flat.size, max_per_tensor, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_only()
            flat[i] = orig - step
            lm = loss_only()
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            rounding = 64 * np.finfo(flat.dtype).eps * max(abs(lp), abs(lm)) / (2 * step)
            a = float(analytic[name].reshape(-1)[i])
            denom = max(abs(a), abs(num), 1e-7)
            raw = max(raw, abs(a - num) / denom)
            worst = max(worst, max(abs(a - num) - rounding, 0.0) / denom)
        per_tensor[name] = worst
    return GradCheckReport(max(per_tensor.values()), per_tensor, tol, raw_max_rel_error=raw)
