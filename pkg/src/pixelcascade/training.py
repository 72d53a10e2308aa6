"""Losses, schedules, and the SGD loop with the per-task presets.

The class-balanced loss uses the beta-weighted *sum* over pixels (mean over
the batch); the tiny preset learning rates for edge and skeleton only make
sense against sum-scale loss magnitudes. A sample with no positive pixels
falls back to the plain mean of its negative terms so empty crops still
contribute signal instead of zeroing out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import decoders, engine
from .cascade import CascadeSpec
from .engine import Tensor
from .model import CascadeModel

LOSS_KINDS = ("bce", "class_balanced")

_EPS = 1e-12


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainConfig:
    task: str
    loss: str
    lr0: float
    lr_drop_iter: int
    lr_drop_factor: float
    momentum: float
    weight_decay: float
    batch: int
    max_iter: int
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lr_drop_factor < 1:
            raise ValueError("lr_drop_factor must lie in (0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")


_PRESETS = {
    "saliency": dict(loss="bce", lr0=5e-3, lr_drop_iter=8000, weight_decay=5e-4,
                     max_iter=12000),
    "edge": dict(loss="class_balanced", lr0=1e-6, lr_drop_iter=23000,
                 weight_decay=2e-4, max_iter=30000),
    "skeleton": dict(loss="class_balanced", lr0=1e-6, lr_drop_iter=20000,
                     weight_decay=2e-4, max_iter=30000),
}


def preset_config(task: str, seed: int = 0) -> TrainConfig:
    if task not in _PRESETS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(_PRESETS)}")
    p = _PRESETS[task]
    return TrainConfig(task=task, lr_drop_factor=0.1, momentum=0.9, batch=10,
                       seed=seed, **p)


def scale_config(config: TrainConfig, scale: float) -> TrainConfig:
    """Shrink (or stretch) the schedule uniformly, keeping its shape."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    return replace(config,
                   max_iter=max(1, round(config.max_iter * scale)),
                   lr_drop_iter=max(1, round(config.lr_drop_iter * scale)))


def lr_at(config: TrainConfig, iteration: int) -> float:
    if iteration >= config.lr_drop_iter:
        return config.lr0 * config.lr_drop_factor
    return config.lr0


# Value-level losses on probability maps --------------------------------------


def _as_batched(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != target shape {gt.shape}")
    if pred.ndim == 4:
        return pred.reshape(pred.shape[0], -1), gt.reshape(gt.shape[0], -1)
    return pred.reshape(1, -1), gt.reshape(1, -1)


def bce_loss(pred, gt) -> float:
    """Pixel-mean binary cross-entropy on a probability map."""
    p, y = _as_batched(pred, gt)
    p = np.clip(p, _EPS, 1.0 - _EPS)
    terms = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(terms.mean())


def class_balanced_bce(pred, gt) -> float:
    """Beta-weighted pixel sum, totalled over the minibatch.

    beta is each sample's negative fraction; it weights the positive terms,
    1-beta the negative ones. All-negative samples use the mean of their
    negative terms instead of the (vanishing) weighted form. The unnormalized
    sum is what the 1e-6 learning-rate presets were tuned against.
    """
    p, y = _as_batched(pred, gt)
    p = np.clip(p, _EPS, 1.0 - _EPS)
    terms = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    m = p.shape[1]
    pos = y.sum(axis=1)
    beta = (m - pos) / m
    w = np.where(y > 0.5, beta[:, None], (1.0 - beta)[:, None])
    w[pos == 0] = 1.0 / m
    return float((w * terms).sum())


def training_loss(variant, outputs, gt, loss_kind) -> Tensor:
    """Differentiable total loss for one decoder pass (logit-based)."""
    return decoders.decoder_losses(variant, outputs, gt, loss=loss_kind)


# Optimizer --------------------------------------------------------------------


def init_velocity(params) -> dict:
    return {name: np.zeros_like(p.data) for name, p in params.items()}


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """One heavy-ball update: v <- m*v + g + wd*p, then p <- p - lr*v.

    Mutates params and velocity in place and returns velocity.
    """
    for name, p in params.items():
        g = grads.of(p) if hasattr(grads, "of") else grads[name]
        if not np.all(np.isfinite(g)):
            raise engine.NonFiniteError(f"non-finite gradient for parameter {name}")
        v = velocity[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data -= lr * v
    return velocity


# Training loop ----------------------------------------------------------------


@dataclass
class LossReport:
    """Per-iteration log plus a handle on the trained model."""

    iterations: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    model: CascadeModel | None = None
    checkpoint: str | None = None

    def log(self, iteration, loss, lr):
        self.iterations.append(iteration)
        self.losses.append(loss)
        self.lrs.append(lr)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]

    def to_csv(self) -> str:
        lines = ["iter,loss,lr"]
        for i, loss, lr in zip(self.iterations, self.losses, self.lrs):
            lines.append(f"{i},{loss:.17g},{lr:.17g}")
        return "\n".join(lines) + "\n"


def _batches(n, batch, seed):
    """Yield index arrays forever: epoch-wise shuffles from the run seed."""
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=seed, spawn_key=(1,))))
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            yield order[start:start + batch]


def train(spec: CascadeSpec, dataset, config: TrainConfig, callback=None) -> LossReport:
    """Run the SGD loop on a freshly initialised model.

    ``dataset`` is a sequence of (image (3,H,W), target (1,H,W)) array pairs.
    Deterministic given config.seed: init, data order, and updates all derive
    from it.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("insufficient data: the dataset is empty")
    if config.batch > n:
        raise ValueError(
            f"insufficient data: batch size {config.batch} exceeds "
            f"dataset size {n}")

    model = CascadeModel(spec, seed=config.seed)
    for p in model.params.values():
        p.requires_grad = True
    velocity = init_velocity(model.params)
    images = np.stack([np.asarray(im, dtype=np.float64) for im, _ in dataset])
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in dataset])

    report = LossReport(model=model)
    batches = _batches(n, config.batch, config.seed)
    for it in range(config.max_iter):
        idx = next(batches)
        x = Tensor(images[idx])
        y = Tensor(targets[idx])
        lr = lr_at(config, it)
        try:
            with engine.Tape() as tape:
                out = model.forward(x)
                loss = training_loss(model.decoder_variant, out, y, config.loss)
            grads = engine.backward(loss, tape)
            sgd_step(model.params, grads, velocity, lr,
                     config.momentum, config.weight_decay)
        except engine.NonFiniteError as exc:
            raise DivergenceError(
                f"training diverged at iteration {it}: {exc}") from exc
        val = float(loss.data.reshape(()))
        if not np.isfinite(val):
            raise DivergenceError(
                f"training diverged at iteration {it}: loss is {val}")
        report.log(it, val, lr)
        if callback is not None:
            callback(it, val, lr)
    return report
