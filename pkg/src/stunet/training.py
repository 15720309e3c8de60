"""Mini-batch training loop: Adam with stepped learning-rate decay, global
gradient clipping, scheduled sampling, and best-on-validation checkpointing.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import Normalizer, TimeSeriesDataset, WindowConfig, make_windows
from .errors import UsageError
from .model import STUNet, STUNetConfig, build, loss
from .recurrent import SS_TAU_DEFAULT, scheduled_sampling_prob
from .tensor import AdamState, Tensor, adam_step, clip_global_norm


@dataclass
class RunConfig:
    """Everything one training/evaluation run needs beyond the dataset."""

    model: STUNetConfig = field(default_factory=STUNetConfig)
    epochs: int = 80
    batch_size: int = 50
    lr: float = 1e-2
    lr_decay: float = 0.7
    lr_decay_every: int = 8
    clip_norm: float = 5.0
    ss_tau: float = SS_TAU_DEFAULT
    seed: int = 0
    variant: str = "ST-UNet"
    horizons: tuple | None = None  # metric steps, 1-based; None = every step
    ha_period: int | None = None
    interval_minutes: float = 5.0
    adj_path: str = ""
    series_path: str = ""
    ckpt_path: str = ""
    out_dir: str = ""

    def validate(self) -> None:
        self.model.validate()
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("epochs must be >= 0 and batch size >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1 or self.lr_decay_every < 1:
            raise UsageError("learning-rate schedule fields out of range")
        if self.horizons is not None and any(h < 1 for h in self.horizons):
            raise UsageError("metric horizons are 1-based steps")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_decay_every)

    def metric_steps(self) -> tuple:
        if self.horizons is None:
            return tuple(range(1, self.model.h + 1))
        return tuple(int(h) for h in self.horizons)

    def config_hash(self) -> str:
        text = self.model.to_lines() + "".join(
            f"{k}={v}\n"
            for k, v in sorted(vars(self).items())
            if k not in ("model", "adj_path", "series_path", "ckpt_path", "out_dir")
        )
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    eps: float

    def line(self) -> str:
        return (
            f"epoch {self.epoch:4d}  train {self.train_loss:.6f}  "
            f"val {self.val_loss:.6f}  lr {self.lr:.6g}  eps {self.eps:.4f}"
        )


def _to_time_major(windows: np.ndarray) -> np.ndarray:
    """(W, L, N, D) window stack -> (L, W, N, D) batched sequence."""
    return np.ascontiguousarray(np.transpose(windows, (1, 0, 2, 3)))


def predict_windows(model: STUNet, inputs: np.ndarray, batch_size: int = 50) -> np.ndarray:
    """Forward normalized windows (W, J, N, D) -> (W, H, N, D), no recording."""
    chunks = []
    with T.no_grad():
        for lo in range(0, inputs.shape[0], batch_size):
            xb = _to_time_major(inputs[lo : lo + batch_size])
            T.reset_tape()
            pred = model.forward(Tensor(xb))
            chunks.append(np.transpose(pred.data, (1, 0, 2, 3)))
    T.reset_tape()
    return np.concatenate(chunks, axis=0)


def dataset_loss(model: STUNet, inputs: np.ndarray, targets: np.ndarray,
                 batch_size: int = 50) -> float:
    """Mean forward loss over normalized windows, without recording."""
    total = 0.0
    with T.no_grad():
        for lo in range(0, inputs.shape[0], batch_size):
            xb = _to_time_major(inputs[lo : lo + batch_size])
            yb = _to_time_major(targets[lo : lo + batch_size])
            T.reset_tape()
            val = loss(model.forward(Tensor(xb)), Tensor(yb)).item()
            total += val * xb.shape[1]
    T.reset_tape()
    return total / inputs.shape[0]


def normalized_copy(ds: TimeSeriesDataset, norm: Normalizer) -> TimeSeriesDataset:
    return TimeSeriesDataset(
        series=norm.apply(ds.series),
        graph=ds.graph,
        splits=ds.splits,
        interval_minutes=ds.interval_minutes,
    )


def train_model(rc: RunConfig, ds: TimeSeriesDataset):
    """Train on the dataset's train split, keeping best-validation weights.

    Returns (model, history). The normalizer fitted on the train split is
    stored in the model's persistent buffers, so checkpoints are
    self-contained. epochs=0 leaves the freshly initialized weights.
    """
    rc.validate()
    cfg = rc.model
    model = build(cfg, ds.graph)
    norm = Normalizer().fit(ds.split_series("train"))
    model.norm_mean.data[...] = norm.mean
    model.norm_std.data[...] = norm.std
    normalized = normalized_copy(ds, norm)
    wc = WindowConfig(cfg.j, cfg.h)
    train_in, train_tg = make_windows(normalized, wc, "train")
    val_in, val_tg = make_windows(normalized, wc, "val")

    params = model.trainable_params()
    state = AdamState.for_params(params, rc.lr)
    rng = np.random.default_rng(rc.seed)
    history: list[EpochLog] = []
    best_val = float("inf")
    best_snapshot = [p.data.copy() for p in params]
    iteration = 0
    for epoch in range(rc.epochs):
        state.lr = rc.lr_at(epoch)
        order = rng.permutation(train_in.shape[0])
        running = 0.0
        eps = 0.0
        for lo in range(0, order.size, rc.batch_size):
            idx = order[lo : lo + rc.batch_size]
            xb = Tensor(_to_time_major(train_in[idx]))
            yb = Tensor(_to_time_major(train_tg[idx]))
            eps = scheduled_sampling_prob(iteration, rc.ss_tau)
            T.reset_tape()
            out = loss(model.forward(xb, targets=yb, eps=eps, rng=rng), yb)
            T.backward(out)
            grads = clip_global_norm([p.grad_array() for p in params], rc.clip_norm)
            adam_step(params, grads, state)
            for p in params:
                p.zero_grad()
            running += out.item() * idx.size
            iteration += 1
        T.reset_tape()
        train_loss = running / order.size
        val_loss = dataset_loss(model, val_in, val_tg, rc.batch_size)
        history.append(EpochLog(epoch, train_loss, val_loss, state.lr, eps))
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = [p.data.copy() for p in params]
    for p, snap in zip(params, best_snapshot):
        p.data[...] = snap
    return model, history


def write_history(path: str, history: list) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for entry in history:
            fh.write(entry.line() + "\n")
