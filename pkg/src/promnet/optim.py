"""RMSProp and the minibatch training loop shared by both models."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import SequenceDataset, XorShift64Star, derive_seed, iter_windows
from .model import SequenceModel


@dataclass
class RmsPropState:
    """Per-parameter mean-square accumulators plus hyperparameters."""

    lr: float = 0.001
    decay: float = 0.9
    eps: float = 1e-8
    ms: dict[str, np.ndarray] = field(default_factory=dict)
    steps: int = 0

    @classmethod
    def for_model(cls, model: SequenceModel, **hyper) -> "RmsPropState":
        st = cls(**hyper)
        st.ms = {k: np.zeros_like(n.value) for k, n in model.params.items()}
        return st

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "decay": self.decay, "eps": self.eps, "steps": self.steps}


def rmsprop_update(param: np.ndarray, grad: np.ndarray, ms: np.ndarray,
                   lr: float = 0.001, decay: float = 0.9, eps: float = 1e-8) -> np.ndarray:
    """In-place update of ``param`` and ``ms``; returns ``param``."""
    if param.shape != grad.shape or param.shape != ms.shape:
        raise T.ShapeError(f"rmsprop_update: param {param.shape}, grad {grad.shape}, ms {ms.shape} disagree")
    ms *= decay
    ms += (1.0 - decay) * grad * grad
    param -= (lr * grad / (np.sqrt(ms) + eps)).astype(param.dtype, copy=False)
    return param


def apply_updates(model: SequenceModel, grads: dict[str, np.ndarray], state: RmsPropState,
                  clip_norm: float | None = None) -> None:
    if clip_norm is not None:
        norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
        if norm > clip_norm:
            grads = {k: g * (clip_norm / norm) for k, g in grads.items()}
    for name, node in model.params.items():
        rmsprop_update(node.value, grads[name], state.ms[name], state.lr, state.decay, state.eps)
    state.steps += 1


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 1
    seed: int = 0
    # None selects the schedule: 1.0 for the first half of epochs, then linear decay to 0
    teacher_forcing_prob: float | None = None
    precision: str = "float32"
    clip_norm: float | None = None
    window_stride: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.teacher_forcing_prob is not None and not 0.0 <= self.teacher_forcing_prob <= 1.0:
            raise ValueError(f"teacher_forcing_prob must lie in [0, 1], got {self.teacher_forcing_prob}")
        if self.window_stride < 1:
            raise ValueError(f"window_stride must be >= 1, got {self.window_stride}")

    def teacher_prob(self, epoch: int) -> float:
        if self.teacher_forcing_prob is not None:
            return self.teacher_forcing_prob
        half = self.epochs / 2
        if epoch < half:
            return 1.0
        return max(0.0, 1.0 - (epoch - half) / max(self.epochs - half, 1))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    batch_losses: list[float]
    teacher_prob: float


def training_windows(dataset: SequenceDataset, t_in: int, t_out: int, stride: int = 1) -> list[tuple[int, int]]:
    """All ``(sequence, start)`` pairs in deterministic order."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    length = dataset.shape[1]
    if length < t_in + t_out:
        raise ValueError(f"sequences of length {length} are shorter than t_in + t_out = {t_in + t_out}")
    return [(s, start) for s in range(len(dataset)) for start in iter_windows(length, t_in, t_out, stride)]


def gather_batch(dataset: SequenceDataset, windows, t_in: int, t_out: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    """Stack windows into ``[T, N, 1, H, W]`` input and target tensors."""
    clips = np.stack([dataset.frames[s, start:start + t_in + t_out] for s, start in windows])
    clips = (clips.astype(dtype) / dtype(255.0)).transpose(1, 0, 2, 3)[:, :, None]
    return clips[:t_in], clips[t_in:]


def train_epoch(net: SequenceModel, dataset: SequenceDataset, config: TrainConfig,
                optimizer_state: RmsPropState, epoch: int = 0) -> EpochMetrics:
    """One shuffled pass over every training window, one update per batch."""
    cfg = net.config
    windows = training_windows(dataset, cfg.t_in, cfg.t_out, config.window_stride)
    rng = XorShift64Star(derive_seed(config.seed, epoch))
    order = rng.shuffle(list(range(len(windows))))
    p_tf = config.teacher_prob(epoch)
    dtype = net._dtype().type
    losses = []
    for start in range(0, len(order), config.batch_size):
        batch = [windows[i] for i in order[start:start + config.batch_size]]
        inputs, targets = gather_batch(dataset, batch, cfg.t_in, cfg.t_out, dtype)
        teacher = [rng.uniform() < p_tf for _ in range(cfg.t_out)]
        loss, grads = net.forward_train(inputs, targets, teacher)
        apply_updates(net, grads, optimizer_state, config.clip_norm)
        losses.append(loss)
    return EpochMetrics(epoch, float(np.mean(losses)), losses, p_tf)


def train(net: SequenceModel, dataset: SequenceDataset, config: TrainConfig,
          optimizer_state: RmsPropState | None = None, start_epoch: int = 0, callback=None):
    """Run ``config.epochs`` epochs; ``callback(metrics)`` fires after each."""
    state = optimizer_state or RmsPropState.for_model(net)
    history = []
    for epoch in range(start_epoch, config.epochs):
        m = train_epoch(net, dataset, config, state, epoch)
        history.append(m)
        if callback is not None:
            callback(m)
    return history, state
