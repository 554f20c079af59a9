"""Checkpoint queue, EMA teachers, and the adaptive window schedule.

The teacher for self-distillation is an exponential moving average over
historical generator checkpoints. The adaptive variant restricts the
average to a recent window whose size grows on a cosine curve from m_min
to m_max over the run: small early (excludes underfit checkpoints), wide
late (reaches back past the overfit recent ones).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .generator import GeneratorParams


@dataclass(frozen=True)
class ScheduleConfig:
    t_max: int
    m_min: int = 2
    m_max: int = 9
    ema_alpha: float = 0.99

    def __post_init__(self):
        if not 1 <= self.m_min <= self.m_max:
            raise ConfigError(f"need 1 <= m_min <= m_max, got {self.m_min}, {self.m_max}")
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError(f"ema_alpha must be in (0, 1), got {self.ema_alpha}")


def window_size(t: int, cfg: ScheduleConfig) -> int:
    """Window size m_t at epoch t: floor of a half-cosine ramp from m_min
    (t = 0) to m_max (t = t_max), monotone non-decreasing."""
    if not 0 <= t <= cfg.t_max:
        raise ConfigError(f"epoch {t} outside [0, {cfg.t_max}]")
    ramp = 1.0 + math.cos((cfg.t_max + t) / cfg.t_max * math.pi)
    return int(math.floor(ramp * 0.5 * (cfg.m_max - cfg.m_min) + cfg.m_min))


@dataclass
class TeacherQueue:
    """Bounded FIFO of (epoch, params) checkpoints, newest last."""

    schedule: ScheduleConfig
    capacity: int = 0
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity <= 0:
            self.capacity = self.schedule.m_max + 1

    def __len__(self) -> int:
        return len(self.entries)

    def last(self, n: int) -> list:
        """The most recent n entries, oldest first."""
        return self.entries[-n:]


def push_checkpoint(queue: TeacherQueue, epoch: int, params: GeneratorParams) -> None:
    """Append a deep copy; evict the oldest entry beyond capacity."""
    if queue.entries and epoch <= queue.entries[-1][0]:
        raise DataError(
            f"checkpoint epochs must increase: got {epoch} after {queue.entries[-1][0]}"
        )
    queue.entries.append((epoch, params.copy()))
    while len(queue.entries) > queue.capacity:
        queue.entries.pop(0)


def ema_mean_teacher(checkpoints, alpha: float) -> GeneratorParams:
    """EMA over an ordered checkpoint list, oldest first.

    The accumulator starts at the first checkpoint, then folds each
    subsequent one with weight (1 - alpha). alpha in [0, 1]: 0 returns the
    last checkpoint, 1 the first.
    """
    if len(checkpoints) == 0:
        raise DataError("cannot build a teacher from an empty checkpoint list")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    first = checkpoints[0]
    acc = {name: t.astype(np.float64, copy=True) for name, t in first.tensor_dict().items()}
    for ckpt in checkpoints[1:]:
        tensors = ckpt.tensor_dict()
        for name, t in tensors.items():
            if t.shape != acc[name].shape:
                raise DataError(f"checkpoint tensor {name} changed shape: {t.shape}")
            acc[name] *= alpha
            acc[name] += (1.0 - alpha) * t
    return GeneratorParams(heads=first.heads, dim=first.dim, d_ff=first.d_ff, **acc)


def almt_teacher(queue: TeacherQueue, t: int) -> GeneratorParams:
    """Adaptive local teacher: EMA over the last m_t + 1 checkpoints
    (truncated to available history); older checkpoints contribute nothing."""
    if len(queue) == 0:
        raise DataError("teacher queue is empty")
    m_t = window_size(t, queue.schedule)
    window = [params for _, params in queue.last(min(m_t + 1, len(queue)))]
    return ema_mean_teacher(window, queue.schedule.ema_alpha)


def teacher_epoch_range(queue: TeacherQueue, window: int):
    """(oldest, newest) epochs that a window of the given size would use."""
    if len(queue) == 0:
        return None
    used = queue.last(min(window, len(queue)))
    return used[0][0], used[-1][0]
