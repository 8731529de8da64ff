"""Windowed-loss switching policy.

The progress signal compares two moving averages of the per-round
weighted training loss: a window of the recent past against an equally
sized window lagged further back. When training progresses the lagged
window sits higher, so the signal is positive; as the model saturates it
decays toward zero. A switch to the next model fires once the signal is
at or below the stage threshold, and never before window + lag rounds
have been observed on the current model.

The loss history restarts at every switch: the guard requires a full
window + lag of history from the new model anyway, and mixing losses
from two models would corrupt the signal.
"""

from __future__ import annotations

import math

from .errors import ConfigError, NumericalError
from .growth import GrowthSchedule

DEFAULT_WINDOW = 100
DEFAULT_LAG = 300


class SwitchPolicy:
    """Per-run mutable policy state; owned and updated by the server loop."""

    def __init__(self, window: int = DEFAULT_WINDOW, lag: int = DEFAULT_LAG,
                 model_index: int = 0):
        if window < 1 or lag < 1:
            raise ConfigError("window and lag must be positive")
        self.window = window
        self.lag = lag
        self.model_index = model_index
        self.losses: list[float] = []

    @property
    def rounds_since_switch(self) -> int:
        return len(self.losses)

    def record_round_loss(self, loss: float) -> None:
        """Append one weighted round loss to the current model's history."""
        loss = float(loss)
        if not math.isfinite(loss):
            raise NumericalError(
                f"non-finite round loss {loss!r} at round {len(self.losses)} "
                f"of model {self.model_index}")
        self.losses.append(loss)

    def progress_signal(self) -> float | None:
        """Two-window mean difference, or None until window + lag rounds
        of the current model have been recorded."""
        n, lag = self.window, self.lag
        t = len(self.losses)
        if t < n + lag:
            return None
        earlier = self.losses[t - n - lag:t - lag]
        recent = self.losses[t - n:]
        return (math.fsum(earlier) - math.fsum(recent)) / n

    def should_switch(self, schedule: GrowthSchedule) -> bool:
        """True when the signal is ready, at or below the stage threshold,
        and a larger model exists."""
        if self.model_index >= schedule.num_models - 1:
            return False
        signal = self.progress_signal()
        if signal is None:
            return False
        return signal <= schedule.thresholds[self.model_index]

    def advance(self) -> None:
        """Move to the next model and restart the loss history."""
        self.model_index += 1
        self.losses = []
