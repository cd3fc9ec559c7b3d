"""Simulated transport with latency, jitter and drops, FIFO always.

Delivery time is send time plus the configured delay plus a seeded uniform
jitter draw, then clamped to be no earlier than the previously scheduled
delivery, so jitter can stretch spacing but never reorder. Drops consume
one RNG draw per push, which keeps the pattern reproducible per seed.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass


@dataclass(frozen=True)
class ChannelModel:
    delay_ms: float = 0.0
    jitter_ms: float = 0.0
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.delay_ms < 0 or self.jitter_ms < 0:
            raise ValueError("delay and jitter must be >= 0")
        if not (0.0 <= self.drop_prob < 1.0):
            raise ValueError("drop_prob must lie in [0, 1)")


class Channel:
    """One direction of the link; payloads are opaque byte strings."""

    def __init__(self, model: ChannelModel):
        self.model = model
        self._rng = random.Random(model.seed)
        self._queue: deque = deque()
        self._last_scheduled_us = 0
        self.sent = 0
        self.dropped = 0

    def push(self, payload: bytes, now_us: int) -> bool:
        """Schedule a payload; returns False when the channel dropped it."""
        self.sent += 1
        if self._rng.random() < self.model.drop_prob:
            self.dropped += 1
            return False
        jitter_us = self._rng.random() * self.model.jitter_ms * 1000.0
        deliver = now_us + int(round(self.model.delay_ms * 1000.0 + jitter_us))
        deliver = max(deliver, self._last_scheduled_us)
        self._last_scheduled_us = deliver
        self._queue.append((deliver, payload))
        return True

    def poll(self, now_us: int) -> list:
        """Everything due by now, in send order."""
        out = []
        while self._queue and self._queue[0][0] <= now_us:
            out.append(self._queue.popleft()[1])
        return out

    @property
    def pending(self) -> int:
        return len(self._queue)
