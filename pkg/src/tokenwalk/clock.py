"""Ideal-time clock: fixed delays, maximal parallelism.

A computation at node ``i`` advances ``T_i`` by ``tau_comp``.  A token
message from ``j`` to ``i`` sets ``T_i = max(T_i, T_j + tau_comm)``.
"""

from __future__ import annotations

import numpy as np


class ClockState:
    """Per-node finish times plus the landing node and time of each token."""

    def __init__(self, n: int, tau_comm: float = 1000.0, tau_comp: float = 1.0,
                 token_nodes=None):
        if tau_comm < 0 or tau_comp < 0:
            raise ValueError("delays must be nonnegative")
        self.tau_comm = float(tau_comm)
        self.tau_comp = float(tau_comp)
        self.times = np.zeros(n)
        nodes = [] if token_nodes is None else list(token_nodes)
        self.token_nodes = np.asarray(nodes, dtype=np.int64)
        self.token_times = np.zeros(len(nodes))

    def compute(self, i: int, units: float = 1.0) -> float:
        self.times[i] += self.tau_comp * units
        return self.times[i]

    def message(self, src: int, dst: int) -> float:
        """Deliver a message; sending to oneself costs nothing."""
        if src != dst:
            t = self.times[src] + self.tau_comm
            if t > self.times[dst]:
                self.times[dst] = t
        return self.times[dst]

    def move_token(self, k: int, dst: int) -> float:
        t = self.message(int(self.token_nodes[k]), dst)
        self.token_nodes[k] = dst
        self.token_times[k] = t
        return t

    @property
    def total(self) -> float:
        return float(self.times.max()) if self.times.size else 0.0
