"""Event schedules, the multi-jump skip protocol, and ideal-time replay.

A schedule is drawn once from a seed and replayed against any algorithm
state.  Events are ``Comp(i, j)``, ``Jump(k, a, b)`` (token ``k`` walks
from ``a`` to neighbour ``b`` without touching models) and
``Average(k, i)`` (token ``k`` averages with node ``i``).
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Union

import numpy as np

from .accelerated import TavrParams, TavrState, apply_event as _tavr_event
from .clock import ClockState
from .exceptions import ConfigError, DataError, ParameterError
from .graph import CommGraph, RandomWalk, jumps_needed, random_walk
from .metrics import Trace, stop_error
from .objective import ReferenceSolution
from .token_core import AlgoParams, RunState, _Kernel, draw_events, spawn_rngs

COMP, JUMP, AVERAGE = 0, 1, 2


class Comp(NamedTuple):
    node: int
    sample: int


class Jump(NamedTuple):
    token: int
    src: int
    dst: int


class Average(NamedTuple):
    token: int
    node: int


ScheduleEvent = Union[Comp, Jump, Average]


class Schedule:
    """Compact event list: parallel integer arrays ``kind, a, b, c``.

    ``Comp`` uses ``(a, b) = (node, sample)``, ``Jump`` uses
    ``(a, b, c) = (token, src, dst)`` and ``Average`` ``(a, b) = (token, node)``.
    """

    def __init__(self, n: int, K: int, initial_positions, kind, a, b, c, meta=None):
        self.n = int(n)
        self.K = int(K)
        self.initial_positions = np.asarray(initial_positions, dtype=np.int64)
        self.kind = np.asarray(kind, dtype=np.uint8)
        self.a = np.asarray(a, dtype=np.int64)
        self.b = np.asarray(b, dtype=np.int64)
        self.c = np.asarray(c, dtype=np.int64)
        self.meta = dict(meta or {})
        if not (len(self.kind) == len(self.a) == len(self.b) == len(self.c)):
            raise ParameterError("schedule arrays must share their length")
        if self.initial_positions.shape != (self.K,):
            raise ParameterError("need one initial position per token")

    def __len__(self) -> int:
        return len(self.kind)

    def __iter__(self) -> Iterator[ScheduleEvent]:
        for kd, a, b, c in zip(self.kind.tolist(), self.a.tolist(), self.b.tolist(),
                               self.c.tolist()):
            if kd == COMP:
                yield Comp(a, b)
            elif kd == JUMP:
                yield Jump(a, b, c)
            else:
                yield Average(a, b)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Schedule) and self.n == other.n and self.K == other.K
                and np.array_equal(self.initial_positions, other.initial_positions)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("kind", "a", "b", "c")))

    @property
    def iterations(self) -> int:
        """Number of algorithm iterations (computations plus averages)."""
        return int(np.count_nonzero(self.kind != JUMP))

    @classmethod
    def from_events(cls, n: int, K: int, initial_positions, events) -> "Schedule":
        rows = []
        for ev in events:
            if isinstance(ev, Comp):
                rows.append((COMP, ev.node, ev.sample, 0))
            elif isinstance(ev, Jump):
                rows.append((JUMP, ev.token, ev.src, ev.dst))
            elif isinstance(ev, Average):
                rows.append((AVERAGE, ev.token, ev.node, 0))
            else:
                raise ParameterError(f"not a schedule event: {ev!r}")
        arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
        return cls(n, K, initial_positions, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])

    def to_text(self) -> str:
        lines = [f"# n {self.n} K {self.K} positions "
                 + " ".join(str(int(p)) for p in self.initial_positions)]
        for ev in self:
            if isinstance(ev, Comp):
                lines.append(f"C {ev.node} {ev.sample}")
            elif isinstance(ev, Jump):
                lines.append(f"J {ev.token} {ev.src} {ev.dst}")
            else:
                lines.append(f"A {ev.token} {ev.node}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Schedule":
        """Parse ``C i j`` / ``J k a b`` / ``A k i`` lines after a ``# n K positions`` header."""
        n = K = None
        positions: list[int] = []
        events: list[ScheduleEvent] = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts[:1] == ["n"] and len(parts) >= 5 and parts[2] == "K":
                    n, K = int(parts[1]), int(parts[3])
                    positions = [int(v) for v in parts[5:]]
                continue
            parts = line.split()
            try:
                vals = [int(v) for v in parts[1:]]
            except ValueError:
                raise DataError(f"non-integer field in {line!r}", lineno) from None
            tag = parts[0]
            if tag == "C" and len(vals) == 2:
                events.append(Comp(*vals))
            elif tag == "J" and len(vals) == 3:
                events.append(Jump(*vals))
            elif tag == "A" and len(vals) == 2:
                events.append(Average(*vals))
            else:
                raise DataError(f"malformed event {line!r}", lineno)
        if n is None:
            raise DataError("missing '# n <n> K <K> positions ...' header")
        return cls.from_events(n, K, positions, events)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "Schedule":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def check_adjacency(self, graph: CommGraph) -> None:
        """Raise unless every jump follows an edge (or stays put on a lazy step)."""
        for kd, a, b, c in zip(self.kind, self.a, self.b, self.c):
            if kd == JUMP and b != c and not graph.has_edge(int(b), int(c)):
                raise ConfigError(f"jump {b}->{c} does not follow an edge")

    def landing_nodes(self) -> np.ndarray:
        return self.b[self.kind == AVERAGE]


def _event_shape(params) -> tuple[int, int, float, int]:
    """``(n, K, p_comm, samples)`` for token or accelerated parameters."""
    if isinstance(params, AlgoParams):
        return params.n, params.K, params.p_comm, params.samples_per_node
    if isinstance(params, TavrParams):
        return params.n, params.K, params.p_comm, params.m
    raise ParameterError(f"unsupported parameter type {type(params).__name__}")


class _Walker:
    """Samples walk steps from the transition matrix's row CDFs."""

    def __init__(self, walk: RandomWalk, rng: np.random.Generator):
        self.cdf = [np.cumsum(row).tolist() for row in walk.transition]
        for row in self.cdf:
            row[-1] = 1.0
        self.rng = rng

    def path(self, start: int, steps: int) -> list[int]:
        us = self.rng.random(steps).tolist()
        out = []
        cur = start
        for u in us:
            cur = bisect.bisect_right(self.cdf[cur], u)
            out.append(cur)
        return out


def draw_schedule(params, graph: CommGraph, walk: RandomWalk | None = None, length: int = 1000,
                  seed: int = 0, skip: int | None = None, allow_no_skip: bool = False
                  ) -> Schedule:
    """Draw ``length`` algorithm iterations.

    On a complete graph without ``skip`` each communication is a direct
    ``Average`` at a uniform node, exactly the stream used by
    :func:`tokenwalk.token_core.run` with the same seed.  With ``skip=N``
    every communication is ``N`` walk ``Jump`` events followed by an
    ``Average`` at the landing node.  On other graphs ``skip`` is required
    unless ``allow_no_skip`` is set, in which case the token takes one walk
    step before every average.
    """
    n, K, p_comm, units = _event_shape(params)
    if graph.n != n:
        raise ConfigError("graph size does not match the parameters")
    if skip is not None and skip < 1:
        raise ConfigError("skip must be a positive number of jumps")
    if skip is None and not graph.is_complete and not allow_no_skip:
        raise ConfigError("general graphs need the skip protocol (or the no-skip override)")
    walking = skip is not None or not graph.is_complete
    if walking and walk is None:
        walk = random_walk(graph, "uniform_neighbor")
    event_rng, pos_rng, walk_rng = spawn_rngs(seed)
    positions = pos_rng.integers(0, n, size=K)
    pos = positions.copy()
    walker = _Walker(walk, walk_rng) if walking else None
    jumps = skip if skip is not None else 1
    kind: list[int] = []
    A: list[int] = []
    B: list[int] = []
    C: list[int] = []
    done = 0
    while done < length:
        block = min(4096, length - done)
        is_comm, node, other = draw_events(event_rng, p_comm, n, K, units, block)
        for e in range(block):
            o = int(other[e])
            if not is_comm[e]:
                kind.append(COMP)
                A.append(int(node[e]))
                B.append(o)
                C.append(0)
                continue
            if walker is None:
                dst = int(node[e])
            else:
                cur = int(pos[o])
                for nxt in walker.path(cur, jumps):
                    kind.append(JUMP)
                    A.append(o)
                    B.append(cur)
                    C.append(nxt)
                    cur = nxt
                dst = cur
            pos[o] = dst
            kind.append(AVERAGE)
            A.append(o)
            B.append(dst)
            C.append(0)
        done += block
    meta = {"seed": seed, "skip": skip, "p_comm": p_comm}
    sched = Schedule(n, K, positions, kind, A, B, C, meta)
    if walking:
        sched.check_adjacency(graph)
    return sched


def ideal_time(schedule: Schedule, tau_comm: float = 1000.0, tau_comp: float = 1.0,
               comp_units: float = 1.0) -> tuple[float, np.ndarray]:
    """Replay the clock recurrence; returns the total and per-event finish times.

    A computation advances its node by ``comp_units * tau_comp``.  Jumps
    and direct averages deliver a message from the token's current node.
    """
    clock = ClockState(schedule.n, tau_comm, tau_comp, schedule.initial_positions)
    times = np.empty(len(schedule))
    for idx, (kd, a, b, c) in enumerate(zip(schedule.kind.tolist(), schedule.a.tolist(),
                                            schedule.b.tolist(), schedule.c.tolist())):
        if kd == COMP:
            times[idx] = clock.compute(a, comp_units)
        elif kd == JUMP:
            clock.token_nodes[a] = b
            times[idx] = clock.move_token(a, c)
        else:
            times[idx] = clock.move_token(a, b)
    return clock.total, times


@dataclass(frozen=True)
class SkipPlan:
    """Step sizes and jump count for averaging after ``jumps`` walk steps.

    ``params`` carries the (possibly reduced) ``eta``; ``node_rho[i]`` is
    the averaging weight used when a token lands at node ``i``;
    ``lr_probs`` are the inflated learning-rate probabilities
    ``pi_i + eta * mu / 4``.
    """

    params: AlgoParams
    jumps: int
    eta: float
    mu_rel: float
    node_rho: np.ndarray
    lr_probs: np.ndarray


def skip_plan(params: AlgoParams, walk: RandomWalk, c_mult: float = 1.0) -> SkipPlan:
    """Skip-protocol constants for a token algorithm on a general graph.

    ``eta`` is capped at ``p_comm sigma_tilde min(pi) / (2K)`` so that the
    communication steps stay within their relative-smoothness bound under
    the stationary landing law; the jump count uses ``mu = alpha / 2``.
    """
    pi = walk.stationary
    eta_cap = params.p_comm * params.sigma_tilde * float(pi.min()) / (2.0 * params.K)
    eta = min(params.eta, eta_cap)
    eff = params.with_eta(eta)
    mu_rel = params.alpha / 2.0
    N = jumps_needed(walk, eta, mu_rel, c_mult)
    lr = pi + eta * mu_rel / 4.0
    rho = eta * params.K / (params.p_comm * params.sigma_tilde * lr)
    return SkipPlan(eff, N, eta, mu_rel, rho, lr)


def run_simulated(state: RunState | TavrState, schedule: Schedule,
                  reference: ReferenceSolution | None = None, eps: float | None = None,
                  check_every: int | None = None, tau_comm: float = 1000.0, tau_comp: float = 1.0,
                  node_rho: np.ndarray | None = None, metric: str = "both",
                  label: str | None = None) -> Trace:
    """Apply ``schedule`` to ``state`` in order, recording checkpoints.

    ``Jump`` events move tokens, advance the clock and count as
    communications, but touch no model.  ``node_rho``
    overrides the averaging weight per landing node (skip protocol).
    Checkpoints are counted in algorithm iterations.
    """
    n = state.problem.n
    K = state.params.K
    if schedule.n != n or schedule.K != K:
        raise ConfigError("schedule was drawn for a different node or token count")
    tavr = isinstance(state, TavrState)
    units = state.params.m if tavr else state.params.samples_per_node
    if np.any(schedule.b[schedule.kind == COMP] >= units):
        raise ConfigError("schedule has sample indices the algorithm does not have")
    if tavr and node_rho is not None:
        raise ConfigError("per-node averaging weights apply to token algorithms only")
    check_every = n if check_every is None else check_every
    if check_every < 1:
        raise ParameterError("checkpoint cadence must be at least 1")
    theta_star = np.zeros(state.problem.dim) if reference is None else reference.theta_star
    state.positions[:] = schedule.initial_positions
    comp_units = 1 if tavr else state.params.grads_per_comp
    clock = ClockState(n, tau_comm, tau_comp, schedule.initial_positions)
    name = label or ("tavr" if tavr else state.params.variant)
    trace = Trace(name, meta={"K": K, "n": n, "schedule_seed": schedule.meta.get("seed")})
    kernel = None if tavr else _Kernel(state)

    def checkpoint() -> bool:
        rec = state.record(theta_star, clock.total)
        trace.append(rec)
        return eps is not None and stop_error(rec.err_node, rec.err_token, metric) <= eps

    if checkpoint():
        trace.reached = True
        return trace
    since = 0
    if not tavr:
        theta, tokens, counts = state.theta, state.tokens, state.comm_counts
        rho_c, rho_p = state.params.rho_comm, state.params.rho_comp
        rho_nodes = None if node_rho is None else np.asarray(node_rho, dtype=float).tolist()
    for kd, a, b, c in zip(schedule.kind.tolist(), schedule.a.tolist(), schedule.b.tolist(),
                           schedule.c.tolist()):
        if kd == JUMP:
            clock.token_nodes[a] = b
            clock.move_token(a, c)
            state.positions[a] = c
            state.comm_counts[a] += 1
            continue
        if kd == COMP:
            clock.compute(a, comp_units)
            if tavr:
                _tavr_event(state, False, a, b)
            else:
                kernel.comp(a, b, rho_p)
                state.t += 1
        else:
            clock.move_token(a, b)
            if tavr:
                _tavr_event(state, True, b, a)
            else:
                r = rho_c if rho_nodes is None else rho_nodes[b]
                diff = r * (tokens[a] - theta[b])
                tokens[a] -= diff
                theta[b] += diff
                counts[a] += 1
                state.positions[a] = b
                state.t += 1
        since += 1
        if since == check_every:
            since = 0
            if checkpoint():
                trace.reached = True
                return trace
    if since:
        trace.reached = checkpoint()
    trace.truncated = eps is not None and not trace.reached
    return trace


def landing_deviation(walk: RandomWalk, jumps: int) -> float:
    """Worst ``||W^N e_i - pi||_inf`` over starting nodes."""
    P = np.linalg.matrix_power(walk.transition, jumps)
    return float(np.max(np.abs(P - walk.stationary[None, :])))


def landing_frequencies(schedule: Schedule) -> np.ndarray:
    nodes = schedule.landing_nodes()
    if nodes.size == 0:
        return np.zeros(schedule.n)
    return np.bincount(nodes, minlength=schedule.n) / nodes.size

