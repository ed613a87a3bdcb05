"""Synchronous RAPSA and ARAPSA.

Each iteration draws ``I`` distinct blocks and one mini-batch per logical
processor, computes every block update from the same snapshot ``x^t``, and
commits all writes at the barrier.  ARAPSA additionally premultiplies each
block gradient by the block's oLBFGS matrix and, after the barrier,
re-evaluates the block gradient at ``x^{t+1}`` on the same mini-batch to
form a new curvature pair.

Randomness is drawn up front in a fixed order (block coordinator first,
then processor ``i``'s sample stream), so results do not depend on how many
physical threads execute the block work.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import (BLOCKS, SAMPLES, BlockPartition, SelectionState,
                   make_partition, make_rng, sample_minibatch, select_blocks)
from .errors import ConfigurationError, DivergenceError
from .problems import exact_optimum
from .quasi_newton import CurvatureMemory, admit_pair, two_loop_step

logger = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
METHODS = ("rapsa", "arapsa")
CURVATURE_RULES = ("block", "full")


@dataclass
class SyncConfig:
    I: int
    B: int
    L: int
    schedule: object
    T: int
    seed: int = 0
    method: str = "rapsa"
    memory: int = 10
    record_every: int = 1
    threads: int = 1
    shared_batch: bool = False
    debug: bool = False
    curvature: str = "block"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.curvature not in CURVATURE_RULES:
            raise ConfigurationError(f"curvature must be one of {CURVATURE_RULES}, got {self.curvature!r}")
        if not 1 <= self.I <= self.B:
            raise ConfigurationError(f"need 1 <= I <= B, got I={self.I}, B={self.B}")
        if self.L < 1:
            raise ConfigurationError("mini-batch size L must be >= 1")
        if self.T < 1:
            raise ConfigurationError("iteration count T must be >= 1")
        if self.method == "arapsa" and self.memory < 1:
            raise ConfigurationError("ARAPSA needs curvature memory >= 1")
        if self.record_every < 1 or self.threads < 1:
            raise ConfigurationError("record_every and threads must be >= 1")

    @property
    def r(self) -> float:
        return self.I / self.B


@dataclass
class RunTrace:
    """Rows of ``(t, features_processed, wall_clock_s, objective, objective_gap)``."""
    t: list = field(default_factory=list)
    features: list = field(default_factory=list)
    wall: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    final: np.ndarray | None = field(default=None, repr=False)

    def append(self, t, features, wall, objective, gap):
        if self.t and t <= self.t[-1]:
            raise ValueError(f"trace rows must have increasing t ({t} after {self.t[-1]})")
        self.t.append(int(t))
        self.features.append(float(features))
        self.wall.append(float(wall))
        self.objective.append(float(objective))
        self.gap.append(float(gap))

    def __len__(self):
        return len(self.t)

    def rows(self):
        return list(zip(self.t, self.features, self.wall, self.objective, self.gap))

    def arrays(self):
        return (np.asarray(self.t), np.asarray(self.features), np.asarray(self.wall),
                np.asarray(self.objective), np.asarray(self.gap))

    def gap_at(self, t: int) -> float:
        return self.gap[self.t.index(t)]


def average_traces(traces) -> RunTrace:
    """Pointwise mean of traces recorded at identical ``t``."""
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to average")
    ts = traces[0].t
    for tr in traces[1:]:
        if tr.t != ts:
            raise ValueError("traces are recorded at different iterations")
    out = RunTrace(meta={**traces[0].meta, "seeds": len(traces)})
    cols = [np.mean([getattr(tr, c) for tr in traces], axis=0)
            for c in ("features", "wall", "objective", "gap")]
    for row in zip(ts, *cols):
        out.append(*row)
    return out


# ---------- one iteration ----------

def _check_update(new_block, t, gamma, block):
    if not np.all(np.isfinite(new_block)):
        raise DivergenceError(f"non-finite update at t={t}, step={gamma:.3g}, block={block}",
                              t=t, step=gamma, block=block)


def _map(pool, fn, items):
    if pool is None:
        return [fn(item) for item in items]
    return list(pool.map(fn, items))


def _assert_disjoint(partition, blocks):
    seen = np.zeros(partition.p, dtype=bool)
    for b in blocks:
        sl = partition.slice(b)
        assert not seen[sl].any(), f"overlapping writes on block {b}"
        seen[sl] = True


def rapsa_iteration(x, problem, partition: BlockPartition, gamma: float, blocks, batches,
                    t: int = 0, pool=None, debug: bool = False) -> np.ndarray:
    """One synchronous RAPSA step from explicit block and batch draws.

    Returns a new array; ``x`` itself is treated as the read snapshot.
    """
    snapshot = np.asarray(x)

    def work(item):
        b, batch = item
        sl = partition.slice(b)
        new = snapshot[sl] - gamma * problem.block_gradient(snapshot, batch, sl)
        _check_update(new, t, gamma, b)
        return sl, new

    if debug:
        _assert_disjoint(partition, blocks)
    out = snapshot.copy()
    for sl, new in _map(pool, work, zip(blocks, batches)):
        out[sl] = new
    return out


def arapsa_iteration(x, problem, partition: BlockPartition, gamma: float, memories, blocks, batches,
                     t: int = 0, pool=None, debug: bool = False, curvature: str = "block") -> np.ndarray:
    """One synchronous ARAPSA step; updates ``memories`` in place.

    The gradient variation of block ``b`` is measured on its own mini-batch
    between ``x^t`` and ``x^t`` with only block ``b`` advanced
    (``curvature="block"``), or between ``x^t`` and the full ``x^{t+1}``
    (``curvature="full"``).  The two agree when ``I = 1``.  The full rule
    mixes other blocks' moves into ``r`` and is unstable for small batches.
    """
    snapshot = np.asarray(x)

    def direction(item):
        b, batch = item
        sl = partition.slice(b)
        g = problem.block_gradient(snapshot, batch, sl)
        new = snapshot[sl] - gamma * two_loop_step(memories[b], g)
        _check_update(new, t, gamma, b)
        return sl, new, g

    if debug:
        _assert_disjoint(partition, blocks)
    steps = _map(pool, direction, zip(blocks, batches))
    out = snapshot.copy()
    for sl, new, _ in steps:
        out[sl] = new

    def pair(item):
        (b, batch), (sl, new, g) = item
        if curvature == "full":
            moved = out
        else:
            moved = snapshot.copy()
            moved[sl] = new
        admit_pair(memories[b], new - snapshot[sl], problem.block_gradient(moved, batch, sl) - g)

    _map(pool, pair, zip(zip(blocks, batches), steps))
    return out


# ---------- driver ----------

class SyncRunner:
    """Holds the random streams, iterate and curvature memories of one run."""

    def __init__(self, problem, config: SyncConfig, x0=None):
        self.problem = problem
        self.config = config
        self.partition = make_partition(problem.p, config.B)
        self.coordinator = SelectionState(make_rng(config.seed, BLOCKS, 0), config.I, config.L)
        self.samplers = [SelectionState(make_rng(config.seed, SAMPLES, i), 1, config.L)
                         for i in range(config.I)]
        self.x = np.zeros(problem.p) if x0 is None else np.array(getattr(x0, "data", x0), dtype=float)
        self.memories = None
        if config.method == "arapsa":
            self.memories = [CurvatureMemory(self.partition.length(b), config.memory)
                             for b in range(config.B)]
        self.t = 0

    def draw(self):
        blocks = select_blocks(self.coordinator, self.config.B)
        if self.config.shared_batch:
            batch = sample_minibatch(self.samplers[0], self.problem.N)
            batches = [batch] * self.config.I
        else:
            batches = [sample_minibatch(s, self.problem.N) for s in self.samplers]
        return blocks, batches

    def step(self, pool=None):
        blocks, batches = self.draw()
        gamma = self.config.schedule(self.t)
        if self.memories is None:
            self.x = rapsa_iteration(self.x, self.problem, self.partition, gamma, blocks, batches,
                                     self.t, pool, self.config.debug)
        else:
            self.x = arapsa_iteration(self.x, self.problem, self.partition, gamma, self.memories,
                                      blocks, batches, self.t, pool, self.config.debug,
                                      self.config.curvature)
        self.t += 1
        return self.x


def run_sync(problem, config: SyncConfig, x0=None, f_star: float | None = None) -> RunTrace:
    """Run ``config.T`` synchronous iterations and record a trace.

    Rows are written at ``t = 0``, every ``record_every`` iterations, and at
    ``t = T``.  The final iterate is available as ``trace.final``.
    """
    if f_star is None:
        f_star = exact_optimum(problem)[1]
    runner = SyncRunner(problem, config, x0)
    p, I, B = problem.p, config.I, config.B
    trace = RunTrace(meta={"method": config.method, "p": p, "I": I, "B": B, "L": config.L,
                           "seed": config.seed, "f_star": f_star})
    F0 = problem.objective(runner.x)
    trace.append(0, 0.0, 0.0, F0, F0 - f_star)
    pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None
    start = time.perf_counter()
    try:
        for t in range(1, config.T + 1):
            try:
                runner.step(pool)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} (run seed {config.seed})", exc.t, exc.step, exc.block) from exc
            if t % config.record_every == 0 or t == config.T:
                F = problem.objective(runner.x)
                if F0 > 0 and F > DIVERGENCE_FACTOR * F0:
                    raise DivergenceError(f"objective {F:.3e} exceeds 1e6 x initial at t={t}",
                                          t=t, step=config.schedule(t - 1))
                trace.append(t, p * t * I / B, time.perf_counter() - start, F, F - f_star)
    finally:
        if pool is not None:
            pool.shutdown()
    trace.final = runner.x.copy()
    return trace
