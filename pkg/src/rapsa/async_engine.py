"""Asynchronous RAPSA / ARAPSA.

Two execution modes share the update rules:

``simulate_async``
    Deterministic event-driven reference.  Time is a global integer index
    ``t``; processor ``i`` reads the snapshot ``x^t``, draws a delay ``d``
    from a :class:`DelayModel`, and its write is applied in the transition
    that produces ``x^{t+d}`` with the step size of that transition.
    Writes landing in the same transition on the same block form a
    conflict group, of which exactly one survives.

``run_async_threads``
    Real threads sharing one parameter vector.  Reads may tear across
    blocks; block commits are serialized per block and concurrent writers
    of one block are arbitrated by the same random overwrite rule.  Not
    deterministic.
"""
from __future__ import annotations

import heapq
import logging
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np

from .core import (BLOCKS, COIN, DELAY, SAMPLES, SelectionState, make_partition, make_rng,
                   sample_minibatch, select_blocks)
from .engine import DIVERGENCE_FACTOR, RunTrace, SyncConfig
from .errors import ConfigurationError, DivergenceError, StallError
from .problems import exact_optimum
from .quasi_newton import CurvatureMemory, _two_loop, admit_pair

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DelayModel:
    """Normal(mu, sigma^2) compute times, rounded and clipped to ``[1, delta_max]``."""
    mu: float
    sigma: float
    delta_max: int

    def __post_init__(self):
        if self.delta_max < 1:
            raise ConfigurationError("delay bound must be >= 1")
        if self.sigma < 0:
            raise ConfigurationError("delay standard deviation must be >= 0")

    def sample(self, rng: np.random.Generator, size=None):
        d = np.clip(np.rint(rng.normal(self.mu, self.sigma, size)), 1, self.delta_max)
        return d.astype(np.int64) if size is not None else int(d)


@dataclass
class AsyncEvent:
    processor: int
    read_time: int
    write_time: int
    block: int
    batch: np.ndarray
    direction: np.ndarray
    grad: np.ndarray | None = None
    x_read: np.ndarray | None = None  # read snapshot (ARAPSA only)


def resolve_conflict(writers, rng: np.random.Generator):
    """Pick the single surviving write among ``C`` concurrent writers, uniformly."""
    if not writers:
        raise ValueError("no writers to arbitrate")
    if len(writers) == 1:
        return writers[0]
    return writers[int(rng.integers(len(writers)))]


def async_block_update(problem, x_now, x_read, sl, batch, gamma):
    """Apply one stale block step: ``x_now[sl] - gamma * grad_b f(x_read, batch)``."""
    out = np.array(x_now, dtype=float)
    out[sl] -= gamma * problem.block_gradient(np.asarray(x_read), batch, sl)
    return out


def async_arapsa_update_pairs(memory: CurvatureMemory, x_read, x_committed, g_read,
                              problem, batch, sl, curvature: str = "block") -> bool:
    """Form and admit the pair for a committed asynchronous ARAPSA write.

    ``v`` is the block's change between the writer's read snapshot and the
    committed iterate.  ``r`` is the change of the block gradient on the
    writer's own mini-batch, evaluated at the read snapshot with only this
    block advanced (``"block"``) or at the full committed iterate (``"full"``).
    """
    x_read = np.asarray(x_read)
    x_committed = np.asarray(x_committed)
    if curvature == "full":
        moved = x_committed
    else:
        moved = x_read.copy()
        moved[sl] = x_committed[sl]
    v = x_committed[sl] - x_read[sl]
    r = problem.block_gradient(moved, batch, sl) - g_read
    return admit_pair(memory, v, r)


def _validate(config: SyncConfig):
    if config.method == "arapsa" and config.memory < 1:
        raise ConfigurationError("asynchronous ARAPSA needs curvature memory >= 1")


def simulate_async(problem, config: SyncConfig, delay: DelayModel, x0=None,
                   f_star: float | None = None) -> RunTrace:
    """Event-driven simulation of ``config.I`` asynchronous processors for ``config.T`` steps.

    Processor ``i`` owns block, sample and delay streams indexed by ``i``;
    conflict coins come from a separate stream, so runs are replayable.  The
    trace's ``features_processed`` column counts committed coordinates.
    """
    _validate(config)
    if f_star is None:
        f_star = exact_optimum(problem)[1]
    part = make_partition(problem.p, config.B)
    arapsa = config.method == "arapsa"
    pickers = [SelectionState(make_rng(config.seed, BLOCKS, i), 1, config.L) for i in range(config.I)]
    samplers = [SelectionState(make_rng(config.seed, SAMPLES, i), 1, config.L) for i in range(config.I)]
    clocks = [make_rng(config.seed, DELAY, i) for i in range(config.I)]
    coin = make_rng(config.seed, COIN, 0)
    memories = [CurvatureMemory(part.length(b), config.memory) for b in range(config.B)] if arapsa else None

    x = np.zeros(problem.p) if x0 is None else np.array(getattr(x0, "data", x0), dtype=float)
    trace = RunTrace(meta={"method": "async-" + config.method, "p": problem.p, "I": config.I,
                           "B": config.B, "L": config.L, "seed": config.seed, "f_star": f_star,
                           "mu": delay.mu, "sigma": delay.sigma, "delta_max": delay.delta_max})
    F0 = problem.objective(x)
    trace.append(0, 0.0, 0.0, F0, F0 - f_star)

    pending: list = []  # heap of (write_time, processor, event)
    idle = list(range(config.I))
    commits = groups = conflicts = features = 0
    max_staleness = 0
    start = time.perf_counter()

    for t in range(config.T):
        for i in idle:
            b = int(select_blocks(pickers[i], config.B)[0])
            batch = sample_minibatch(samplers[i], problem.N)
            sl = part.slice(b)
            g = problem.block_gradient(x, batch, sl)
            if arapsa:
                pairs, eta = memories[b].snapshot()
                ev = AsyncEvent(i, t, t + delay.sample(clocks[i]), b, batch, _two_loop(pairs, eta, g),
                                g, x.copy())
            else:
                ev = AsyncEvent(i, t, t + delay.sample(clocks[i]), b, batch, g)
            heapq.heappush(pending, (ev.write_time, i, ev))
        idle = []

        # writes landing in the transition x^t -> x^{t+1}
        landing = []
        while pending and pending[0][0] == t + 1:
            landing.append(heapq.heappop(pending)[2])
        if landing:
            gamma = config.schedule(t)
            by_block: dict = {}
            for ev in landing:
                by_block.setdefault(ev.block, []).append(ev)
                idle.append(ev.processor)
            survivors = []
            for b in sorted(by_block):
                group = by_block[b]
                winner = resolve_conflict(group, coin)
                staleness = winner.write_time - winner.read_time
                assert 1 <= staleness <= delay.delta_max, f"staleness {staleness} outside [1, {delay.delta_max}]"
                max_staleness = max(max_staleness, staleness)
                sl = part.slice(b)
                new = x[sl] - gamma * winner.direction
                if not np.all(np.isfinite(new)):
                    raise DivergenceError(f"non-finite update at t={t}, step={gamma:.3g}, block={b}",
                                          t=t, step=gamma, block=b)
                x[sl] = new
                survivors.append(winner)
                groups += 1
                conflicts += len(group) > 1
                features += sl.stop - sl.start
            commits += len(survivors)
            if arapsa:
                for ev in survivors:
                    async_arapsa_update_pairs(memories[ev.block], ev.x_read, x, ev.grad,
                                              problem, ev.batch, part.slice(ev.block), config.curvature)
            idle.sort()

        step = t + 1
        if step % config.record_every == 0 or step == config.T:
            F = problem.objective(x)
            if F0 > 0 and F > DIVERGENCE_FACTOR * F0:
                raise DivergenceError(f"objective {F:.3e} exceeds 1e6 x initial at t={step}", t=step)
            trace.append(step, features, time.perf_counter() - start, F, F - f_star)

    assert commits == groups
    trace.meta.update(commits=commits, conflict_groups=conflicts, max_staleness=max_staleness)
    trace.final = x
    return trace


# ---------- threaded mode ----------

class _Group:
    __slots__ = ("members", "results")

    def __init__(self):
        self.members = 0
        self.results = []


class _Shared:
    def __init__(self, problem, config, x, part, memories):
        self.problem = problem
        self.config = config
        self.x = x
        self.part = part
        self.memories = memories
        self.locks = [threading.Lock() for _ in range(config.B)]
        self.open_groups = [None] * config.B
        self.counter_lock = threading.Lock()
        self.commits = 0
        self.conflict_groups = 0
        self.stop = threading.Event()
        self.error: BaseException | None = None
        self.heartbeat = [time.monotonic()] * config.I
        self.records: queue.Queue = queue.Queue()


def _worker(shared: _Shared, i: int):
    cfg, problem, part = shared.config, shared.problem, shared.part
    picker = SelectionState(make_rng(cfg.seed, BLOCKS, i), 1, cfg.L)
    sampler = SelectionState(make_rng(cfg.seed, SAMPLES, i), 1, cfg.L)
    coin = make_rng(cfg.seed, COIN, i)
    arapsa = shared.memories is not None
    try:
        while not shared.stop.is_set():
            shared.heartbeat[i] = time.monotonic()
            b = int(select_blocks(picker, cfg.B)[0])
            sl = part.slice(b)
            batch = sample_minibatch(sampler, problem.N)
            lock = shared.locks[b]
            with lock:
                group = shared.open_groups[b]
                if group is None:
                    group = shared.open_groups[b] = _Group()
                group.members += 1
                if arapsa:
                    pairs, eta = shared.memories[b].snapshot()
            x_read = shared.x.copy()  # may tear across blocks
            g = problem.block_gradient(x_read, batch, sl)
            d = _two_loop(pairs, eta, g) if arapsa else g
            with lock:
                group.results.append((d, g, x_read, batch))
                if shared.open_groups[b] is group:
                    shared.open_groups[b] = None  # later arrivals start a new group
                if len(group.results) < group.members:
                    continue  # another writer of this block is still computing
                d, g, w_read, wbatch = resolve_conflict(group.results, coin)
                with shared.counter_lock:
                    if shared.commits >= cfg.T:
                        shared.stop.set()
                        break
                    k = shared.commits
                    shared.commits += 1
                    shared.conflict_groups += len(group.results) > 1
                gamma = cfg.schedule(k)
                new = shared.x[sl] - gamma * d
                if not np.all(np.isfinite(new)):
                    raise DivergenceError(f"non-finite update at commit {k}, step={gamma:.3g}, block={b}",
                                          t=k, step=gamma, block=b)
                shared.x[sl] = new
                if arapsa:
                    async_arapsa_update_pairs(shared.memories[b], w_read, shared.x.copy(), g,
                                              problem, wbatch, sl, cfg.curvature)
                if (k + 1) % cfg.record_every == 0 or k + 1 == cfg.T:
                    shared.records.put((k + 1, shared.x.copy(), time.perf_counter()))
                if k + 1 >= cfg.T:
                    shared.stop.set()
    except BaseException as exc:  # surfaced by the coordinating thread
        shared.error = exc
        shared.stop.set()


def run_async_threads(problem, config: SyncConfig, x0=None, f_star: float | None = None,
                      stall_timeout: float = 60.0) -> RunTrace:
    """Lock-free run with ``config.I`` OS threads until ``config.T`` block commits.

    The trace index is the global commit counter.  Raises :class:`StallError`
    if a thread makes no progress for ``stall_timeout`` seconds.
    """
    _validate(config)
    if f_star is None:
        f_star = exact_optimum(problem)[1]
    part = make_partition(problem.p, config.B)
    memories = None
    if config.method == "arapsa":
        memories = [CurvatureMemory(part.length(b), config.memory) for b in range(config.B)]
    x = np.zeros(problem.p) if x0 is None else np.array(getattr(x0, "data", x0), dtype=float)
    shared = _Shared(problem, config, x, part, memories)
    trace = RunTrace(meta={"method": "threads-" + config.method, "p": problem.p, "I": config.I,
                           "B": config.B, "L": config.L, "seed": config.seed, "f_star": f_star})
    F0 = problem.objective(x)
    trace.append(0, 0.0, 0.0, F0, F0 - f_star)

    start = time.perf_counter()
    threads = [threading.Thread(target=_worker, args=(shared, i), daemon=True, name=f"rapsa-{i}")
               for i in range(config.I)]
    for th in threads:
        th.start()
    records = []
    while any(th.is_alive() for th in threads):
        try:
            records.append(shared.records.get(timeout=0.05))
        except queue.Empty:
            pass
        now = time.monotonic()
        if not shared.stop.is_set() and max(now - h for h in shared.heartbeat) > stall_timeout:
            shared.stop.set()
            raise StallError(f"a worker made no progress for {stall_timeout:.0f} s")
    for th in threads:
        th.join()
    while not shared.records.empty():
        records.append(shared.records.get())
    if shared.error is not None:
        raise shared.error

    block_len = problem.p / config.B
    for k, xk, stamp in sorted(records, key=lambda rec: rec[0]):
        F = problem.objective(xk)
        if F0 > 0 and F > DIVERGENCE_FACTOR * F0:
            raise DivergenceError(f"objective {F:.3e} exceeds 1e6 x initial at commit {k}", t=k)
        trace.append(k, k * block_len, stamp - start, F, F - f_star)
    trace.meta.update(commits=shared.commits, conflict_groups=shared.conflict_groups)
    trace.final = shared.x.copy()
    return trace
