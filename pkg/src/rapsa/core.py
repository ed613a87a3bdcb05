"""Shared building blocks: block partitions, step-size schedules and seeded
selection of blocks and mini-batches.

All randomness is drawn from Philox streams keyed by ``(seed, role, index)``
so every logical processor owns an independent, replayable stream.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, EmptyDatasetError

# stream roles for make_rng
BLOCKS = 0
SAMPLES = 1
COIN = 2
DELAY = 3
DATA = 4


def make_rng(seed: int, role: int = 0, index: int = 0) -> np.random.Generator:
    """Counter-based generator for one ``(role, index)`` stream of a run seed."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(role, index))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class BlockPartition:
    p: int
    B: int
    offsets: tuple  # ((start, length), ...)

    def __post_init__(self):
        total = 0
        for start, length in self.offsets:
            if start != total or length <= 0:
                raise ConfigurationError("block ranges must be contiguous and non-empty")
            total += length
        if total != self.p or len(self.offsets) != self.B:
            raise ConfigurationError("block ranges do not cover [0, p)")

    def slice(self, b: int) -> slice:
        start, length = self.offsets[b]
        return slice(start, start + length)

    def length(self, b: int) -> int:
        return self.offsets[b][1]

    @property
    def slices(self) -> list:
        return [self.slice(b) for b in range(self.B)]


def make_partition(p: int, B: int) -> BlockPartition:
    """Split ``p`` coordinates into ``B`` contiguous near-equal blocks.

    The first ``p % B`` blocks receive one extra coordinate.
    """
    p, B = int(p), int(B)
    if B < 1 or p < 1 or B > p:
        raise ConfigurationError(f"need 1 <= B <= p, got p={p}, B={B}")
    base, extra = divmod(p, B)
    offsets = []
    start = 0
    for b in range(B):
        length = base + (1 if b < extra else 0)
        offsets.append((start, length))
        start += length
    return BlockPartition(p, B, tuple(offsets))


class ParamVector:
    """A dense decision variable with a block overlay."""

    def __init__(self, data, partition: BlockPartition):
        data = np.array(data, dtype=float)
        if data.ndim != 1 or data.shape[0] != partition.p:
            raise DimensionError(f"expected a vector of length {partition.p}, got shape {data.shape}")
        self.data = data
        self.partition = partition

    def block(self, b: int) -> np.ndarray:
        return self.data[self.partition.slice(b)]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def copy(self) -> "ParamVector":
        return ParamVector(self.data.copy(), self.partition)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"ParamVector(p={self.partition.p}, B={self.partition.B})"


# ---------- step-size schedules ----------

@dataclass(frozen=True)
class Constant:
    gamma: float

    def __post_init__(self):
        _positive(gamma=self.gamma)

    def __call__(self, t: int) -> float:
        return self.gamma


@dataclass(frozen=True)
class Diminishing:
    """gamma0 * T0 / (t + T0)"""
    gamma0: float
    T0: float

    def __post_init__(self):
        _positive(gamma0=self.gamma0, T0=self.T0)

    def __call__(self, t: int) -> float:
        return self.gamma0 * self.T0 / (t + self.T0)


@dataclass(frozen=True)
class Hybrid:
    """min(eps, eps * T0 / t); returns eps at t = 0."""
    eps: float
    T0: float

    def __post_init__(self):
        _positive(eps=self.eps, T0=self.T0)

    def __call__(self, t: int) -> float:
        if t <= 0:
            return self.eps
        return min(self.eps, self.eps * self.T0 / t)


StepSchedule = Constant | Diminishing | Hybrid


def _positive(**params):
    for name, value in params.items():
        if not (value > 0 and np.isfinite(value)):
            raise ConfigurationError(f"schedule parameter {name} must be positive, got {value}")


def step_size(schedule, t: int) -> float:
    if t < 0:
        raise ConfigurationError("iteration index must be non-negative")
    return schedule(t)


def parse_schedule(text: str):
    """Parse ``constant:g``, ``diminishing:g0,T0`` or ``hybrid:eps,T0``."""
    kind, _, args = text.strip().partition(":")
    try:
        values = [float(v) for v in args.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"bad schedule parameters in {text!r}") from None
    kinds = {"constant": (Constant, 1), "diminishing": (Diminishing, 2), "hybrid": (Hybrid, 2)}
    if kind.strip().lower() not in kinds:
        raise ConfigurationError(f"unknown schedule {kind!r}")
    cls, nargs = kinds[kind.strip().lower()]
    if len(values) != nargs:
        raise ConfigurationError(f"schedule {kind!r} takes {nargs} parameter(s)")
    return cls(*values)


def format_schedule(schedule) -> str:
    if isinstance(schedule, Constant):
        return f"constant:{schedule.gamma!r}"
    if isinstance(schedule, Diminishing):
        return f"diminishing:{schedule.gamma0!r},{schedule.T0!r}"
    return f"hybrid:{schedule.eps!r},{schedule.T0!r}"


# ---------- selection ----------

@dataclass
class SelectionState:
    """Random source of one logical processor (or of the block coordinator)."""
    rng: np.random.Generator
    I: int = 1
    L: int = 1
    draws: int = field(default=0, repr=False)

    def __post_init__(self):
        if self.I < 1 or self.L < 1:
            raise ConfigurationError("need I >= 1 and L >= 1")

    @classmethod
    def from_seed(cls, seed: int, I: int = 1, L: int = 1, role: int = BLOCKS, index: int = 0):
        return cls(make_rng(seed, role, index), I, L)


def select_blocks(state: SelectionState, B: int) -> np.ndarray:
    """Draw ``state.I`` distinct blocks uniformly (partial Fisher-Yates).

    Entry ``i`` of the result is the block assigned to processor ``i``.
    """
    I = state.I
    if I > B:
        raise ConfigurationError(f"cannot select I={I} distinct blocks out of B={B}")
    perm = np.arange(B)
    picks = state.rng.integers(np.arange(I), B)
    for j, k in enumerate(picks):
        perm[j], perm[k] = perm[k], perm[j]
    state.draws += 1
    return perm[:I].copy()


def sample_minibatch(state: SelectionState, N: int) -> np.ndarray:
    """``L`` indices drawn uniformly with replacement from ``range(N)``."""
    if N < 1:
        raise EmptyDatasetError("cannot sample a mini-batch from an empty dataset")
    state.draws += 1
    return state.rng.integers(0, N, size=state.L)


def coverage(partition: BlockPartition) -> Sequence[int]:
    """Concatenation of all block index ranges, in order."""
    out = []
    for start, length in partition.offsets:
        out.extend(range(start, start + length))
    return out
