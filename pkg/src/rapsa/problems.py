"""Finite-sum objectives with block-restricted mini-batch gradients.

Two oracles are provided:

* :class:`LeastSquaresProblem` -- ``F(x) = mean_n (H_n x - z_n)^2``
* :class:`LogisticProblem` -- ``F(x) = lam/2 |x|^2 + mean_n log(1 + exp(-y_n x.z_n))``

Both are immutable after construction and safe to query from many threads.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .core import BlockPartition
from .errors import DimensionError, EmptyDatasetError, RankDeficiencyError

logger = logging.getLogger(__name__)

RIDGE = 1e-10


def _as_vector(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=float)


class _FiniteSum:
    N: int
    p: int

    def _check(self, x) -> np.ndarray:
        x = _as_vector(x)
        if x.shape != (self.p,):
            raise DimensionError(f"expected x of length {self.p}, got shape {x.shape}")
        return x

    def _check_batch(self, batch) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.intp)
        if batch.size == 0:
            raise EmptyDatasetError("mini-batch is empty")
        if batch.min() < 0 or batch.max() >= self.N:
            raise IndexError(f"sample index out of range [0, {self.N})")
        return batch

    def block_gradient(self, x, batch, sl: slice) -> np.ndarray:
        raise NotImplementedError

    def batch_gradient(self, x, batch) -> np.ndarray:
        return self.block_gradient(x, batch, slice(0, self.p))

    def gradient(self, x) -> np.ndarray:
        return self.batch_gradient(x, np.arange(self.N))

    def second_moment(self, x, L: int = 1) -> float:
        """Exact ``E |grad f(x, Theta)|^2`` for a with-replacement batch of size L."""
        G = self.sample_gradients(x)
        mean = G.mean(axis=0)
        per_sample = float(np.einsum("ij,ij->", G, G)) / self.N
        mean_sq = float(mean @ mean)
        return mean_sq + (per_sample - mean_sq) / L


@dataclass(frozen=True, eq=False)
class LeastSquaresProblem(_FiniteSum):
    H: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        H = np.ascontiguousarray(self.H, dtype=float)
        z = np.ascontiguousarray(self.z, dtype=float).reshape(-1)
        if H.ndim != 2 or H.shape[0] != z.shape[0]:
            raise DimensionError("H must be N x p and z of length N")
        if H.shape[0] == 0:
            raise EmptyDatasetError("least-squares problem has no observations")
        H.setflags(write=False)
        z.setflags(write=False)
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "z", z)

    @property
    def N(self) -> int:
        return self.H.shape[0]

    @property
    def p(self) -> int:
        return self.H.shape[1]

    def objective(self, x) -> float:
        r = self.H @ self._check(x) - self.z
        return float(r @ r) / self.N

    def batch_objective(self, x, batch) -> float:
        batch = self._check_batch(batch)
        r = self.H[batch] @ self._check(x) - self.z[batch]
        return float(r @ r) / batch.size

    def block_gradient(self, x, batch, sl: slice) -> np.ndarray:
        Hb = self.H[batch]
        r = Hb @ x - self.z[batch]
        return (2.0 / len(batch)) * (r @ Hb[:, sl])

    def sample_gradients(self, x) -> np.ndarray:
        r = self.H @ self._check(x) - self.z
        return 2.0 * r[:, None] * self.H

    def hessian(self) -> np.ndarray:
        return (2.0 / self.N) * (self.H.T @ self.H)


@dataclass(frozen=True, eq=False)
class LogisticProblem(_FiniteSum):
    Z: np.ndarray
    y: np.ndarray
    lam: float = 0.0

    def __post_init__(self):
        Z = np.ascontiguousarray(self.Z, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float).reshape(-1)
        if Z.ndim != 2 or Z.shape[0] != y.shape[0]:
            raise DimensionError("Z must be N x p and y of length N")
        if Z.shape[0] == 0:
            raise EmptyDatasetError("logistic problem has no samples")
        if not np.all(np.abs(y) == 1):
            raise ValueError("labels must be -1 or +1")
        if self.lam < 0:
            raise ValueError("regularizer must be non-negative")
        Z.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    @staticmethod
    def _loss(u):
        # log(1 + exp(-u)) without overflow
        return np.maximum(0.0, -u) + np.log1p(np.exp(-np.abs(u)))

    @staticmethod
    def _sigmoid_neg(u):
        # 1 / (1 + exp(u)), evaluated stably
        e = np.exp(-np.abs(u))
        return np.where(u >= 0, e / (1.0 + e), 1.0 / (1.0 + e))

    def objective(self, x) -> float:
        x = self._check(x)
        u = self.y * (self.Z @ x)
        return 0.5 * self.lam * float(x @ x) + float(np.mean(self._loss(u)))

    def batch_objective(self, x, batch) -> float:
        batch = self._check_batch(batch)
        x = self._check(x)
        u = self.y[batch] * (self.Z[batch] @ x)
        return 0.5 * self.lam * float(x @ x) + float(np.mean(self._loss(u)))

    def block_gradient(self, x, batch, sl: slice) -> np.ndarray:
        Zb = self.Z[batch]
        yb = self.y[batch]
        w = yb * self._sigmoid_neg(yb * (Zb @ x))
        return self.lam * x[sl] - (w @ Zb[:, sl]) / len(batch)

    def sample_gradients(self, x) -> np.ndarray:
        x = self._check(x)
        w = self.y * self._sigmoid_neg(self.y * (self.Z @ x))
        return self.lam * x[None, :] - w[:, None] * self.Z

    def hessian(self, x) -> np.ndarray:
        x = self._check(x)
        s = self._sigmoid_neg(self.y * (self.Z @ x))
        d = s * (1.0 - s)
        return self.lam * np.eye(self.p) + (self.Z.T * d) @ self.Z / self.N

    def predict(self, x, Z=None) -> np.ndarray:
        Z = self.Z if Z is None else np.asarray(Z, dtype=float)
        return np.where(Z @ _as_vector(x) >= 0, 1.0, -1.0)

    def accuracy(self, x, Z=None, y=None) -> float:
        y = self.y if y is None else np.asarray(y, dtype=float)
        return float(np.mean(self.predict(x, Z) == y))


# ---------- functional interface ----------

def full_objective(problem, x) -> float:
    return problem.objective(x)


def block_minibatch_gradient(problem, x, partition: BlockPartition, block: int, batch) -> np.ndarray:
    """Average over ``batch`` of the instantaneous gradients, restricted to ``block``."""
    if not 0 <= block < partition.B:
        raise IndexError(f"block {block} out of range [0, {partition.B})")
    if partition.p != problem.p:
        raise DimensionError("partition and problem dimensions differ")
    x = problem._check(x)
    batch = problem._check_batch(batch)
    return problem.block_gradient(x, batch, partition.slice(block))


def exact_optimum(problem, ridge_fallback: bool = True, tol: float = 1e-10, max_iter: int = 100):
    """Return ``(x_star, F_star)``.

    Least squares solves the normal equations directly; when ``H^T H`` is
    numerically singular a ``1e-10 * I`` ridge is added (with a warning) or,
    if ``ridge_fallback`` is false, :class:`RankDeficiencyError` is raised.
    Logistic regression runs damped Newton until the gradient norm is below
    ``tol``.
    """
    if isinstance(problem, LeastSquaresProblem):
        A = problem.H.T @ problem.H
        rhs = problem.H.T @ problem.z
        if np.linalg.matrix_rank(A) < problem.p:
            if not ridge_fallback:
                raise RankDeficiencyError("H^T H is singular")
            warnings.warn("H^T H is rank deficient; adding a 1e-10 ridge to the exact solve",
                          RuntimeWarning, stacklevel=2)
            A = A + (0.5 * problem.N * RIDGE) * np.eye(problem.p)
        x = np.linalg.solve(A, rhs)
        # one refinement step on the normal equations
        x = x + np.linalg.solve(A, rhs - A @ x)
        return x, problem.objective(x)

    if isinstance(problem, LogisticProblem):
        if problem.lam <= 0:
            raise RankDeficiencyError("logistic optimum needs a positive regularizer")
        x = np.zeros(problem.p)
        for _ in range(max_iter):
            g = problem.gradient(x)
            gnorm = np.linalg.norm(g)
            if gnorm <= tol:
                break
            step = np.linalg.solve(problem.hessian(x), g)
            a = 1.0
            if gnorm > 1e-6:
                # backtrack far from the optimum; full Newton steps near it
                F = problem.objective(x)
                while a > 1e-8 and problem.objective(x - a * step) > F - 1e-4 * a * float(g @ step):
                    a *= 0.5
            x = x - a * step
        else:
            logger.warning("Newton solve stopped at max_iter with |grad| = %.3e",
                           np.linalg.norm(problem.gradient(x)))
        return x, problem.objective(x)

    raise TypeError(f"no exact solver for {type(problem).__name__}")


@dataclass(frozen=True)
class Constants:
    m: float
    M: float
    K: float

    def __iter__(self):
        return iter((self.m, self.M, self.K))


def estimate_constants(problem, points=None, batch_size: int = 1) -> Constants:
    """Strong convexity ``m``, gradient Lipschitz ``M`` and second-moment ``K``.

    ``m`` and ``M`` are exact for least squares (extreme eigenvalues of the
    average Hessian).  For logistic regression ``m = lam`` and ``M`` uses the
    1/4 curvature bound of the logistic loss.  ``K`` is the largest exact
    second moment ``E|grad f(x, Theta)|^2`` over the supplied ``points``
    (defaults to the optimum); it is an estimate of the global constant,
    not a certificate.
    """
    if isinstance(problem, LeastSquaresProblem):
        eig = np.linalg.eigvalsh(problem.hessian())
        m, M = float(eig[0]), float(eig[-1])
    elif isinstance(problem, LogisticProblem):
        top = float(np.linalg.eigvalsh(problem.Z.T @ problem.Z / problem.N)[-1])
        m, M = problem.lam, problem.lam + 0.25 * top
    else:
        raise TypeError(f"no constants for {type(problem).__name__}")
    if points is None:
        points = [exact_optimum(problem)[0]]
    K = max(problem.second_moment(x, batch_size) for x in points)
    return Constants(m, M, float(K))


def check_gradient(problem, x, partition: BlockPartition, batch, h: float = 1e-5) -> float:
    """Largest relative error between block gradients and central differences."""
    x = problem._check(x).copy()
    batch = problem._check_batch(batch)
    analytic = np.concatenate([block_minibatch_gradient(problem, x, partition, b, batch)
                               for b in range(partition.B)])
    numeric = np.empty(problem.p)
    for j in range(problem.p):
        e = np.zeros(problem.p)
        e[j] = h
        numeric[j] = (problem.batch_objective(x + e, batch) - problem.batch_objective(x - e, batch)) / (2 * h)
    scale = max(np.linalg.norm(numeric), 1e-300)
    return float(np.linalg.norm(analytic - numeric) / scale)
