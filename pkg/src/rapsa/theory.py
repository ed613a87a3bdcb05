"""Closed-form convergence constants and empirical rate checks.

Every calculator is a pure function of its arguments.  Bound comparisons
against measured traces use a slack factor (default 3) because the
second-moment constant ``K`` is estimated rather than certified.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Constant, Diminishing, Hybrid, format_schedule
from .errors import PreconditionError

logger = logging.getLogger(__name__)

SLACK = 3.0


def _require_positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


def sync_rate_constant(m, M, K, r, gamma0, T0, F0_gap) -> float:
    """Constant ``C`` of the ``C / (t + T0)`` bound for diminishing steps.

    Requires ``2 m r gamma0 T0 > 1``.
    """
    _require_positive(m=m, M=M, r=r, gamma0=gamma0, T0=T0)
    a = m * r * gamma0 * T0
    if not 2.0 * a > 1.0:
        raise PreconditionError(f"need 2*m*r*gamma0*T0 > 1, got {2.0 * a:.6g}")
    g = gamma0 * T0
    return max(r * M * K * g * g / (4.0 * a - 2.0), T0 * F0_gap)


def neighborhood_bound(gamma, m, M, K) -> float:
    """Steady-state gap ``gamma M K / (4 m)`` under a constant step."""
    _require_positive(gamma=gamma, m=m, M=M)
    return gamma * M * K / (4.0 * m)


def linear_rate_bound(t, gamma, m, r, F0_gap, M=None, K=None) -> float:
    """``(1 - 2 m gamma r)^t F0_gap`` plus the neighborhood term when ``M, K`` are given."""
    q = 1.0 - 2.0 * m * gamma * r
    if not 0.0 <= q < 1.0:
        raise PreconditionError(f"need 0 < 2*m*gamma*r <= 1, got {1.0 - q:.6g}")
    bound = q ** t * F0_gap
    if M is not None and K is not None:
        bound += neighborhood_bound(gamma, m, M, K)
    return bound


def min_iterations(m, M, K, r, phi, eps, F0_gap):
    """Iterations (and the matching constant step) that guarantee an ``eps`` gap.

    Returns ``(t, gamma)`` with ``gamma = 4 m phi eps / (M K)``; ``t = 0``
    when ``F0_gap`` is already at most ``(1 - phi) eps``.
    """
    if not 0.0 < phi < 1.0:
        raise ValueError("phi must lie in (0, 1)")
    _require_positive(m=m, M=M, K=K, r=r, eps=eps)
    gamma = 4.0 * m * phi * eps / (M * K)
    if F0_gap <= (1.0 - phi) * eps:
        return 0, gamma
    t = M * K / (8.0 * m * m * r * phi * eps) * math.log(F0_gap / ((1.0 - phi) * eps))
    return int(math.ceil(t - 1e-12)), gamma


def async_rate_constant(m, M, K, B, gamma0, T0, tau, rho=None, F0_gap=0.0) -> float:
    """Constant ``C`` of the asynchronous ``C / (t + T0)`` bound.

    ``rho`` defaults to ``1 / M``.  Requires ``rho M < 2`` and
    ``(2 m gamma0 T0 / B)(1 - rho M / 2) > 1``.
    """
    _require_positive(m=m, M=M, B=B, gamma0=gamma0, T0=T0)
    if rho is None:
        rho = 1.0 / M
    if rho < 0 or (rho == 0 and tau != 0):
        raise PreconditionError("rho must be positive when the delay bound is nonzero")
    if not rho * M < 2.0:
        raise PreconditionError(f"need rho*M < 2, got {rho * M:.6g}")
    g = gamma0 * T0
    denom = (2.0 * m * g / B) * (1.0 - rho * M / 2.0) - 1.0
    if not denom > 0:
        raise PreconditionError(f"need (2*m*gamma0*T0/B)*(1 - rho*M/2) > 1, got {denom + 1.0:.6g}")
    num = M * K * g * g / (2.0 * B)
    if tau:
        num += tau * tau * M * K * g ** 3 / (2.0 * rho * B * B)
    return max(num / denom, T0 * F0_gap)


@dataclass
class BoundReport:
    m: float
    M: float
    K: float
    r: float
    schedule: str
    F0_gap: float
    C_sync: float | None = None
    C_async: float | None = None
    rho: float | None = None
    neighborhood: float | None = None
    min_iterations: int | None = None
    implied_gamma: float | None = None
    slack: float = SLACK
    notes: list = field(default_factory=list)

    FIELDS = ("m", "M", "K", "r", "schedule", "F0_gap", "C_sync", "C_async", "rho",
              "neighborhood", "min_iterations", "implied_gamma", "slack")

    def to_text(self) -> str:
        lines = ["bound report"]
        for name in self.FIELDS:
            value = getattr(self, name)
            if value is None:
                continue
            text = f"{value:.6g}" if isinstance(value, float) else str(value)
            lines.append(f"  {name:15s} {text}")
        lines.extend(f"  note: {n}" for n in self.notes)
        return "\n".join(lines) + "\n"

    def to_row(self) -> dict:
        data = asdict(self)
        data.pop("notes")
        return {k: ("" if v is None else v) for k, v in data.items()}


def bound_report(constants, r, schedule, F0_gap, B=None, tau=0, rho=None,
                 phi=0.5, eps=None) -> BoundReport:
    """Collect every applicable constant for one configuration.

    Inapplicable bounds (violated preconditions) are recorded as notes rather
    than raised.
    """
    m, M, K = constants
    rep = BoundReport(m, M, K, r, format_schedule(schedule), F0_gap)
    if isinstance(schedule, Diminishing):
        try:
            rep.C_sync = sync_rate_constant(m, M, K, r, schedule.gamma0, schedule.T0, F0_gap)
        except PreconditionError as exc:
            rep.notes.append(f"sync rate bound not applicable: {exc}")
        if B is not None:
            rep.rho = 1.0 / M if rho is None else rho
            try:
                rep.C_async = async_rate_constant(m, M, K, B, schedule.gamma0, schedule.T0, tau,
                                                  rep.rho, F0_gap)
            except PreconditionError as exc:
                rep.notes.append(f"async rate bound not applicable: {exc}")
    elif isinstance(schedule, (Constant, Hybrid)):
        gamma = schedule.gamma if isinstance(schedule, Constant) else schedule.eps
        rep.neighborhood = neighborhood_bound(gamma, m, M, K)
        if not 2.0 * m * gamma * r < 1.0:
            rep.notes.append("linear rate needs 2*m*gamma*r < 1")
    if eps is not None and K > 0:
        rep.min_iterations, rep.implied_gamma = min_iterations(m, M, K, r, phi, eps, F0_gap)
    return rep


# ---------- empirical rate fitting ----------

@dataclass
class RateFit:
    slope: float
    intercept: float
    window: tuple
    regime: str  # "power" or "geometric"
    linear_rate: float | None = None
    bound_ratios: np.ndarray | None = None

    @property
    def max_bound_ratio(self):
        return None if self.bound_ratios is None else float(np.max(self.bound_ratios))


def _mean_gap(traces):
    traces = list(traces) if isinstance(traces, (list, tuple)) else [traces]
    t = np.asarray(traces[0].t, dtype=float)
    for tr in traces[1:]:
        if tr.t != traces[0].t:
            raise ValueError("traces are recorded at different iterations")
    return t, np.mean([tr.gap for tr in traces], axis=0)


def fit_rate(traces, window=(0.1, 1.0), offset: float = 0.0, C: float | None = None) -> RateFit:
    """Least-squares slope of ``log gap`` against ``log(t + offset)`` over a tail window.

    ``traces`` is a RunTrace or a list of them (averaged pointwise first).
    ``window`` gives fractions of the final ``t``.  If a semi-log fit
    (``log gap`` against ``t``) explains the window much better, the regime is
    flagged ``"geometric"`` and its per-step contraction factor reported.  With
    ``C`` the ratios ``gap / (C / (t + offset))`` over all recorded ``t > 0``
    are returned too.
    """
    t, gap = _mean_gap(traces)
    T = t[-1]
    lo, hi = window
    sel = (t >= lo * T) & (t <= hi * T) & (t > 0)
    bad = sel & ~(gap > 0)
    if bad.any():
        cut = t[np.argmax(bad)]
        logger.warning("non-positive gaps from t=%d; shrinking the fit window", cut)
        sel &= t < cut
    if sel.sum() < 3:
        raise ValueError("fewer than three usable points in the fit window")
    lt, lg, ts = np.log(t[sel] + offset), np.log(gap[sel]), t[sel]
    slope, intercept = np.polyfit(lt, lg, 1)
    rss_pow = float(np.sum((np.polyval([slope, intercept], lt) - lg) ** 2))
    lin = np.polyfit(ts, lg, 1)
    rss_lin = float(np.sum((np.polyval(lin, ts) - lg) ** 2))
    regime, linear_rate = "power", None
    if rss_lin < 0.1 * rss_pow:
        regime, linear_rate = "geometric", float(np.exp(lin[0]))
    ratios = None
    if C is not None:
        keep = t > 0
        ratios = gap[keep] / (C / (t[keep] + offset))
    return RateFit(float(slope), float(intercept), (float(ts[0]), float(ts[-1])), regime,
                   linear_rate, ratios)
