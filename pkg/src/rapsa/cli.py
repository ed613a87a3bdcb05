"""Experiment runner.

Configuration is an INI file (format version 1)::

    [experiment]
    version = 1
    algorithm = rapsa          ; rapsa | arapsa | async-rapsa | async-arapsa
    T = 10000
    seeds = 0-19               ; ranges and comma lists
    record_every = 100
    threshold = 1e-3           ; absolute gap for iterations-to (optional)

    [problem]
    kind = synthetic-linear    ; synthetic-linear | ill-conditioned | logistic-synthetic | logistic-mnist
    p = 128
    N = 1000

    [blocks]
    B = 4, 8, 16, 32
    I = 4
    L = 10

    [schedule]
    step = constant:0.01       ; constant:g | diminishing:g0,T0 | hybrid:eps,T0

    [delay]                    ; async algorithms only
    mu = 2
    sigma = 0.3
    delta_max = 10

    [output]
    dir = runs/example

See README.md for every key.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .async_engine import DelayModel, run_async_threads, simulate_async
from .core import format_schedule, parse_schedule
from .data_io import (MNIST_ENV, SyntheticSpec, binary_filter, find_mnist, generate_linear_problem,
                      ill_conditioned_problem, load_idx, read_trace_csv, train_test_split, two_gaussians,
                      write_trace_csv)
from .engine import SyncConfig, average_traces, run_sync
from .errors import ConfigurationError, RapsaError
from .problems import LogisticProblem, estimate_constants, exact_optimum
from .theory import bound_report

logger = logging.getLogger("rapsa")

CONFIG_VERSION = 1
ALGORITHMS = ("rapsa", "arapsa", "async-rapsa", "async-arapsa")
PROBLEM_KINDS = ("synthetic-linear", "ill-conditioned", "logistic-synthetic", "logistic-mnist")
NOT_REACHED = "not reached by T"


def _int_list(text: str) -> list:
    out = []
    for part in text.replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


@dataclass
class ExperimentConfig:
    algorithm: str = "rapsa"
    T: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    record_every: int = 1
    threshold: float | None = None
    problem: dict = field(default_factory=lambda: {"kind": "synthetic-linear"})
    B: list = field(default_factory=lambda: [8])
    I: int = 1
    L: int = 1
    memory: int | None = None
    curvature: str = "block"
    schedule: object = None
    delay: DelayModel | None = None
    delay_mode: str = "simulated"
    out_dir: str = "runs"

    @property
    def is_async(self) -> bool:
        return self.algorithm.startswith("async-")

    @property
    def method(self) -> str:
        return self.algorithm.removeprefix("async-")

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"experiment.algorithm: expected one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.T < 1:
            raise ConfigurationError("experiment.T: must be >= 1")
        if not self.seeds:
            raise ConfigurationError("experiment.seeds: at least one seed required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("experiment.seeds: duplicate seeds")
        if self.record_every < 1:
            raise ConfigurationError("experiment.record_every: must be >= 1")
        if self.problem.get("kind") not in PROBLEM_KINDS:
            raise ConfigurationError(f"problem.kind: expected one of {PROBLEM_KINDS}, got {self.problem.get('kind')!r}")
        if not self.B or any(b < 1 for b in self.B):
            raise ConfigurationError("blocks.B: need a non-empty list of positive block counts")
        if any(self.I > b for b in self.B):
            raise ConfigurationError(f"blocks.I: I={self.I} exceeds the smallest B={min(self.B)}")
        if self.L < 1:
            raise ConfigurationError("blocks.L: must be >= 1")
        if self.method == "rapsa" and self.memory is not None:
            raise ConfigurationError("blocks.memory: curvature memory only applies to arapsa")
        if self.method == "arapsa" and (self.memory or 0) < 1:
            raise ConfigurationError("blocks.memory: arapsa needs memory >= 1")
        if self.schedule is None:
            raise ConfigurationError("schedule.step: missing")
        if self.is_async and self.delay is None:
            raise ConfigurationError("delay: async algorithms need a [delay] section")
        if not self.is_async and self.delay is not None:
            raise ConfigurationError("delay: [delay] only applies to async algorithms")
        if self.delay_mode not in ("simulated", "threads"):
            raise ConfigurationError("delay.mode: expected 'simulated' or 'threads'")
        return self

    def sync_config(self, B: int, seed: int, threads: int = 1) -> SyncConfig:
        return SyncConfig(I=self.I, B=B, L=self.L, schedule=self.schedule, T=self.T, seed=seed,
                          method=self.method, memory=self.memory or 1, record_every=self.record_every,
                          threads=threads, curvature=self.curvature)


def load_config(path) -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as fh:
        parser.read_file(fh)
    for section in ("experiment", "problem", "blocks", "schedule"):
        if not parser.has_section(section):
            raise ConfigurationError(f"missing [{section}] section")
    ex = parser["experiment"]
    version = ex.getint("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigurationError(f"experiment.version: unsupported config version {version}")
    try:
        cfg = ExperimentConfig(
            algorithm=ex.get("algorithm", "rapsa").strip().lower(),
            T=ex.getint("T"),
            seeds=_int_list(ex.get("seeds", "0")),
            record_every=ex.getint("record_every", 1),
            threshold=ex.getfloat("threshold", None),
            problem=dict(parser["problem"]),
            B=_int_list(parser["blocks"].get("B")),
            I=parser["blocks"].getint("I", 1),
            L=parser["blocks"].getint("L", 1),
            memory=parser["blocks"].getint("memory", None),
            curvature=parser["blocks"].get("curvature", "block"),
            schedule=parse_schedule(parser["schedule"]["step"]),
            out_dir=parser.get("output", "dir", fallback="runs"),
        )
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigurationError(f"bad config value: {exc}") from None
    if parser.has_section("delay"):
        d = parser["delay"]
        try:
            cfg.delay = DelayModel(d.getfloat("mu"), d.getfloat("sigma", 0.0), d.getint("delta_max"))
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"delay: need numeric mu, sigma and delta_max ({exc})") from None
        cfg.delay_mode = d.get("mode", "simulated")
    return cfg.validate()


# ---------- problems ----------

@dataclass
class ProblemBundle:
    problem: object
    x_star: np.ndarray
    f_star: float
    test: tuple | None = None  # (Z, y) held out, logistic only
    description: str = ""


def build_problem(spec: dict) -> ProblemBundle:
    spec = {k.lower(): v for k, v in spec.items()}
    kind = spec.get("kind")
    seed = int(spec.get("seed", 0))
    if kind == "synthetic-linear":
        p, N = int(spec.get("p", 128)), int(spec.get("n", 1000))
        problem, _ = generate_linear_problem(SyntheticSpec(p, N, float(spec.get("noise_variance", 1e-2)), seed))
        desc = f"synthetic linear regression p={p} N={N}"
        test = None
    elif kind == "ill-conditioned":
        p, N = int(spec.get("p", 64)), int(spec.get("n", 1000))
        cond = float(spec.get("condition", 1e3))
        problem, _ = ill_conditioned_problem(p, N, cond, seed)
        desc = f"ill-conditioned least squares p={p} N={N} condition={cond:g}"
        test = None
    elif kind in ("logistic-synthetic", "logistic-mnist"):
        if kind == "logistic-synthetic":
            p, N = int(spec.get("p", 50)), int(spec.get("n", 4000))
            Z, y = two_gaussians(p, N, float(spec.get("separation", 5.0)), seed)
            n_total = N
            Ztr, ytr, Zte, yte = train_test_split(Z, y, float(spec.get("train_fraction", 0.75)),
                                                  int(spec.get("split_seed", 0)))
        else:
            paths = find_mnist(spec.get("mnist_dir"))
            if paths is None:
                raise ConfigurationError(f"problem.mnist_dir: MNIST files not found (set it or {MNIST_ENV})")
            neg, pos = _int_list(spec.get("digits", "0,8"))
            Ztr, ytr = binary_filter(load_idx(paths["train_images"], paths["train_labels"]), neg, pos)
            Zte, yte = binary_filter(load_idx(paths["test_images"], paths["test_labels"]), neg, pos)
            n_total = len(ytr)
        lam = float(spec["lam"]) if "lam" in spec else 1.0 / math.sqrt(n_total)
        problem = LogisticProblem(Ztr, ytr, lam)
        desc = f"{kind} p={problem.p} N={problem.N} lam={lam:.4g}"
        test = (Zte, yte)
    else:
        raise ConfigurationError(f"problem.kind: unknown kind {kind!r}")
    x_star, f_star = exact_optimum(problem)
    return ProblemBundle(problem, x_star, f_star, test, desc)


# ---------- comparisons ----------

def iterations_to(trace, eps):
    """First recorded ``(t, features)`` with gap <= eps, or ``None``."""
    for t, feat, gap in zip(trace.t, trace.features, trace.gap):
        if gap <= eps:
            return t, feat
    return None


def _ratio(a, b):
    if a is None or b is None:
        return NOT_REACHED
    if b == 0:
        return 1.0 if a == 0 else math.inf
    return a / b


def compare_runs(trace_a, trace_b, eps: float) -> dict:
    """Iterations, features processed and final gap of two traces, with a/b ratios."""
    hit_a, hit_b = iterations_to(trace_a, eps), iterations_to(trace_b, eps)
    it_a, ft_a = hit_a if hit_a else (None, None)
    it_b, ft_b = hit_b if hit_b else (None, None)
    return {
        "eps": eps,
        "iterations_to": (it_a if hit_a else NOT_REACHED, it_b if hit_b else NOT_REACHED),
        "features_to": (ft_a if hit_a else NOT_REACHED, ft_b if hit_b else NOT_REACHED),
        "final_gap": (trace_a.gap[-1], trace_b.gap[-1]),
        "iterations_ratio": _ratio(it_a, it_b),
        "features_ratio": _ratio(ft_a, ft_b),
        "final_gap_ratio": _ratio(trace_a.gap[-1], trace_b.gap[-1]),
    }


# ---------- running ----------

def _run_cell(cfg: ExperimentConfig, bundle: ProblemBundle, B: int, seed: int, threads: int):
    sc = cfg.sync_config(B, seed, threads)
    if not cfg.is_async:
        return run_sync(bundle.problem, sc, f_star=bundle.f_star)
    if cfg.delay_mode == "threads":
        return run_async_threads(bundle.problem, replace(sc, threads=1), f_star=bundle.f_star)
    return simulate_async(bundle.problem, sc, cfg.delay, f_star=bundle.f_star)


def compute_bounds(cfg: ExperimentConfig, bundle: ProblemBundle) -> dict:
    constants = estimate_constants(bundle.problem, [bundle.x_star], cfg.L)
    F0_gap = bundle.problem.objective(np.zeros(bundle.problem.p)) - bundle.f_star
    reports = {}
    for B in cfg.B:
        rep = bound_report(constants, cfg.I / B, cfg.schedule, F0_gap, B=B if cfg.is_async else None,
                           tau=cfg.delay.delta_max if cfg.delay else 0, eps=cfg.threshold)
        rep.notes.append("K is the second moment at the optimum; bound checks apply the slack factor")
        reports[B] = rep
    return reports


def _write_manifest(path, manifest):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["B", "seed", "status", "file"])
        for row in manifest:
            w.writerow(row)


def run_experiment(cfg: ExperimentConfig, out_dir=None, threads: int = 1) -> dict:
    """Run every (B, seed) cell, write traces, bounds, metrics and a summary.

    Returns a dict with the averaged traces, bound reports and any failures.
    A manifest of cell status is rewritten after each cell so an interrupted
    sweep leaves a record of what completed.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = build_problem(cfg.problem)
    logger.info("problem: %s, F* = %.10g", bundle.description, bundle.f_star)
    reports = compute_bounds(cfg, bundle)
    with open(out / "bounds.txt", "w") as fh:
        for B, rep in reports.items():
            fh.write(f"[B={B}]\n{rep.to_text()}\n")

    cells = [(B, s) for B in cfg.B for s in cfg.seeds]
    manifest, traces, failures = [], {}, []
    # a multi-cell sweep parallelizes over cells; a single cell over blocks
    cell_threads, block_threads = (threads, 1) if len(cells) > 1 else (1, threads)

    def job(cell):
        B, seed = cell
        return cell, _run_cell(cfg, bundle, B, seed, block_threads)

    with ThreadPoolExecutor(max_workers=cell_threads) as pool:
        futures = [pool.submit(job, c) for c in cells]
        for fut, (B, seed) in zip(futures, cells):
            name = f"trace_B{B}_seed{seed}.csv"
            try:
                _, trace = fut.result()
            except RapsaError as exc:
                logger.error("cell B=%d seed=%d failed: %s", B, seed, exc)
                failures.append((B, seed, str(exc)))
                manifest.append((B, seed, f"failed: {exc}", ""))
            else:
                write_trace_csv(trace, out / name)
                traces[(B, seed)] = trace
                manifest.append((B, seed, "ok", name))
            _write_manifest(out / "manifest.csv", manifest)

    averaged, rows = {}, []
    for B in cfg.B:
        done = [traces[(B, s)] for s in cfg.seeds if (B, s) in traces]
        if not done:
            continue
        avg = average_traces(done) if len(done) > 1 else done[0]
        if len(done) > 1:
            write_trace_csv(avg, out / f"trace_B{B}_mean.csv")
        averaged[B] = avg
        row = {"B": B, "seeds": len(done), "final_gap": avg.gap[-1]}
        hit = iterations_to(avg, cfg.threshold) if cfg.threshold is not None else None
        row["iterations_to"] = hit[0] if hit else (NOT_REACHED if cfg.threshold is not None else "")
        row["features_to"] = hit[1] if hit else (NOT_REACHED if cfg.threshold is not None else "")
        if bundle.test is not None:
            accs = [bundle.problem.accuracy(traces[(B, s)].final, *bundle.test)
                    for s in cfg.seeds if (B, s) in traces]
            row["test_accuracy"] = float(np.mean(accs))
        row.update(reports[B].to_row())
        rows.append(row)

    if rows:
        fieldnames = list(dict.fromkeys(k for r in rows for k in r))
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fieldnames)
            w.writeheader()
            w.writerows(rows)
    summary = _summary_text(cfg, bundle, rows, failures)
    (out / "summary.txt").write_text(summary)
    return {"averaged": averaged, "reports": reports, "rows": rows, "failures": failures,
            "summary": summary, "out_dir": out}


def _summary_text(cfg, bundle, rows, failures) -> str:
    lines = [f"problem    {bundle.description}",
             f"algorithm  {cfg.algorithm}  I={cfg.I} L={cfg.L} T={cfg.T}  step {format_schedule(cfg.schedule)}",
             f"seeds      {len(cfg.seeds)}",
             ""]
    header = f"{'B':>5} {'final gap':>12} {'iters to':>16} {'features to':>16}"
    if bundle.test is not None:
        header += f" {'test acc':>9}"
    lines.append(header)
    for r in rows:
        line = f"{r['B']:>5} {r['final_gap']:>12.4e} {str(r['iterations_to']):>16} {str(r['features_to']):>16}"
        if "test_accuracy" in r:
            line += f" {r['test_accuracy']:>9.4f}"
        lines.append(line)
    if cfg.threshold is not None:
        lines.append(f"threshold  gap <= {cfg.threshold:g}")
    for B, seed, msg in failures:
        lines.append(f"FAILED B={B} seed={seed}: {msg}")
    return "\n".join(lines) + "\n"


# ---------- entry point ----------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rapsa", description="Random parallel stochastic optimization experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("config")
    run.add_argument("--seed-override", type=str, default=None, help="replace the seed list, e.g. 3 or 0-4")
    run.add_argument("--threads", type=int, default=1, help="worker threads for cells or blocks")
    run.add_argument("--out-dir", default=None, help="output directory (overrides [output] dir)")

    cmp_ = sub.add_parser("compare", help="compare two trace CSV files")
    cmp_.add_argument("trace_a")
    cmp_.add_argument("trace_b")
    cmp_.add_argument("--eps", type=float, required=True, help="gap threshold")

    bnd = sub.add_parser("bounds", help="print theoretical constants for a config")
    bnd.add_argument("config")
    return ap


def _fmt(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            if args.seed_override is not None:
                cfg.seeds = _int_list(args.seed_override)
                cfg.validate()
            if args.threads < 1:
                raise ConfigurationError("--threads must be >= 1")
            result = run_experiment(cfg, args.out_dir, args.threads)
            sys.stdout.write(result["summary"])
            return 1 if result["failures"] else 0
        if args.command == "compare":
            rec = compare_runs(read_trace_csv(args.trace_a), read_trace_csv(args.trace_b), args.eps)
            for key, value in rec.items():
                if isinstance(value, tuple):
                    print(f"{key:18s} a={_fmt(value[0])}  b={_fmt(value[1])}")
                else:
                    print(f"{key:18s} {_fmt(value)}")
            return 0
        if args.command == "bounds":
            cfg = load_config(args.config)
            bundle = build_problem(cfg.problem)
            for B, rep in compute_bounds(cfg, bundle).items():
                print(f"[B={B}]")
                print(rep.to_text())
            return 0
    except (RapsaError, OSError) as exc:
        print(f"rapsa: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
