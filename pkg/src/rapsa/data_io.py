"""Data sources and trace files.

* synthetic linear-regression instances with a tridiagonal-mean design,
* a two-Gaussian binary classification set,
* MNIST IDX files (optionally gzipped) and digit-pair filtering,
* CSV export/import of run traces.
"""
from __future__ import annotations

import csv
import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DATA, make_rng
from .engine import RunTrace
from .errors import EmptyDatasetError, IdxFormatError, TraceFormatError
from .problems import LeastSquaresProblem

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
TRACE_HEADER = ["t", "features_processed", "wall_clock_s", "objective", "objective_gap"]
MNIST_ENV = "RAPSA_MNIST_DIR"


# ---------- synthetic linear regression ----------

@dataclass(frozen=True)
class SyntheticSpec:
    p: int
    N: int
    noise_variance: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.p < 2 or self.N < 1:
            raise ValueError("need p >= 2 and N >= 1")
        if self.noise_variance < 0:
            raise ValueError("noise variance must be non-negative")


def tridiagonal_mean(N: int, p: int) -> np.ndarray:
    """N x p matrix with 2 on the diagonal and -1/2 on the first off-diagonals."""
    return 2.0 * np.eye(N, p) - 0.5 * np.eye(N, p, k=1) - 0.5 * np.eye(N, p, k=-1)


def generate_linear_problem(spec: SyntheticSpec):
    """Return ``(problem, x_true)``.

    Rows are the tridiagonal mean plus i.i.d. unit Gaussian perturbations;
    the signal has entries drawn from ``{1, ..., p} / p`` and observations
    carry N(0, noise_variance) noise.
    """
    rng = make_rng(spec.seed, DATA, 0)
    H = tridiagonal_mean(spec.N, spec.p) + rng.standard_normal((spec.N, spec.p))
    x_true = rng.integers(1, spec.p + 1, size=spec.p) / spec.p
    z = H @ x_true + np.sqrt(spec.noise_variance) * rng.standard_normal(spec.N)
    return LeastSquaresProblem(H, z), x_true


def ill_conditioned_problem(p: int, N: int, condition: float, seed: int = 0, top: float = 1.0):
    """Noiseless least squares whose average Hessian is diagonal with
    eigenvalues log-spaced in ``[top / condition, top]``.

    The returned signal is scaled so every eigen-direction holds the same
    share of ``F(0) - F*``; first-order methods then cannot ignore the flat
    directions.
    """
    if N < p:
        raise ValueError("need N >= p for a full-rank design")
    rng = make_rng(seed, DATA, 1)
    U, _ = np.linalg.qr(rng.standard_normal((N, p)))
    eig = np.geomspace(top / condition, top, p)
    rng.shuffle(eig)
    H = np.sqrt(N / 2.0) * U * np.sqrt(eig)
    x_true = rng.choice([-1.0, 1.0], size=p) / np.sqrt(eig)
    return LeastSquaresProblem(H, H @ x_true), x_true


# ---------- logistic data ----------

def two_gaussians(p: int, N: int, separation: float = 5.0, seed: int = 0):
    """Balanced binary set: class means at +-separation/2 along a random unit direction."""
    rng = make_rng(seed, DATA, 2)
    direction = rng.standard_normal(p)
    direction /= np.linalg.norm(direction)
    y = np.where(rng.random(N) < 0.5, -1.0, 1.0)
    Z = rng.standard_normal((N, p)) + 0.5 * separation * y[:, None] * direction
    return Z, y


def train_test_split(Z, y, train_fraction: float = 0.75, seed: int = 0):
    idx = make_rng(seed, DATA, 3).permutation(len(y))
    cut = int(round(train_fraction * len(y)))
    tr, te = idx[:cut], idx[cut:]
    return Z[tr], y[tr], Z[te], y[te]


# ---------- IDX ----------

@dataclass(frozen=True)
class IdxDataset:
    images: np.ndarray  # N x 784, values in [0, 1]
    labels: np.ndarray  # N ints in [0, 9]

    def __len__(self):
        return self.labels.shape[0]


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of its declared shape."""
    if len(raw) < 4:
        raise IdxFormatError("file too short for an IDX header", offset=0)
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"wrong magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated dimension header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"truncated payload: need {count} bytes, found {len(raw) - header}",
                             offset=len(raw))
    if len(raw) - header > count:
        raise IdxFormatError("trailing bytes after payload", offset=header + count)
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path) -> IdxDataset:
    images = parse_idx(_read_bytes(images_path), IMAGE_MAGIC)
    labels = parse_idx(_read_bytes(labels_path), LABEL_MAGIC)
    if images.ndim != 3:
        raise IdxFormatError(f"image file must be 3-d, got {images.ndim}-d", offset=3)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels",
                             offset=4)
    if labels.size and labels.max() > 9:
        raise IdxFormatError("label outside [0, 9]", offset=8 + int(np.argmax(labels > 9)))
    flat = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return IdxDataset(flat, labels.astype(np.int64))


def find_mnist(directory=None):
    """Locate train/test IDX files; returns a dict of paths or None."""
    directory = directory or os.environ.get(MNIST_ENV)
    if not directory:
        return None
    names = {
        "train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte",
    }
    found = {}
    for key, stem in names.items():
        for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            path = Path(directory) / candidate
            if path.exists():
                found[key] = path
                break
        else:
            return None
    return found


def binary_filter(dataset: IdxDataset, digit_neg: int, digit_pos: int):
    """Keep two digits, mapped to labels -1 / +1, preserving order."""
    if digit_neg == digit_pos or not (0 <= digit_neg <= 9 and 0 <= digit_pos <= 9):
        raise ValueError("need two distinct digits in [0, 9]")
    keep = (dataset.labels == digit_neg) | (dataset.labels == digit_pos)
    if not keep.any():
        raise EmptyDatasetError(f"no samples with digits {digit_neg} or {digit_pos}")
    y = np.where(dataset.labels[keep] == digit_pos, 1.0, -1.0)
    return dataset.images[keep], y


# ---------- traces ----------

def _fmt(value) -> str:
    return format(value, ".17g")


def write_trace_csv(trace: RunTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for t, feat, wall, obj, gap in trace.rows():
            writer.writerow([t, _fmt(feat), _fmt(wall), _fmt(obj), _fmt(gap)])


def read_trace_csv(path) -> RunTrace:
    trace = RunTrace()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise TraceFormatError(f"unexpected header {header}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(TRACE_HEADER):
                raise TraceFormatError(f"expected {len(TRACE_HEADER)} fields, got {len(row)}", line=lineno)
            try:
                t = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise TraceFormatError(str(exc), line=lineno) from None
            try:
                trace.append(t, *values)
            except ValueError as exc:
                raise TraceFormatError(str(exc), line=lineno) from None
    return trace
