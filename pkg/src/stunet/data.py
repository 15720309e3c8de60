"""Dataset ingestion, windowing, normalization, and synthetic generation.

Series files are CSV with T rows and N*D columns, node-major (node0_f0,
node0_f1, ..., node1_f0, ...). Adjacency comes as a dense matrix, an edge
list, or a distance list mapped through a Gaussian kernel. The synthetic
generator runs a noisy diffusion on a graph so that the future of each node
depends on its neighbors, structure a graph-aware forecaster can exploit.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, UsageError
from .graph import Graph

log = logging.getLogger(__name__)

DEFAULT_SPLITS = (0.7, 0.1, 0.2)


@dataclass
class WindowConfig:
    """History length J and forecast horizon H."""

    j: int
    h: int

    def __post_init__(self):
        if self.j < 1 or self.h < 1:
            raise UsageError("window lengths J and H must be >= 1")


@dataclass
class TimeSeriesDataset:
    """Graph signal series (T, N, D) with contiguous time splits."""

    series: np.ndarray
    graph: Graph
    splits: tuple = DEFAULT_SPLITS
    interval_minutes: float = 5.0

    def __post_init__(self):
        s = np.asarray(self.series, dtype=np.float64)
        if s.ndim != 3:
            raise DataError(f"series must be (T, N, D), got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DataError("series holds non-finite values")
        if s.shape[1] != self.graph.n:
            raise DataError(
                f"series node extent {s.shape[1]} != graph size {self.graph.n}"
            )
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or not np.isclose(
            sum(self.splits), 1.0
        ):
            raise DataError("split fractions must be nonnegative and sum to 1")
        self.series = s

    @property
    def t(self) -> int:
        return self.series.shape[0]

    @property
    def d(self) -> int:
        return self.series.shape[2]

    def split_range(self, split: str) -> tuple:
        """Contiguous [start, stop) row range of a split.

        Each boundary length is floored independently so a fraction like
        0.7 + 0.1 never loses a row to float rounding.
        """
        t = self.t
        t1 = int(t * self.splits[0])
        t2 = t1 + int(t * self.splits[1])
        ranges = {"train": (0, t1), "val": (t1, t2), "test": (t2, t)}
        if split not in ranges:
            raise UsageError(f"unknown split {split!r}")
        return ranges[split]

    def split_series(self, split: str) -> np.ndarray:
        lo, hi = self.split_range(split)
        return self.series[lo:hi]


def make_windows(ds: TimeSeriesDataset, wc: WindowConfig, split: str):
    """Stride-1 sliding (input, target) windows over one split.

    Returns (inputs (W, J, N, D), targets (W, H, N, D)); W = T_split - J - H + 1.
    """
    rows = ds.split_series(split)
    count = rows.shape[0] - wc.j - wc.h + 1
    if count < 1:
        raise DataError(
            f"split {split!r} has {rows.shape[0]} rows; needs >= {wc.j + wc.h}"
        )
    inputs = np.stack([rows[i : i + wc.j] for i in range(count)])
    targets = np.stack([rows[i + wc.j : i + wc.j + wc.h] for i in range(count)])
    return inputs, targets


class Normalizer:
    """Per-feature z-score fitted on the training split (population variance)."""

    def __init__(self):
        self.mean: np.ndarray | None = None
        self.std: np.ndarray | None = None

    def fit(self, rows: np.ndarray) -> "Normalizer":
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 3:
            raise DataError(f"normalizer expects (T, N, D) rows, got {rows.shape}")
        self.mean = rows.mean(axis=(0, 1))
        std = rows.std(axis=(0, 1))
        flat = std <= 0
        if np.any(flat):
            log.warning("constant feature(s) %s; std fallback 1", np.where(flat)[0])
            std = np.where(flat, 1.0, std)
        self.std = std
        return self

    def _check(self) -> None:
        if self.mean is None:
            raise UsageError("normalizer used before fit")

    def apply(self, x: np.ndarray) -> np.ndarray:
        self._check()
        return (x - self.mean) / self.std

    def invert(self, x: np.ndarray) -> np.ndarray:
        self._check()
        return x * self.std + self.mean


# -- file ingestion ----------------------------------------------------------


def _parse_float(tok: str, path: str, lineno: int) -> float:
    try:
        v = float(tok)
    except ValueError as exc:
        raise DataError(f"{path}:{lineno}: bad number {tok!r}") from exc
    if not np.isfinite(v):
        raise DataError(f"{path}:{lineno}: non-finite value {tok!r}")
    return v


def _data_lines(path: str):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror or exc}") from exc
    out = []
    for lineno, line in enumerate(raw, start=1):
        line = line.strip()
        if line and not line.startswith("#"):
            out.append((lineno, line))
    return out


def _is_number(tok: str) -> bool:
    try:
        float(tok)
        return True
    except ValueError:
        return False


def load_adjacency(
    path: str,
    fmt: str = "dense_csv",
    sigma: float = 1.0,
    eps: float = 0.0,
) -> Graph:
    """Read a graph as a dense matrix, an `i,j,w` edge list (symmetrized by
    max), or an `i,j,d` distance list with W = exp(-d^2/sigma^2) when >= eps."""
    lines = _data_lines(path)
    if not lines:
        raise DataError(f"{path}: empty adjacency file")
    if fmt == "dense_csv":
        rows = []
        for lineno, line in lines:
            toks = [t.strip() for t in line.split(",")]
            if not rows and not _is_number(toks[0]):
                continue  # header
            if rows and len(toks) != len(rows[0]):
                raise DataError(
                    f"{path}:{lineno}: expected {len(rows[0])} columns, got {len(toks)}"
                )
            rows.append([_parse_float(t, path, lineno) for t in toks])
        w = np.asarray(rows)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise DataError(f"{path}: dense adjacency must be square, got {w.shape}")
        gap = np.abs(w - w.T).max(initial=0.0)
        if gap > 1e-8:
            raise DataError(f"{path}: adjacency asymmetric by {gap:.3e}")
        w = 0.5 * (w + w.T)
        if w.size and w.min() < 0:
            raise DataError(f"{path}: negative weight in adjacency")
        np.fill_diagonal(w, 0.0)
        return Graph(w)
    if fmt in ("edge_list", "distance_gaussian"):
        triples = []
        n = 0
        for lineno, line in lines:
            toks = [t.strip() for t in line.split(",")]
            if len(toks) != 3:
                raise DataError(f"{path}:{lineno}: expected `i,j,value`")
            if not triples and not (
                toks[0].lstrip("-").isdigit() and toks[1].lstrip("-").isdigit()
            ):
                continue  # header line
            i, j = int(toks[0]), int(toks[1])
            v = _parse_float(toks[2], path, lineno)
            if i < 0 or j < 0:
                raise DataError(f"{path}:{lineno}: negative node id")
            if v < 0:
                raise DataError(f"{path}:{lineno}: negative weight/distance")
            triples.append((i, j, v))
            n = max(n, i + 1, j + 1)
        if not triples:
            raise DataError(f"{path}: no edges parsed")
        w = np.zeros((n, n))
        for i, j, v in triples:
            if i == j:
                continue
            if fmt == "distance_gaussian":
                wt = float(np.exp(-(v * v) / (sigma * sigma)))
                if wt < eps:
                    continue
            else:
                wt = v
            w[i, j] = max(w[i, j], wt)
            w[j, i] = w[i, j]
        return Graph(w)
    raise UsageError(f"unknown adjacency format {fmt!r}")


def save_adjacency_dense(path: str, g: Graph) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in g.weights:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_series(path: str, n: int, d: int = 1) -> np.ndarray:
    """Read a (T, N, D) series from CSV rows of N*D node-major columns."""
    lines = _data_lines(path)
    if not lines:
        raise DataError(f"{path}: empty series file")
    rows = []
    for lineno, line in lines:
        toks = [t.strip() for t in line.split(",")]
        if not rows and not _is_number(toks[0]):
            continue  # header
        if len(toks) != n * d:
            raise DataError(
                f"{path}:{lineno}: expected {n * d} columns, got {len(toks)}"
            )
        rows.append([_parse_float(t, path, lineno) for t in toks])
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.asarray(rows).reshape(len(rows), n, d)


def save_series(path: str, series: np.ndarray) -> None:
    series = np.asarray(series, dtype=np.float64)
    if series.ndim != 3:
        raise DataError(f"series must be (T, N, D), got {series.shape}")
    t, n, d = series.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"node{i}_f{k}" for i in range(n) for k in range(d)) + "\n")
        flat = series.reshape(t, n * d)
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def write_manifest(path: str, fields: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in sorted(fields):
            fh.write(f"{key}={fields[key]}\n")


def read_manifest(path: str) -> dict:
    out = {}
    for lineno, line in _data_lines(path):
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


# -- synthetic generation ----------------------------------------------------


def knn_grid_graph(rows: int, cols: int) -> Graph:
    """Grid of rows x cols nodes, unit edges to the four axis neighbors."""
    if rows < 1 or cols < 1:
        raise UsageError("grid extents must be >= 1")
    n = rows * cols
    w = np.zeros((n, n))
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                w[i, i + 1] = w[i + 1, i] = 1.0
            if r + 1 < rows:
                j = (r + 1) * cols + c
                w[i, j] = w[j, i] = 1.0
    return Graph(w)


def synth_diffusion(
    graph: Graph,
    t: int,
    alpha: float,
    noise_sigma: float,
    seed: int,
    mode: str = "row",
    splits: tuple = DEFAULT_SPLITS,
    interval_minutes: float = 5.0,
) -> TimeSeriesDataset:
    """Noisy graph diffusion: X_{t+1} = alpha*A*X_t + (1-alpha)*X_t + noise.

    mode='row' averages each node's neighbors (A = D^-1 W; isolated nodes keep
    their value). mode='symmetric' uses the doubly stochastic A = I - (D-W)/
    d_max inside the same blend, which conserves the global mean when
    noise_sigma = 0.
    """
    if not 0 <= alpha < 1:
        raise UsageError("alpha must lie in [0, 1)")
    if t < 2:
        raise UsageError("need at least 2 steps")
    deg = graph.degrees()
    if mode == "row":
        a = np.where(deg[:, None] > 0, graph.weights / np.where(deg == 0, 1.0, deg)[:, None], 0.0)
        a[deg == 0] = np.eye(graph.n)[deg == 0]
    elif mode == "symmetric":
        d_max = deg.max(initial=0.0)
        if d_max > 0:
            lap = np.diag(deg) - graph.weights
            a = np.eye(graph.n) - lap / d_max
        else:
            a = np.eye(graph.n)
    else:
        raise UsageError(f"unknown diffusion mode {mode!r}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((graph.n, 1))
    frames = [x]
    for _ in range(t - 1):
        x = alpha * (a @ x) + (1.0 - alpha) * x
        if noise_sigma > 0:
            x = x + noise_sigma * rng.standard_normal(x.shape)
        frames.append(x)
    series = np.stack(frames)
    return TimeSeriesDataset(
        series=series, graph=graph, splits=splits, interval_minutes=interval_minutes
    )
