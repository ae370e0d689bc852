"""Directed transportation graph over clients.

``adjacency[m, n] == 1`` means client ``m`` feeds client ``n``; the neighbor
set of ``n`` therefore lists its in-neighbors, always including ``n`` itself.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    AsymmetricInputError,
    NegativeDistanceError,
    NonBinaryEntryError,
    NonSquareError,
)

DEFAULT_KERNEL_THRESHOLD = 0.1


@dataclass(frozen=True)
class TrafficGraph:
    n_clients: int
    adjacency: np.ndarray
    neighbor_sets: tuple[tuple[int, ...], ...]

    def neighbors(self, n: int) -> tuple[int, ...]:
        return self.neighbor_sets[n]


def _as_square(matrix) -> np.ndarray:
    arr = np.asarray(matrix, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 1:
        raise NonSquareError(f"expected a non-empty square matrix, got shape {arr.shape}")
    return arr


def build_from_adjacency(matrix) -> TrafficGraph:
    """Build a graph from an N x N 0/1 matrix, forcing self-loops."""
    arr = _as_square(matrix)
    if not np.all((arr == 0) | (arr == 1)):
        raise NonBinaryEntryError("adjacency entries must be 0 or 1")
    adjacency = arr.astype(np.int8)
    np.fill_diagonal(adjacency, 1)
    adjacency.setflags(write=False)
    n_clients = adjacency.shape[0]
    neighbor_sets = tuple(
        tuple(int(m) for m in np.flatnonzero(adjacency[:, n])) for n in range(n_clients)
    )
    return TrafficGraph(n_clients, adjacency, neighbor_sets)


def default_sigma(distances) -> float:
    """Sample standard deviation of the off-diagonal distances (1.0 if degenerate)."""
    d = np.asarray(distances, dtype=float)
    off = d[~np.eye(d.shape[0], dtype=bool)]
    if off.size < 2:
        return 1.0
    sigma = float(np.std(off, ddof=1))
    return sigma if sigma > 0 else 1.0


def build_gaussian_kernel(pairwise_distances, sigma: float | None = None,
                          threshold: float = DEFAULT_KERNEL_THRESHOLD) -> np.ndarray:
    """Threshold ``exp(-d^2 / sigma^2)`` into a binary adjacency matrix."""
    d = _as_square(pairwise_distances)
    if np.any(d < 0):
        raise NegativeDistanceError("distances must be nonnegative")
    if not np.allclose(d, d.T, rtol=0.0, atol=1e-12):
        raise AsymmetricInputError("distance matrix must be symmetric")
    if sigma is None:
        sigma = default_sigma(d)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    kernel = np.exp(-(d ** 2) / sigma ** 2)
    adjacency = (kernel >= threshold).astype(np.int8)
    np.fill_diagonal(adjacency, 1)
    return adjacency


def graph_from_distances(pairwise_distances, sigma=None,
                         threshold=DEFAULT_KERNEL_THRESHOLD) -> TrafficGraph:
    return build_from_adjacency(build_gaussian_kernel(pairwise_distances, sigma, threshold))


def self_only_graph(n_clients: int) -> TrafficGraph:
    return build_from_adjacency(np.zeros((n_clients, n_clients)))


def _read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [row for row in csv.reader(fh) if row and any(cell.strip() for cell in row)]
    try:
        return np.array([[float(cell) for cell in row] for row in rows], dtype=float)
    except ValueError as exc:
        raise NonSquareError(f"{path}: ragged or non-numeric matrix CSV") from exc


def load_adjacency_csv(path: str | Path) -> TrafficGraph:
    """Read an N x N headerless 0/1 CSV."""
    return build_from_adjacency(_read_matrix_csv(path))


def load_distance_csv(path: str | Path) -> np.ndarray:
    d = _as_square(_read_matrix_csv(path))
    if np.any(d < 0):
        raise NegativeDistanceError(f"{path}: negative distance")
    return d


def write_matrix_csv(path: str | Path, matrix, fmt: str = "{:.10g}") -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(matrix):
            writer.writerow([fmt.format(v) for v in row])
