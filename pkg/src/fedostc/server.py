"""Server side: spatial attention, averaging and period-aware aggregation."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .attention import AttentionParams, AttentionResult, evaluate_attention
from .errors import BufferCorruptionError, LayoutMismatchError, MissingClientStateError
from .graph import TrafficGraph
from .model import ParamVector

SIMPLEX_TOL = 1e-12

AVERAGE = "average"
WEIGHTED = "weighted"


def _stack(uploads) -> np.ndarray:
    if isinstance(uploads, np.ndarray):
        arr = uploads
    else:
        uploads = list(uploads)
        if not uploads:
            raise LayoutMismatchError("no uploads")
        if isinstance(uploads[0], ParamVector):
            first = uploads[0].layout
            if any(not isinstance(u, ParamVector) or u.layout != first for u in uploads):
                raise LayoutMismatchError("uploads carry different layouts")
            uploads = [u.values for u in uploads]
        try:
            arr = np.stack([np.asarray(u, dtype=float) for u in uploads])
        except ValueError as exc:
            raise LayoutMismatchError("uploads have different lengths") from exc
    arr = np.asarray(arr, dtype=float)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise LayoutMismatchError(f"expected (N, P) uploads, got {arr.shape}")
    return arr


def _vector(w) -> np.ndarray:
    return np.asarray(w.values if isinstance(w, ParamVector) else w, dtype=float)


def evaluate_spatial(h_all, graph: TrafficGraph, params: AttentionParams) -> AttentionResult:
    """Attention update for every client.  ``h_all`` is an (N, d) array or a client->h map."""
    if isinstance(h_all, Mapping):
        missing = [n for n in range(graph.n_clients) if h_all.get(n) is None]
        if missing:
            raise MissingClientStateError(f"no hidden state from clients {missing}")
        h_all = np.stack([np.asarray(h_all[n], dtype=float) for n in range(graph.n_clients)])
    else:
        rows = list(h_all)
        missing = [n for n, h in enumerate(rows) if h is None]
        if missing or len(rows) != graph.n_clients:
            missing = missing or list(range(len(rows), graph.n_clients))
            raise MissingClientStateError(f"no hidden state from clients {missing}")
        h_all = np.stack([np.asarray(h, dtype=float) for h in rows])
    return evaluate_attention(params, h_all, graph)


def average_aggregate(uploads) -> np.ndarray:
    return _stack(uploads).mean(axis=0)


def weighted_aggregate(uploads, weights) -> np.ndarray:
    arr = _stack(uploads)
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (arr.shape[0],):
        raise LayoutMismatchError(f"{weights.size} weights for {arr.shape[0]} uploads")
    return weights @ arr


def correlation_coefficients(locals_, global_) -> np.ndarray:
    """Softmax of negative L2 distances between each local model and the global one."""
    arr = _stack(locals_)
    g = _vector(global_)
    if g.shape != arr.shape[1:]:
        raise LayoutMismatchError("global model layout differs from uploads")
    dist = np.sqrt(np.sum((arr - g) ** 2, axis=1))
    logits = -dist
    e = np.exp(logits - logits.max())
    return e / e.sum()


def check_simplex(rho, tol: float = SIMPLEX_TOL) -> bool:
    rho = np.asarray(rho, dtype=float)
    return bool(rho.ndim == 1 and np.all(rho >= 0) and abs(rho.sum() - 1.0) <= tol)


class CorrelationBuffer:
    """FIFO of the last ``capacity`` aggregation-weight vectors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("period must be at least one round")
        self.capacity = capacity
        self._entries: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self):
        return len(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) == self.capacity

    def push(self, rho) -> None:
        rho = np.array(rho, dtype=float)
        if not check_simplex(rho):
            raise BufferCorruptionError("weight vector is not on the probability simplex")
        rho.setflags(write=False)
        self._entries.append(rho)

    def oldest(self) -> np.ndarray:
        """Entry pushed ``capacity`` rounds ago (valid once the buffer is full)."""
        if not self._entries:
            raise BufferCorruptionError("buffer is empty")
        rho = self._entries[0]
        if not check_simplex(rho):
            raise BufferCorruptionError("stored weight vector left the simplex")
        return rho

    def entries(self) -> list[np.ndarray]:
        return list(self._entries)


@dataclass
class AggregationOutcome:
    params: np.ndarray
    branch: str
    weights: np.ndarray      # weights applied to the uploads this round
    rho: np.ndarray          # coefficients pushed to the buffer this round


def period_aware_aggregate(uploads, buffer: CorrelationBuffer, round_index: int,
                           force_uniform: bool = False) -> AggregationOutcome:
    """Average while ``round_index <= period``; afterwards weight by the buffered
    coefficients from exactly ``period`` rounds earlier.  Either way the fresh
    coefficients are pushed afterwards.
    """
    arr = _stack(uploads)
    n = arr.shape[0]
    if round_index <= buffer.capacity:
        if len(buffer) != round_index - 1:
            raise BufferCorruptionError(
                f"round {round_index} expects {round_index - 1} buffered entries, found {len(buffer)}")
        params = arr.mean(axis=0)
        branch, weights = AVERAGE, np.full(n, 1.0 / n)
    else:
        if not buffer.full:
            raise BufferCorruptionError(f"round {round_index} needs a full buffer")
        weights = buffer.oldest()
        if weights.shape != (n,):
            raise BufferCorruptionError("buffered weights do not match the client count")
        # uniform weights reduce to the plain mean; computing it the same way
        # keeps that special case bit-identical to averaging
        params = arr.mean(axis=0) if np.all(weights == weights[0]) else weights @ arr
        branch = WEIGHTED
    rho = np.full(n, 1.0 / n) if force_uniform else correlation_coefficients(arr, params)
    buffer.push(rho)
    return AggregationOutcome(params, branch, np.asarray(weights), rho)


def unrolled_update(w_t, gradients, rho, lr: float) -> np.ndarray:
    """``w_t - lr * sum_n sum_e rho_n g_{n,e}``; ``gradients`` is (N, E, P)."""
    w_t = _vector(w_t)
    g = np.asarray(gradients, dtype=float)
    rho = np.asarray(rho, dtype=float)
    if g.ndim != 3 or g.shape[2] != w_t.shape[0] or g.shape[0] != rho.shape[0]:
        raise LayoutMismatchError(f"gradients {g.shape} incompatible with params/weights")
    return w_t - lr * np.einsum("n,nep->p", rho, g)


@dataclass
class Server:
    """Holds the global model, attention projection and coefficient buffer."""

    graph: TrafficGraph
    attention: AttentionParams | None
    global_params: np.ndarray
    period: int
    aggregation: str = "period_aware"     # or "average"
    force_uniform: bool = False
    buffer: CorrelationBuffer = field(init=False)
    rho_history: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.buffer = CorrelationBuffer(self.period)
        self.global_params = np.array(self.global_params, dtype=float)

    def spatial(self, h_all) -> AttentionResult:
        if self.attention is None:
            raise RuntimeError("server has no attention projection")
        return evaluate_spatial(h_all, self.graph, self.attention)

    def aggregate(self, uploads, round_index: int) -> AggregationOutcome:
        if self.aggregation == "average":
            arr = _stack(uploads)
            n = arr.shape[0]
            out = AggregationOutcome(arr.mean(axis=0), AVERAGE, np.full(n, 1.0 / n), np.full(n, 1.0 / n))
        else:
            out = period_aware_aggregate(uploads, self.buffer, round_index, self.force_uniform)
            self.rho_history.append(out.rho)
        self.global_params = out.params
        return out


def write_rho_csv(path: str | Path, rho_history: Sequence[np.ndarray]) -> None:
    """One row per (round, client) with the coefficient computed at that round."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "client", "weight"])
        for t, rho in enumerate(rho_history, start=1):
            for n, w in enumerate(rho):
                writer.writerow([t, n, repr(float(w))])
