"""Single-head graph attention evaluated by the server over client hidden states."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    EmptyNeighborSetError,
    LengthMismatchError,
    OutOfRangeInputError,
    ShapeMismatchError,
)
from .graph import TrafficGraph

DEFAULT_LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class AttentionParams:
    """Projection ``a`` applied to ``[h_self || h_neighbor]``."""

    a: np.ndarray
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 1 or a.size % 2:
            raise ShapeMismatchError("projection must be a vector of even length 2*d_e")
        if not np.all(np.isfinite(a)):
            raise ValueError("projection entries must be finite")
        if not 0 < self.leaky_slope < 1:
            raise ValueError("leaky_slope must lie in (0, 1)")
        object.__setattr__(self, "a", a)

    @property
    def hidden_dim(self) -> int:
        return self.a.size // 2

    @classmethod
    def init(cls, hidden_dim: int, seed: int, leaky_slope: float = DEFAULT_LEAKY_SLOPE):
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(2 * hidden_dim)
        return cls(rng.uniform(-bound, bound, 2 * hidden_dim), leaky_slope)


@dataclass
class AttentionResult:
    h_prime: np.ndarray                   # (N, d_e)
    alpha_self: np.ndarray                # (N,)
    coefficients: list[dict[int, float]]  # coefficients[n][m] = alpha_{m,n}


def attention_scores(params: AttentionParams, h_all, graph: TrafficGraph, n: int) -> np.ndarray:
    """Scores ``a . [h_n || h_m]`` for each ``m`` in the neighbor set of ``n`` (ascending)."""
    h_all = np.asarray(h_all, dtype=float)
    if h_all.ndim != 2 or h_all.shape[1] != params.hidden_dim:
        raise ShapeMismatchError(f"hidden states must be (N, {params.hidden_dim})")
    if not 0 <= n < graph.n_clients:
        raise IndexError(f"client {n} not in graph")
    d = params.hidden_dim
    nbrs = list(graph.neighbors(n))
    return params.a[:d] @ h_all[n] + h_all[nbrs] @ params.a[d:]


def leaky_relu(x, slope: float = DEFAULT_LEAKY_SLOPE):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, x, slope * x)


def attention_coefficients(scores, leaky_slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    """Softmax of LeakyReLU(scores), computed with max-subtraction."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise EmptyNeighborSetError("no attention scores to normalize")
    act = leaky_relu(scores, leaky_slope)
    e = np.exp(act - act.max())
    return e / e.sum()


def aggregate_hidden(alpha, h_neighbors) -> np.ndarray:
    """``sigmoid(sum_m alpha_m h_m)`` elementwise."""
    alpha = np.asarray(alpha, dtype=float)
    h_neighbors = np.atleast_2d(np.asarray(h_neighbors, dtype=float))
    if alpha.ndim != 1 or alpha.size != h_neighbors.shape[0]:
        raise LengthMismatchError(f"{alpha.size} coefficients for {h_neighbors.shape[0]} neighbors")
    return expit(alpha @ h_neighbors)


def self_jacobian(h_prime, alpha_self) -> np.ndarray:
    """Diagonal of ``d h' / d h_self`` with every coefficient held constant."""
    h_prime = np.asarray(h_prime, dtype=float)
    alpha_self = np.asarray(alpha_self, dtype=float)
    if np.any(alpha_self < 0) or np.any(alpha_self > 1):
        raise OutOfRangeInputError("alpha_self must lie in [0, 1]")
    if np.any(h_prime <= 0) or np.any(h_prime >= 1):
        raise OutOfRangeInputError("h' entries must lie in (0, 1)")
    if alpha_self.ndim:
        alpha_self = alpha_self[..., None]
    return alpha_self * h_prime * (1.0 - h_prime)


class SelfPath:
    """One client's view of the attention update: ``h -> sigmoid(alpha_self*h + rest)``.

    ``rest`` is the neighbor contribution, treated as a constant.  Used by the
    gradient check to differentiate through the client's own share.
    """

    def __init__(self, alpha_self, neighbor_sum):
        self.alpha_self = np.asarray(alpha_self, dtype=float)
        self.neighbor_sum = np.asarray(neighbor_sum, dtype=float)

    def _alpha(self):
        return self.alpha_self[..., None] if self.alpha_self.ndim else self.alpha_self

    def __call__(self, h):
        return expit(self._alpha() * h + self.neighbor_sum)

    def jacobian(self, h_prime):
        return self._alpha() * h_prime * (1.0 - h_prime)


def evaluate_attention(params: AttentionParams, h_all, graph: TrafficGraph) -> AttentionResult:
    h_all = np.asarray(h_all, dtype=float)
    n_clients = graph.n_clients
    h_prime = np.empty_like(h_all)
    alpha_self = np.empty(n_clients)
    coefficients = []
    for n in range(n_clients):
        nbrs = graph.neighbors(n)
        alpha = attention_coefficients(attention_scores(params, h_all, graph, n), params.leaky_slope)
        h_prime[n] = aggregate_hidden(alpha, h_all[list(nbrs)])
        alpha_self[n] = alpha[nbrs.index(n)]
        coefficients.append({m: float(a) for m, a in zip(nbrs, alpha)})
    return AttentionResult(h_prime, alpha_self, coefficients)
