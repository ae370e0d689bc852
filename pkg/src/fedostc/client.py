"""Client-side computation: encoding a window and online local optimization.

Both entry points accept a single client (no batch axis) or a cohort of
clients stacked along a leading axis; the arithmetic per client is identical.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model
from .attention import self_jacobian
from .errors import NonfiniteGradientError
from .model import ModelConfig

DEFAULT_CLIP_NORM = 5.0


@dataclass
class ClientState:
    client_id: int
    params: np.ndarray
    epoch: int = 0


@dataclass(frozen=True)
class HiddenStateMessage:
    """Client -> server: the encoder output, never the raw window."""

    client: int
    round: int
    hidden: np.ndarray


@dataclass(frozen=True)
class AttentionReply:
    """Server -> client: updated hidden state and the client's own coefficient."""

    client: int
    round: int
    h_prime: np.ndarray
    alpha_self: float


@dataclass(frozen=True)
class ParamUploadMessage:
    client: int
    round: int
    params: np.ndarray


@dataclass
class LocalResult:
    params: np.ndarray        # (..., P) after E epochs
    prediction: np.ndarray    # (..., F, D) from the first epoch's forward pass
    losses: np.ndarray        # (..., E) loss before each update
    gradients: np.ndarray     # (..., E, P) gradients actually applied


def _as_window(x):
    x = np.asarray(x, dtype=float)
    return x[..., None]


def client_encode(config: ModelConfig, w, x_hist) -> np.ndarray:
    """Encoder output for ``(..., T)`` speed windows."""
    h, _ = model.encode(config, w, _as_window(x_hist))
    return h


def clip_gradient(g, max_norm: float | None):
    if max_norm is None or max_norm <= 0:
        return g
    norm = np.sqrt(np.sum(g * g, axis=-1, keepdims=True))
    scale = np.minimum(1.0, max_norm / np.maximum(norm, 1e-300))
    return g * scale


def local_round(config: ModelConfig, w_t, x_hist, x_future, epochs: int, lr: float, *,
                h_prime=None, alpha_self=None, clip_norm: float | None = DEFAULT_CLIP_NORM,
                client_ids=None, round_index: int | None = None) -> LocalResult:
    """Run ``epochs`` steps of online gradient descent on one window per client.

    With ``h_prime`` given, every epoch decodes from that fixed attention
    output and backpropagates into the encoder through the diagonal
    ``alpha_self * h' * (1 - h')``.  Without it the decoder consumes the
    client's own, freshly re-encoded hidden state.
    """
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    x_hist = _as_window(x_hist)
    x_future = _as_window(x_future)
    w = np.array(w_t, dtype=float)

    if h_prime is not None:
        h_prime = np.asarray(h_prime, dtype=float)
        jac = self_jacobian(h_prime, alpha_self)

        def self_path(_h):
            return h_prime
    else:
        self_path, jac = None, 1.0

    losses, grads, prediction = [], [], None
    for _ in range(epochs):
        cache = model.forward(config, w, x_hist, self_path)
        loss, d_pred = model.mse_loss(cache.predictions, x_future)
        g = model.backward(config, w, cache, d_pred, jac)
        if prediction is None:
            prediction = cache.predictions
        bad = ~np.all(np.isfinite(g), axis=-1)
        if np.any(bad):
            idx = int(np.flatnonzero(np.atleast_1d(bad))[0])
            client = client_ids[idx] if client_ids is not None else idx
            raise NonfiniteGradientError(round_index, client)
        g = clip_gradient(g, clip_norm)
        w = w - lr * g
        losses.append(loss)
        grads.append(g)
    return LocalResult(w, prediction, np.stack(losses, axis=-1), np.stack(grads, axis=-2))

