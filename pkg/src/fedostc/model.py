"""GRU encoder-decoder forecaster with hand-written backpropagation.

Every function accepts arrays with arbitrary leading batch axes.  A parameter
vector has shape ``(..., P)``; a history window has shape ``(..., T, D)``.
Batch axes of parameters and data broadcast against each other, so a stack of
per-client parameter vectors can be run against a stack of per-client windows
in one call, and a single shared vector can be run against a minibatch.

The recurrences carry no bias terms:

    z = sigmoid(W_z x + U_z h)
    r = sigmoid(W_r x + U_r h)
    c = tanh(W_h x + U_h (r * h))
    h_new = (1 - z) * h + z * c
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.special import expit

from .errors import (
    CacheMismatchError,
    LengthMismatchError,
    ShapeMismatchError,
    WrongLengthError,
    ZeroEpsilonError,
)

GATES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h")
GROUPS = ("encoder", "bridge", "decoder", "head")


@dataclass(frozen=True)
class ModelConfig:
    history_steps: int = 12
    forecast_steps: int = 6
    input_dim: int = 1
    enc_hidden: int = 64
    dec_hidden: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("history_steps", "forecast_steps", "input_dim", "enc_hidden", "dec_hidden"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    @cached_property
    def layout(self) -> "ParamLayout":
        return ParamLayout.for_config(self)


class Segment(NamedTuple):
    name: str
    group: str
    shape: tuple[int, ...]
    offset: int
    fan_in: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParamLayout:
    segments: tuple[Segment, ...]
    size: int

    @classmethod
    def for_config(cls, config: ModelConfig) -> "ParamLayout":
        d_in, d_e, d_d = config.input_dim, config.enc_hidden, config.dec_hidden
        spec = []
        for prefix, group, hidden in (("enc", "encoder", d_e), ("dec", "decoder", d_d)):
            gates = [(f"{prefix}.{g}", group, (hidden, d_in) if g[0] == "W" else (hidden, hidden))
                     for g in GATES]
            if prefix == "dec":
                spec.append(("bridge", "bridge", (d_d, d_e)))
            spec.extend(gates)
        spec.append(("head", "head", (d_in, d_d)))
        segments, offset = [], 0
        for name, group, shape in spec:
            seg = Segment(name, group, shape, offset, shape[1])
            segments.append(seg)
            offset = seg.stop
        return cls(tuple(segments), offset)

    @cached_property
    def by_name(self) -> dict[str, Segment]:
        return {s.name: s for s in self.segments}

    def group_slices(self) -> dict[str, list[slice]]:
        out: dict[str, list[slice]] = {g: [] for g in GROUPS}
        for s in self.segments:
            out[s.group].append(slice(s.offset, s.stop))
        return out

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        for sl in self.group_slices()[group]:
            mask[sl] = True
        return mask

    def unflatten(self, values: np.ndarray) -> dict[str, np.ndarray]:
        values = np.asarray(values)
        if values.shape[-1] != self.size:
            raise ShapeMismatchError(f"expected trailing size {self.size}, got {values.shape[-1]}")
        lead = values.shape[:-1]
        return {s.name: values[..., s.offset:s.stop].reshape(lead + s.shape) for s in self.segments}

    def flatten(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        lead = np.broadcast_shapes(*(np.shape(parts[s.name])[:-len(s.shape)] for s in self.segments))
        pieces = [np.broadcast_to(parts[s.name], lead + s.shape).reshape(lead + (s.size,))
                  for s in self.segments]
        return np.concatenate(pieces, axis=-1)


@dataclass(frozen=True)
class ParamVector:
    """Flat parameters plus the layout that names their segments."""

    values: np.ndarray
    layout: ParamLayout

    def __post_init__(self):
        if np.shape(self.values)[-1:] != (self.layout.size,):
            raise ShapeMismatchError("values length does not match layout")

    def segment(self, name: str) -> np.ndarray:
        return self.layout.unflatten(self.values)[name]

    def unflatten(self) -> dict[str, np.ndarray]:
        return self.layout.unflatten(self.values)


# a gradient shares the parameter layout
GradientVector = ParamVector


class GruParams(NamedTuple):
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray


class Weights(NamedTuple):
    encoder: GruParams
    bridge: np.ndarray
    decoder: GruParams
    head: np.ndarray


@dataclass
class GruStepCache:
    x: np.ndarray
    h_prev: np.ndarray
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    h: np.ndarray


@dataclass
class ForwardCache:
    encoder_steps: list[GruStepCache]
    h_prime: np.ndarray
    decoder_init: np.ndarray
    decoder_steps: list[GruStepCache]
    predictions: np.ndarray
    n_params: int = field(default=0)


def unpack(config: ModelConfig, w) -> Weights:
    parts = config.layout.unflatten(np.asarray(w, dtype=float))
    enc = GruParams(*(parts[f"enc.{g}"] for g in GATES))
    dec = GruParams(*(parts[f"dec.{g}"] for g in GATES))
    return Weights(enc, parts["bridge"], dec, parts["head"])


def init_params(config: ModelConfig, seed: int | None = None) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) draws; a square bridge starts as identity."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    layout = config.layout
    values = np.empty(layout.size)
    for seg in layout.segments:
        bound = 1.0 / np.sqrt(seg.fan_in)
        values[seg.offset:seg.stop] = rng.uniform(-bound, bound, seg.size)
    if config.enc_hidden == config.dec_hidden:
        seg = layout.by_name["bridge"]
        values[seg.offset:seg.stop] = np.eye(config.dec_hidden).ravel()
    return ParamVector(values, layout)


def _mv(m, v):
    return (m @ v[..., None])[..., 0]


def _mtv(m, v):
    return (v[..., None, :] @ m)[..., 0, :]


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def gru_step(p: GruParams, x, h_prev) -> tuple[np.ndarray, GruStepCache]:
    x = np.asarray(x, dtype=float)
    h_prev = np.asarray(h_prev, dtype=float)
    if x.shape[-1] != p.W_z.shape[-1] or h_prev.shape[-1] != p.U_z.shape[-1]:
        raise ShapeMismatchError(
            f"input {x.shape[-1]} / hidden {h_prev.shape[-1]} do not match "
            f"W {p.W_z.shape[-2:]} / U {p.U_z.shape[-2:]}")
    z = expit(_mv(p.W_z, x) + _mv(p.U_z, h_prev))
    r = expit(_mv(p.W_r, x) + _mv(p.U_r, h_prev))
    c = np.tanh(_mv(p.W_h, x) + _mv(p.U_h, r * h_prev))
    h = (1.0 - z) * h_prev + z * c
    return h, GruStepCache(x, h_prev, z, r, c, h)


def gru_step_backward(p: GruParams, cache: GruStepCache, dh):
    """Return (parameter grads, d input, d previous hidden) for one step."""
    x, h_prev, z, r, c = cache.x, cache.h_prev, cache.z, cache.r, cache.c
    dz_pre = dh * (c - h_prev) * z * (1.0 - z)
    dc_pre = dh * z * (1.0 - c * c)
    drh = _mtv(p.U_h, dc_pre)
    dr_pre = drh * h_prev * r * (1.0 - r)
    dh_prev = (dh * (1.0 - z) + drh * r
               + _mtv(p.U_z, dz_pre) + _mtv(p.U_r, dr_pre))
    dx = _mtv(p.W_z, dz_pre) + _mtv(p.W_r, dr_pre) + _mtv(p.W_h, dc_pre)
    grads = GruParams(
        _outer(dz_pre, x), _outer(dr_pre, x), _outer(dc_pre, x),
        _outer(dz_pre, h_prev), _outer(dr_pre, h_prev), _outer(dc_pre, r * h_prev),
    )
    return grads, dx, dh_prev


def encode(config: ModelConfig, w, x_hist) -> tuple[np.ndarray, list[GruStepCache]]:
    """Run the encoder over a ``(..., T, D)`` window from a zero hidden state."""
    x_hist = np.asarray(x_hist, dtype=float)
    if x_hist.ndim < 2 or x_hist.shape[-2] != config.history_steps:
        raise WrongLengthError(f"history window must have {config.history_steps} steps")
    if x_hist.shape[-1] != config.input_dim:
        raise ShapeMismatchError(f"input_dim is {config.input_dim}, window has {x_hist.shape[-1]}")
    enc = unpack(config, w).encoder
    lead = np.broadcast_shapes(np.shape(w)[:-1], x_hist.shape[:-2])
    h = np.zeros(lead + (config.enc_hidden,))
    caches = []
    for d in range(config.history_steps):
        h, cache = gru_step(enc, x_hist[..., d, :], h)
        caches.append(cache)
    return h, caches


def decode(config: ModelConfig, w, h_prime, x_last):
    """Autoregressive decoding: bridge h' into the decoder, feed back each prediction.

    Returns ``(predictions (..., F, D), decoder_init, step caches)``.
    """
    h_prime = np.asarray(h_prime, dtype=float)
    x_last = np.asarray(x_last, dtype=float)
    if h_prime.shape[-1] != config.enc_hidden:
        raise ShapeMismatchError(f"h' must have {config.enc_hidden} entries")
    weights = unpack(config, w)
    s = _mv(weights.bridge, h_prime)
    s0 = s
    u = x_last
    preds, caches = [], []
    for _ in range(config.forecast_steps):
        s, cache = gru_step(weights.decoder, u, s)
        u = _mv(weights.head, s)
        preds.append(u)
        caches.append(cache)
    return np.stack(preds, axis=-2), s0, caches


def forward(config: ModelConfig, w, x_hist, self_path=None) -> ForwardCache:
    """Encode, optionally map h through ``self_path``, then decode.

    ``self_path`` is a callable ``h -> h'`` (the attention update seen from one
    client).  When omitted the decoder consumes the encoder output directly.
    """
    x_hist = np.asarray(x_hist, dtype=float)
    h, enc_caches = encode(config, w, x_hist)
    h_prime = h if self_path is None else self_path(h)
    preds, s0, dec_caches = decode(config, w, h_prime, x_hist[..., -1, :])
    return ForwardCache(enc_caches, h_prime, s0, dec_caches, preds, config.layout.size)


def mse_loss(pred, truth):
    """Mean squared error over the last two axes and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape[-2:] != truth.shape[-2:]:
        raise LengthMismatchError(f"prediction {pred.shape} vs target {truth.shape}")
    diff = pred - truth
    count = diff.shape[-1] * diff.shape[-2]
    loss = np.sum(diff * diff, axis=(-2, -1)) / count
    return loss, (2.0 / count) * diff


def backward(config: ModelConfig, w, cache: ForwardCache, d_pred, self_jacobian=1.0) -> np.ndarray:
    """Backpropagate ``d loss / d predictions`` to a flat gradient ``(..., P)``.

    ``self_jacobian`` is the diagonal of ``d h' / d h`` for the client's own
    encoder output (1.0 when the decoder consumes ``h`` directly).
    """
    if (cache.n_params != config.layout.size
            or len(cache.encoder_steps) != config.history_steps
            or len(cache.decoder_steps) != config.forecast_steps):
        raise CacheMismatchError("cache was produced by a different model configuration")
    weights = unpack(config, w)
    d_pred = np.asarray(d_pred, dtype=float)
    if d_pred.shape[-2:] != cache.predictions.shape[-2:]:
        raise CacheMismatchError("loss gradient does not match cached predictions")

    grads: dict[str, np.ndarray] = {}

    def add(name, g):
        grads[name] = g if name not in grads else grads[name] + g

    ds_next = 0.0
    du_next = 0.0
    for k in reversed(range(config.forecast_steps)):
        step = cache.decoder_steps[k]
        dy = d_pred[..., k, :] + du_next
        add("head", _outer(dy, step.h))
        ds = _mtv(weights.head, dy) + ds_next
        g, du_next, ds_next = gru_step_backward(weights.decoder, step, ds)
        for gate, val in zip(GATES, g):
            add(f"dec.{gate}", val)

    add("bridge", _outer(ds_next, cache.h_prime))
    dh = _mtv(weights.bridge, ds_next) * self_jacobian
    for step in reversed(cache.encoder_steps):
        g, _, dh = gru_step_backward(weights.encoder, step, dh)
        for gate, val in zip(GATES, g):
            add(f"enc.{gate}", val)
    return config.layout.flatten(grads)


def loss_and_grad(config: ModelConfig, w, x_hist, x_future, self_path=None, self_jacobian=None):
    """Forward, MSE and backward in one call.  Returns (loss, grad, cache)."""
    cache = forward(config, w, x_hist, self_path)
    loss, d_pred = mse_loss(cache.predictions, x_future)
    if self_jacobian is None:
        self_jacobian = 1.0
    elif callable(self_jacobian):
        self_jacobian = self_jacobian(cache.h_prime)
    return loss, backward(config, w, cache, d_pred, self_jacobian), cache


@dataclass
class GradCheckReport:
    max_error: float
    worst_index: int
    worst_segment: str
    segment_errors: dict[str, float]
    group_errors: dict[str, float]


def gradient_check_report(config: ModelConfig, w, x_hist, x_future, epsilon: float = 1e-5,
                          self_path=None, self_jacobian=None) -> GradCheckReport:
    """Compare the analytic gradient with central differences, coordinate by coordinate.

    Relative error per coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    if epsilon <= 0:
        raise ZeroEpsilonError("epsilon must be positive")
    w = np.array(w, dtype=float)
    if w.ndim != 1:
        raise ShapeMismatchError("gradient check takes a single parameter vector")
    _, analytic, _ = loss_and_grad(config, w, x_hist, x_future, self_path, self_jacobian)

    def loss_at(v):
        return float(mse_loss(forward(config, v, x_hist, self_path).predictions, x_future)[0])

    errors = np.empty(w.size)
    for i in range(w.size):
        plus, minus = w.copy(), w.copy()
        plus[i] += epsilon
        minus[i] -= epsilon
        fd = (loss_at(plus) - loss_at(minus)) / (2.0 * epsilon)
        errors[i] = abs(analytic[i] - fd) / max(1.0, abs(fd))

    layout = config.layout
    seg_err = {s.name: float(errors[s.offset:s.stop].max()) for s in layout.segments}
    grp_err = {g: float(errors[layout.group_mask(g)].max()) for g in GROUPS}
    worst = int(np.argmax(errors))
    worst_seg = next(s.name for s in layout.segments if s.offset <= worst < s.stop)
    return GradCheckReport(float(errors[worst]), worst, worst_seg, seg_err, grp_err)


def finite_diff_check(config: ModelConfig, w, window, epsilon: float = 1e-5,
                      self_path=None, self_jacobian=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``window`` is an ``(x_hist, x_future)`` pair.
    """
    x_hist, x_future = window
    return gradient_check_report(config, w, x_hist, x_future, epsilon,
                                 self_path, self_jacobian).max_error
