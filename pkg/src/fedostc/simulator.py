"""Round-by-round federated simulation of FedOSTC and the FedAvg baselines.

One global round per time stamp: round ``k`` consumes the window ending at
stamp ``start + k - 1``.  Inside a FedOSTC round there are exactly two
synchronization points: every client's hidden state must reach the server
before attention runs, and every upload must arrive before aggregation.
Between them clients are processed as independent cohorts, optionally on a
thread pool; results are always reassembled by client id.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model
from .attention import AttentionParams, AttentionResult
from .client import (
    AttentionReply,
    HiddenStateMessage,
    ParamUploadMessage,
    client_encode,
    clip_gradient,
    local_round,
)
from .data import Normalizer, SpeedMatrix, WindowSet, count_windows, fit_normalizer, window_stream
from .errors import BadConfigError, DataExhaustedError, MisalignmentError, WarmupTooSmallError
from .graph import TrafficGraph
from .metrics import MetricSummary, summarize
from .server import Server

log = logging.getLogger(__name__)

METHODS = ("fedostc", "fedavg_on", "fedavg_off")
FROZEN = "frozen"
CSV_HEADER = ("round", "client", "loss", "rmse", "mae", "branch")


@dataclass(frozen=True)
class RunConfig:
    method: str = "fedostc"
    history_steps: int = 12
    forecast_steps: int = 6
    epochs: int = 5
    lr: float = 0.001
    period: int = 288
    max_rounds: int | None = None
    enc_hidden: int = 64
    dec_hidden: int = 128
    seed: int = 0
    # normalization statistics, offline pretraining and the start of the
    # evaluated stream all use the same warmup prefix; None means one period
    warmup_fraction: float | None = None
    pretrain_rounds: int = 20
    pretrain_epochs: int = 5
    pretrain_batch: int = 16
    pretrain_lr: float | None = None
    clip_norm: float | None = 5.0
    leaky_slope: float = 0.2
    use_attention: bool = True
    aggregation: str = "period_aware"
    force_uniform_rho: bool = False
    threads: int = 1
    comparator_epochs: int = 30
    comparator_lr: float = 0.01
    comparator_batch: int = 64

    def __post_init__(self):
        if self.method not in METHODS:
            raise BadConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise BadConfigError("max_rounds must be >= 1")
        if self.epochs < 1 or self.period < 1 or self.threads < 1:
            raise BadConfigError("epochs, period and threads must be >= 1")
        if self.lr < 0:
            raise BadConfigError("learning rate must be nonnegative")
        if self.warmup_fraction is not None and not 0 < self.warmup_fraction <= 1:
            raise BadConfigError("warmup_fraction must lie in (0, 1]")
        if self.aggregation not in ("period_aware", "average"):
            raise BadConfigError("aggregation must be 'period_aware' or 'average'")
        if min(self.pretrain_rounds, self.pretrain_epochs) < 0 or self.pretrain_batch < 1:
            raise BadConfigError("pretraining settings must be nonnegative")
        try:
            self.model_config
        except ValueError as exc:
            raise BadConfigError(str(exc)) from exc

    @property
    def model_config(self) -> model.ModelConfig:
        return model.ModelConfig(self.history_steps, self.forecast_steps, 1,
                                 self.enc_hidden, self.dec_hidden, self.seed)

    def warmup_stamps(self, matrix: SpeedMatrix) -> int:
        if self.warmup_fraction is None:
            return min(matrix.period, matrix.n_stamps)
        return max(1, int(round(self.warmup_fraction * matrix.n_stamps)))


@dataclass
class RoundRecord:
    round: int
    stamp: int
    loss: np.ndarray      # (N,) normalized-scale MSE of the reported prediction
    rmse: np.ndarray      # (N,) speed units
    mae: np.ndarray       # (N,)
    branch: str
    wall_time: float


@dataclass
class RoundTrace:
    """Everything the server saw in one round (kept only when observed)."""

    round: int
    w_t: np.ndarray
    uploads: np.ndarray           # (N, P)
    gradients: np.ndarray         # (N, E, P) gradients applied by each client
    weights: np.ndarray           # (N,) aggregation weights used
    rho: np.ndarray               # (N,) coefficients pushed this round
    w_next: np.ndarray
    branch: str
    attention: AttentionResult | None
    hidden_messages: list[HiddenStateMessage] = field(default_factory=list)
    upload_messages: list[ParamUploadMessage] = field(default_factory=list)


@dataclass
class RunResult:
    method: str
    config: RunConfig
    records: list[RoundRecord]
    final_params: np.ndarray
    initial_params: np.ndarray
    summary: MetricSummary
    normalizer: Normalizer
    start_stamp: int
    max_grad_norm: float = 0.0

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    @property
    def n_rounds(self) -> int:
        return len(self.records)


@dataclass
class PreparedData:
    normalized: np.ndarray
    normalizer: Normalizer
    warmup: int
    start_stamp: int
    n_rounds: int


def prepare(config: RunConfig, matrix: SpeedMatrix) -> PreparedData:
    """Fit the normalizer on the warmup prefix and locate the evaluated stream."""
    warmup = config.warmup_stamps(matrix)
    try:
        normalizer = fit_normalizer(matrix, warmup)
    except WarmupTooSmallError as exc:
        raise WarmupTooSmallError(f"warmup of {warmup} stamps: {exc}") from exc
    start = max(config.history_steps, warmup)
    n_rounds = count_windows(matrix.n_stamps, start, config.forecast_steps)
    if config.max_rounds is not None:
        n_rounds = min(n_rounds, config.max_rounds)
    if n_rounds < 1:
        raise DataExhaustedError(
            f"no windows left after stamp {start} with horizon {config.forecast_steps}")
    return PreparedData(normalizer.normalize(matrix.values), normalizer, warmup, start, n_rounds)


def stream(config: RunConfig, prep: PreparedData) -> Iterable[WindowSet]:
    ws = window_stream(prep.normalized, config.history_steps, config.forecast_steps, prep.start_stamp)
    for k, w in enumerate(ws):
        if k >= prep.n_rounds:
            break
        yield w


def _chunks(n_clients: int, threads: int, order: Sequence[int] | None = None) -> list[np.ndarray]:
    ids = np.arange(n_clients) if order is None else np.asarray(order)
    return [c for c in np.array_split(ids, min(threads, n_clients)) if c.size]


class _Executor:
    def __init__(self, threads: int):
        self.pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def map(self, fn, items):
        if self.pool is None:
            return [fn(i) for i in items]
        return list(self.pool.map(fn, items))

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()


def _record(k, ws, prediction, normalizer, branch, started) -> tuple[RoundRecord, np.ndarray, np.ndarray]:
    pred = prediction[..., 0]                                   # (N, F) normalized
    loss = np.mean((pred - ws.x_future) ** 2, axis=-1)
    err = normalizer.denormalize(pred) - normalizer.denormalize(ws.x_future)
    sq, ab = err * err, np.abs(err)
    rec = RoundRecord(k, ws.stamp, loss, np.sqrt(sq.mean(-1)), ab.mean(-1), branch,
                      time.perf_counter() - started)
    return rec, sq, ab


def run_online(config: RunConfig, matrix: SpeedMatrix, graph: TrafficGraph, *,
               spatial: bool, aggregation: str, force_uniform: bool = False,
               observer: Callable[[RoundTrace], None] | None = None,
               client_order: Sequence[int] | None = None,
               init_params: np.ndarray | None = None) -> RunResult:
    """Shared round loop for the online methods."""
    mcfg = config.model_config
    n = matrix.n_clients
    if graph.n_clients != n:
        raise BadConfigError(f"graph has {graph.n_clients} nodes, data has {n} clients")
    prep = prepare(config, matrix)
    w0 = model.init_params(mcfg, config.seed).values if init_params is None else np.array(init_params)
    attn = AttentionParams.init(config.enc_hidden, config.seed + 1, config.leaky_slope) if spatial else None
    server = Server(graph, attn, w0, config.period, aggregation, force_uniform)
    chunks = _chunks(n, config.threads, client_order)
    pool = _Executor(config.threads)
    records, sq_all, ab_all = [], [], []
    max_norm = 0.0
    try:
        for ws in stream(config, prep):
            started = time.perf_counter()
            k = ws.round
            w_t = server.global_params

            attention = None
            hidden_msgs: list[HiddenStateMessage] = []
            if spatial:
                def encode_chunk(ids):
                    h = client_encode(mcfg, w_t, ws.x_hist[ids])
                    return [HiddenStateMessage(int(i), k, h[j]) for j, i in enumerate(ids)]
                for msgs in pool.map(encode_chunk, chunks):
                    hidden_msgs.extend(msgs)
                # barrier: attention needs every client's hidden state
                attention = server.spatial({m.client: m.hidden for m in hidden_msgs})
                replies = {i: AttentionReply(i, k, attention.h_prime[i], float(attention.alpha_self[i]))
                           for i in range(n)}

            def train_chunk(ids):
                kwargs = {}
                if spatial:
                    kwargs = dict(h_prime=np.stack([replies[int(i)].h_prime for i in ids]),
                                  alpha_self=np.array([replies[int(i)].alpha_self for i in ids]))
                res = local_round(mcfg, w_t, ws.x_hist[ids], ws.x_future[ids], config.epochs,
                                  config.lr, clip_norm=config.clip_norm, client_ids=ids,
                                  round_index=k, **kwargs)
                return ids, res

            params = np.empty((n, mcfg.layout.size))
            prediction = np.empty((n, config.forecast_steps, 1))
            grads = np.empty((n, config.epochs, mcfg.layout.size)) if observer else None
            for ids, res in pool.map(train_chunk, chunks):
                params[ids] = res.params
                prediction[ids] = res.prediction
                max_norm = max(max_norm, float(np.sqrt((res.gradients ** 2).sum(-1)).max()))
                if grads is not None:
                    grads[ids] = res.gradients
            uploads = [ParamUploadMessage(i, k, params[i]) for i in range(n)]
            # barrier: aggregation needs every upload
            outcome = server.aggregate(np.stack([u.params for u in uploads]), k)

            rec, sq, ab = _record(k, ws, prediction, prep.normalizer, outcome.branch, started)
            records.append(rec)
            sq_all.append(sq)
            ab_all.append(ab)
            log.debug("round %d stamp %d branch %s mean loss %.5f", k, ws.stamp, outcome.branch,
                      float(rec.loss.mean()))
            if observer is not None:
                observer(RoundTrace(k, w_t, params, grads, outcome.weights, outcome.rho,
                                    outcome.params, outcome.branch, attention, hidden_msgs, uploads))
    finally:
        pool.close()
    summary = summarize(config.method, config.forecast_steps, np.array(sq_all), np.array(ab_all))
    return RunResult(config.method, config, records, server.global_params, w0, summary,
                     prep.normalizer, prep.start_stamp, max_norm)


def run_fedostc(config: RunConfig, matrix: SpeedMatrix, graph: TrafficGraph, **kwargs) -> RunResult:
    """Attention-coupled encoding plus period-aware aggregation."""
    config = replace(config, method="fedostc")
    return run_online(config, matrix, graph, spatial=config.use_attention,
                      aggregation=config.aggregation, force_uniform=config.force_uniform_rho, **kwargs)


def run_fedavg_online(config: RunConfig, matrix: SpeedMatrix, graph: TrafficGraph, **kwargs) -> RunResult:
    """Online FedAvg: each client decodes its own hidden state; uploads are averaged."""
    config = replace(config, method="fedavg_on")
    return run_online(config, matrix, graph, spatial=False, aggregation="average", **kwargs)


def _pretrain_windows(config: RunConfig, prep: PreparedData):
    """All windows whose targets lie inside the warmup prefix, stacked (K, N, ...)."""
    if count_windows(prep.warmup, config.history_steps, config.forecast_steps) < 1:
        raise WarmupTooSmallError(
            f"warmup of {prep.warmup} stamps holds no window with T={config.history_steps}, "
            f"F={config.forecast_steps}")
    sets = list(window_stream(prep.normalized, config.history_steps, config.forecast_steps,
                              config.history_steps, end_stamp=prep.warmup))
    return np.stack([s.x_hist for s in sets]), np.stack([s.x_future for s in sets])


def pretrain_fedavg(config: RunConfig, prep: PreparedData, w0: np.ndarray, n_clients: int) -> np.ndarray:
    """Batch-learning FedAvg on the warmup windows: each round every client runs
    ``pretrain_epochs`` passes of minibatch gradient descent, then the server averages."""
    if config.pretrain_rounds == 0 or config.pretrain_epochs == 0:
        return w0.copy()
    mcfg = config.model_config
    x_hist, x_future = _pretrain_windows(config, prep)
    n_windows = x_hist.shape[0]
    lr = config.lr if config.pretrain_lr is None else config.pretrain_lr
    rng = np.random.default_rng(config.seed + 7)
    w = w0.copy()
    for _ in range(config.pretrain_rounds):
        local = np.tile(w, (n_clients, 1))
        for _ in range(config.pretrain_epochs):
            order = rng.permutation(n_windows)
            for start in range(0, n_windows, config.pretrain_batch):
                idx = order[start:start + config.pretrain_batch]
                xh = np.swapaxes(x_hist[idx], 0, 1)[..., None]      # (N, b, T, 1)
                xf = np.swapaxes(x_future[idx], 0, 1)[..., None]
                _, g, _ = model.loss_and_grad(mcfg, local[:, None, :], xh, xf)
                g = clip_gradient(g.mean(axis=1), config.clip_norm)
                local = local - lr * g
        w = local.mean(axis=0)
    return w


def run_fedavg_offline(config: RunConfig, matrix: SpeedMatrix, graph: TrafficGraph | None = None,
                       observer=None) -> RunResult:
    """Pretrain on the warmup prefix, freeze, then stream predictions only."""
    config = replace(config, method="fedavg_off")
    mcfg = config.model_config
    prep = prepare(config, matrix)
    w0 = model.init_params(mcfg, config.seed).values
    w = pretrain_fedavg(config, prep, w0, matrix.n_clients)
    records, sq_all, ab_all = [], [], []
    for ws in stream(config, prep):
        started = time.perf_counter()
        cache = model.forward(mcfg, w, ws.x_hist[..., None])
        rec, sq, ab = _record(ws.round, ws, cache.predictions, prep.normalizer, FROZEN, started)
        records.append(rec)
        sq_all.append(sq)
        ab_all.append(ab)
    summary = summarize(config.method, config.forecast_steps, np.array(sq_all), np.array(ab_all))
    return RunResult(config.method, config, records, w, w0, summary, prep.normalizer, prep.start_stamp)


RUNNERS = {
    "fedostc": run_fedostc,
    "fedavg_on": run_fedavg_online,
    "fedavg_off": run_fedavg_offline,
}


def run_method(config: RunConfig, matrix: SpeedMatrix, graph: TrafficGraph, **kwargs) -> RunResult:
    return RUNNERS[config.method](config, matrix, graph, **kwargs)


# -- hindsight comparator and regret ---------------------------------------

def _stream_arrays(config: RunConfig, prep: PreparedData):
    sets = list(stream(config, prep))
    return np.stack([s.x_hist for s in sets]), np.stack([s.x_future for s in sets])


def pooled_loss(mcfg: model.ModelConfig, w, x_hist, x_future) -> np.ndarray:
    """Per-window loss of one shared parameter vector, shape of the window batch."""
    cache = model.forward(mcfg, w, x_hist[..., None])
    return model.mse_loss(cache.predictions, x_future[..., None])[0]


def estimate_comparator(matrix: SpeedMatrix, config: RunConfig) -> np.ndarray:
    """Fit one model to every evaluated window in hindsight (Adam, best-so-far).

    Windows are pooled across clients; the decoder consumes each client's own
    hidden state.  The returned vector never has higher pooled loss than the
    initial model.
    """
    mcfg = config.model_config
    prep = prepare(config, matrix)
    x_hist, x_future = _stream_arrays(config, prep)
    xh = x_hist.reshape(-1, config.history_steps)
    xf = x_future.reshape(-1, config.forecast_steps)
    w = model.init_params(mcfg, config.seed).values
    best_w, best = w.copy(), float(pooled_loss(mcfg, w, xh, xf).mean())
    rng = np.random.default_rng(config.seed + 11)
    m, v = np.zeros_like(w), np.zeros_like(w)
    beta1, beta2, eps, step = 0.9, 0.999, 1e-8, 0
    for _ in range(config.comparator_epochs):
        order = rng.permutation(xh.shape[0])
        for start in range(0, xh.shape[0], config.comparator_batch):
            idx = order[start:start + config.comparator_batch]
            _, g, _ = model.loss_and_grad(mcfg, w, xh[idx][..., None], xf[idx][..., None])
            g = g.mean(axis=0)
            step += 1
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g * g
            mhat = m / (1 - beta1 ** step)
            vhat = v / (1 - beta2 ** step)
            w = w - config.comparator_lr * mhat / (np.sqrt(vhat) + eps)
        loss = float(pooled_loss(mcfg, w, xh, xf).mean())
        if loss < best:
            best, best_w = loss, w.copy()
    return best_w


def comparator_losses(matrix: SpeedMatrix, config: RunConfig, w_star) -> np.ndarray:
    """Per-round, per-client loss of the fixed comparator, shape (R, N)."""
    prep = prepare(config, matrix)
    x_hist, x_future = _stream_arrays(config, prep)
    return pooled_loss(config.model_config, np.asarray(w_star), x_hist, x_future)


def compute_regret(algorithm_losses, comparator_losses_) -> np.ndarray:
    """Cumulative regret ``REG(t) = (1/N) sum_{tau<=t} sum_n [l_alg - l_cmp]``."""
    a = np.asarray(algorithm_losses, dtype=float)
    c = np.asarray(comparator_losses_, dtype=float)
    if a.shape != c.shape or a.ndim != 2:
        raise MisalignmentError(f"loss arrays disagree: {a.shape} vs {c.shape}")
    return np.cumsum((a - c).sum(axis=1)) / a.shape[1]


def regret_bound(epochs: int, n_clients: int, lr: float, rounds: int, grad_bound: float,
                 smoothness: float = 1.0) -> float:
    """``(1 + E N + L E N / 2) * lr * R * G^2`` with user-supplied smoothness ``L``."""
    en = epochs * n_clients
    return (1 + en + smoothness * en / 2) * lr * rounds * grad_bound ** 2


# -- output ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return repr(float(x))


def write_metrics_csv(path: str | Path, result: RunResult) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in result.records:
            for n in range(rec.loss.shape[0]):
                writer.writerow([rec.round, n, _fmt(rec.loss[n]), _fmt(rec.rmse[n]),
                                 _fmt(rec.mae[n]), rec.branch])


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(path: str | Path, entries: dict) -> None:
    with open(path, "w") as fh:
        json.dump(entries, fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_dict(config: RunConfig) -> dict:
    return asdict(config)
