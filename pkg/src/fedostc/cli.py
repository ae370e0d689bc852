"""Command-line entry point: ``fedostc {run,synth,gradcheck,compare}``.

Settings come from an optional flat ``key = value`` config file; command-line
flags override it.  Every output file lands under ``--out``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, graph, model
from .attention import SelfPath
from .errors import BadConfigError, DataError, FedOSTCError, ToleranceExceededError
from .model import GROUPS
from .server import write_rho_csv
from .simulator import (
    METHODS,
    RunConfig,
    comparator_losses,
    compute_regret,
    estimate_comparator,
    regret_bound,
    run_fedostc,
    run_method,
    write_metrics_csv,
    write_summary,
)

log = logging.getLogger("fedostc")

EXIT_OK, EXIT_TOLERANCE, EXIT_BAD_CONFIG, EXIT_DATA = 0, 1, 2, 3

RUN_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
DATA_KEYS = {
    "dataset": str, "adjacency": str, "distances": str, "synth": bool,
    "synth_clients": int, "synth_days": int, "synth_period": int, "synth_noise": float,
    "synth_drift_at": int, "kernel_sigma": float, "kernel_threshold": float,
    "horizons": str, "methods": str, "regret": bool, "smoothness": float, "dump_rho": bool,
}
SYNTH_DEFAULTS = dict(synth_clients=10, synth_days=3, synth_period=288, synth_noise=1.0)

# flag name -> config key
FLAG_KEYS = {
    "method": "method", "dataset": "dataset", "adjacency": "adjacency", "distances": "distances",
    "synth": "synth", "rounds": "max_rounds", "horizon": "horizons", "epochs": "epochs",
    "lr": "lr", "period": "period", "seed": "seed", "threads": "threads", "methods": "methods",
    "hidden": None,
}


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise BadConfigError(f"not a boolean: {text!r}")


def _coerce(key: str, raw):
    if raw is None or not isinstance(raw, str):
        return raw
    if key in DATA_KEYS:
        kind = DATA_KEYS[key]
    elif key in RUN_FIELDS:
        default = RUN_FIELDS[key].default
        kind = {bool: bool, int: int, float: float, str: str}.get(type(default), None)
        if kind is None:          # Optional fields
            kind = int if key in ("max_rounds",) else float
            if raw.strip().lower() in ("none", ""):
                return None
    else:
        raise BadConfigError(f"unknown setting {key!r}")
    try:
        return _parse_bool(raw) if kind is bool else kind(raw)
    except ValueError as exc:
        raise BadConfigError(f"{key}: cannot parse {raw!r}") from exc


def load_config_file(path: str | Path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise BadConfigError(f"config file {path} not found")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[settings]\n" + path.read_text())
    except configparser.Error as exc:
        raise BadConfigError(f"{path}: {exc}") from exc
    return {k: _coerce(k, v) for k, v in parser["settings"].items()}


def _merge(args: argparse.Namespace) -> dict:
    settings = load_config_file(args.config) if getattr(args, "config", None) else {}
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is None or value is False:
            continue
        if flag == "hidden":
            settings["enc_hidden"], settings["dec_hidden"] = value
            continue
        settings[key] = _coerce(key, value) if isinstance(value, str) else value
    for key in ("max_rounds", "seed", "epochs", "period", "threads"):
        if key in settings and settings[key] is not None:
            settings[key] = int(settings[key])
    for key in ("lr",):
        if key in settings:
            settings[key] = float(settings[key])
    return settings


def _horizons(settings: dict) -> list[int]:
    raw = settings.get("horizons")
    if raw is None:
        return [1, 6, 12]
    try:
        out = [int(x) for x in str(raw).replace(" ", "").split(",") if x]
    except ValueError as exc:
        raise BadConfigError(f"bad horizon list {raw!r}") from exc
    if not out or min(out) < 1:
        raise BadConfigError("horizons must be positive integers")
    return out


def _run_config(settings: dict, **overrides) -> RunConfig:
    fields = {k: v for k, v in settings.items() if k in RUN_FIELDS}
    fields.update(overrides)
    return RunConfig(**fields)


def load_dataset(settings: dict) -> tuple[data.SpeedMatrix, graph.TrafficGraph, np.ndarray | None]:
    """Resolve the speed matrix and graph from settings (synthetic or CSV)."""
    if settings.get("synth"):
        s = {**SYNTH_DEFAULTS, "synth_period": int(settings.get("period", 288)), **settings}
        drift_at = s.get("synth_drift_at")
        matrix, distances = data.synthesize(
            s["synth_clients"], s["synth_days"], s["synth_period"], s["synth_noise"],
            seed=int(s.get("seed", 0)),
            drift=data.Drift(drift_at) if drift_at is not None else None)
        g = graph.graph_from_distances(distances, settings.get("kernel_sigma"),
                                       settings.get("kernel_threshold", graph.DEFAULT_KERNEL_THRESHOLD))
        return matrix, g, distances
    path = settings.get("dataset")
    if not path:
        raise BadConfigError("no data source: pass --dataset PATH or --synth")
    if not Path(path).is_file():
        raise BadConfigError(f"dataset {path} not found")
    matrix = data.load_csv(path, period=int(settings.get("period", 288)))
    distances = None
    if settings.get("adjacency"):
        g = graph.load_adjacency_csv(settings["adjacency"])
    elif settings.get("distances"):
        distances = graph.load_distance_csv(settings["distances"])
        g = graph.graph_from_distances(distances, settings.get("kernel_sigma"),
                                       settings.get("kernel_threshold", graph.DEFAULT_KERNEL_THRESHOLD))
    else:
        if settings.get("method", "fedostc") == "fedostc" or "fedostc" in str(settings.get("methods", "")):
            raise BadConfigError("fedostc needs --adjacency or a distances file")
        g = graph.self_only_graph(matrix.n_clients)
    if g.n_clients != matrix.n_clients:
        raise BadConfigError(f"graph has {g.n_clients} nodes but dataset has {matrix.n_clients} sensors")
    return matrix, g, distances


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise BadConfigError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _evaluate(config: RunConfig, matrix, g, settings, out: Path, tag: str) -> dict:
    result = run_method(config, matrix, g)
    write_metrics_csv(out / f"metrics_{tag}.csv", result)
    log.info("wrote %s (%d rounds)", out / f"metrics_{tag}.csv", result.n_rounds)
    entry = {
        "rmse": result.summary.rmse,
        "mae": result.summary.mae,
        "rmse_variance": result.summary.rmse_variance,
        "per_client_rmse": [float(v) for v in result.summary.per_client_rmse],
        "rounds": result.n_rounds,
    }
    if settings.get("regret", True):
        w_star = estimate_comparator(matrix, config)
        reg = compute_regret(result.losses, comparator_losses(matrix, config, w_star))
        entry["regret"] = float(reg[-1])
        entry["regret_per_round"] = float(reg[-1] / len(reg))
        if result.max_grad_norm:
            entry["regret_bound_diagnostic"] = regret_bound(
                config.epochs, matrix.n_clients, config.lr, result.n_rounds,
                result.max_grad_norm, settings.get("smoothness", 1.0))
    return entry


def cmd_run(args) -> int:
    settings = _merge(args)
    config = _run_config(settings)
    out = _out_dir(args)
    matrix, g, _ = load_dataset(settings)
    summary = {"method": config.method, "config": dataclasses.asdict(config), "horizons": {}}
    for horizon in _horizons(settings):
        cfg = dataclasses.replace(config, forecast_steps=horizon)
        entry = _evaluate(cfg, matrix, g, settings, out, f"{cfg.method}_F{horizon}")
        if cfg.method == "fedostc" and settings.get("dump_rho"):
            _dump_rho(cfg, matrix, g, out / f"rho_{cfg.method}_F{horizon}.csv")
        summary["horizons"][str(horizon)] = entry
        print(f"{cfg.method} F={horizon}: RMSE={entry['rmse']:.4f} MAE={entry['mae']:.4f}")
    summary["config"]["forecast_steps"] = _horizons(settings)
    write_summary(out / f"summary_{config.method}.json", summary)
    return EXIT_OK


def _dump_rho(config, matrix, g, path):
    history = []
    run_fedostc(config, matrix, g, observer=lambda tr: history.append(tr.rho))
    write_rho_csv(path, history)


def cmd_compare(args) -> int:
    settings = _merge(args)
    methods = [m.strip() for m in str(settings.get("methods", "")).split(",") if m.strip()]
    if len(methods) < 2:
        raise BadConfigError("compare needs at least two methods (e.g. --methods fedostc,fedavg_on)")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise BadConfigError(f"unknown methods {unknown}")
    out = _out_dir(args)
    matrix, g, _ = load_dataset(settings)
    horizons = _horizons(settings)
    rows = []
    for horizon in horizons:
        for method in methods:
            cfg = _run_config(settings, method=method, forecast_steps=horizon)
            res = run_method(cfg, matrix, g)
            write_metrics_csv(out / f"metrics_{method}_F{horizon}.csv", res)
            rows.append((method, horizon, res.summary.rmse, res.summary.mae, res.summary.rmse_variance))
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "horizon", "rmse", "mae", "rmse_variance"])
        for method, horizon, r, a, v in rows:
            writer.writerow([method, horizon, repr(r), repr(a), repr(v)])
    # wide layout: one row per method, RMSE/MAE column pair per horizon
    lookup = {(m, h): (r, a) for m, h, r, a, _ in rows}
    with open(out / "comparison_table.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method"] + [f"{k}_F{h}" for h in horizons for k in ("rmse", "mae")])
        for method in methods:
            writer.writerow([method] + [f"{v:.3f}" for h in horizons for v in lookup[(method, h)]])
    header = "method".ljust(12) + "".join(f"F={h}: RMSE   MAE   ".rjust(22) for h in horizons)
    print(header)
    for method in methods:
        print(method.ljust(12) + "".join(f"{lookup[(method, h)][0]:10.3f}{lookup[(method, h)][1]:8.3f}    "
                                         for h in horizons))
    return EXIT_OK


def cmd_synth(args) -> int:
    settings = {**SYNTH_DEFAULTS, **_merge(args), "synth": True}
    for flag in ("clients", "days", "period_stamps", "noise", "drift_at"):
        value = getattr(args, flag, None)
        if value is not None:
            key = {"period_stamps": "synth_period"}.get(flag, f"synth_{flag}")
            settings[key] = value
    out = _out_dir(args)
    matrix, g, distances = load_dataset(settings)
    data.write_speed_csv(out / "speed.csv", matrix)
    graph.write_matrix_csv(out / "distances.csv", distances)
    graph.write_matrix_csv(out / "adjacency.csv", g.adjacency, fmt="{:d}")
    data.write_coords_csv(out / "coords.csv", matrix.coords)
    print(f"wrote {matrix.n_stamps} stamps x {matrix.n_clients} sensors to {out}")
    return EXIT_OK


def gradcheck_cases(seeds: int):
    dims = [(3, 3, 4, 2), (2, 4, 3, 3)]
    for d_e, d_d, T, F in dims:
        cfg = model.ModelConfig(T, F, 1, d_e, d_d)
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            w = model.init_params(cfg, seed).values + rng.normal(0.0, 0.3, cfg.layout.size)
            path = SelfPath(rng.uniform(0.1, 1.0), rng.normal(size=d_e))
            yield cfg, seed, w, rng.normal(size=(T, 1)), rng.normal(size=(F, 1)), path


def cmd_gradcheck(args) -> int:
    out = _out_dir(args)
    tol = args.tolerance
    epsilon = args.epsilon
    worst = None
    per_group = {g: 0.0 for g in GROUPS}
    lines = ["d_e,d_d,T,F,seed,max_rel_error," + ",".join(GROUPS)]
    for cfg, seed, w, xh, xf, path in gradcheck_cases(args.seeds):
        rep = model.gradient_check_report(cfg, w, xh, xf, epsilon, path, path.jacobian)
        for g in GROUPS:
            per_group[g] = max(per_group[g], rep.group_errors[g])
        lines.append(",".join(map(str, (cfg.enc_hidden, cfg.dec_hidden, cfg.history_steps,
                                         cfg.forecast_steps, seed, repr(rep.max_error))))
                     + "," + ",".join(repr(rep.group_errors[g]) for g in GROUPS))
        if worst is None or rep.max_error > worst[0]:
            worst = (rep.max_error, cfg, seed, rep.worst_index, rep.worst_segment)
    (out / "gradcheck.csv").write_text("\n".join(lines) + "\n")
    for g in GROUPS:
        print(f"{g:8s} max relative error {per_group[g]:.3e}")
    err, cfg, seed, idx, seg = worst
    print(f"worst: {err:.3e} at coordinate {idx} ({seg}), d_e={cfg.enc_hidden} d_d={cfg.dec_hidden} seed={seed}")
    if not err < tol:
        raise ToleranceExceededError(
            f"gradient check failed: {err:.3e} >= tolerance {tol:g} at coordinate {idx} ({seg})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedostc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, methods_flag=False):
        p.add_argument("--config", help="flat key = value settings file")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--dataset", help="speed CSV (header of sensor ids, one row per stamp)")
        p.add_argument("--adjacency", help="N x N 0/1 CSV, no header")
        p.add_argument("--distances", help="N x N distance CSV; thresholded Gaussian kernel")
        p.add_argument("--synth", action="store_true", help="use a synthetic dataset")
        p.add_argument("--rounds", type=int, help="cap on global rounds")
        p.add_argument("--horizon", help="forecast steps F, comma-separated (default 1,6,12)")
        p.add_argument("--epochs", type=int, help="local epochs E")
        p.add_argument("--lr", type=float, help="learning rate")
        p.add_argument("--period", type=int, help="period in rounds for aggregation weights")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="max worker threads for the client phase")
        p.add_argument("--hidden", type=int, nargs=2, metavar=("ENC", "DEC"),
                       help="encoder and decoder widths")
        if methods_flag:
            p.add_argument("--methods", help="comma-separated methods to compare")
        else:
            p.add_argument("--method", choices=METHODS)

    p_run = sub.add_parser("run", help="run one method and write metrics")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="run several methods on identical data")
    common(p_cmp, methods_flag=True)
    p_cmp.set_defaults(func=cmd_compare)

    p_syn = sub.add_parser("synth", help="write a synthetic dataset to CSV")
    p_syn.add_argument("--config")
    p_syn.add_argument("--out", default="synth")
    p_syn.add_argument("--seed", type=int)
    p_syn.add_argument("--clients", type=int)
    p_syn.add_argument("--days", type=int)
    p_syn.add_argument("--period-stamps", type=int, dest="period_stamps")
    p_syn.add_argument("--noise", type=float)
    p_syn.add_argument("--drift-at", type=int, dest="drift_at")
    p_syn.set_defaults(func=cmd_synth)

    p_gc = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradient")
    p_gc.add_argument("--out", default="out")
    p_gc.add_argument("--seeds", type=int, default=20)
    p_gc.add_argument("--tolerance", type=float, default=1e-4)
    p_gc.add_argument("--epsilon", type=float, default=1e-5)
    p_gc.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ToleranceExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TOLERANCE
    except BadConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FedOSTCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
