"""Command-line entry point.

Subcommands: gen-data, convert, train, eval, predict, grad-check,
inspect-graph, inspect-decomposition. Exit codes: 0 success, 1 usage or
I/O problem, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import tensor as T
from .config import RunConfig, apply_overrides, load_config
from .dataset import (FlowSeries, fit_normalizer, ha_baseline, load_flow_binary,
                      make_windows, read_edge_csv, read_matrix_dump, split_622,
                      synth_generate, write_edge_csv, write_flow_binary)
from .errors import (ConfigError, ContractError, ConvergenceError,
                     DataSizeError, DimensionError, DivergenceError,
                     FlowcastError, FormatError)
from .gradcheck import check_gradients_named
from .graph import build_graph, component_count
from .model import Model, ModelConfig, collate
from .training import (evaluate, history_to_csv, load_checkpoint, load_state,
                       predict_batches, save_checkpoint, train)

GRAD_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="flowcast",
                     description="Traffic forecasting toolkit.")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--nodes", type=int, default=8)
    p.add_argument("--days", type=int, default=7)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("convert", help="convert a text matrix dump to binary")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--steps-per-day", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--start-day-of-week", type=int, default=0)
    p.add_argument("--start-slot", type=int, default=0)

    def data_model_flags(p, checkpoint: bool):
        p.add_argument("--data", required=True, help="flow file")
        p.add_argument("--edges", required=True, help="edge list CSV")
        p.add_argument("--config", help="config file path")
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       dest="overrides", help="override section.key=value")
        if checkpoint:
            p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("train", help="train a model")
    data_model_flags(p, checkpoint=False)
    p.add_argument("--out-dir", default=".")

    p = sub.add_parser("eval", help="evaluate a checkpoint, print mae,rmse,mape")
    data_model_flags(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("predict", help="export raw-scale predictions")
    data_model_flags(p, checkpoint=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check",
                       help="finite-difference audit of a tiny model")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds to sweep")
    p.add_argument("--tol", type=float, default=GRAD_TOL)

    p = sub.add_parser("inspect-graph", help="spectral summary of an edge list")
    p.add_argument("--edges", required=True)
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--adjacency", choices=("binary", "gaussian_kernel"),
                   default="binary")

    p = sub.add_parser("inspect-decomposition",
                       help="per-node trend/seasonal magnitudes for one sample")
    data_model_flags(p, checkpoint=True)
    p.add_argument("--sample", type=int, default=0,
                   help="window index into the dataset")
    return parser


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    apply_overrides(cfg, args.overrides)
    cfg.validate()
    return cfg


def _prepare(args, cfg: RunConfig):
    """Load data, fit stats, window, split, and build the model skeleton."""
    series = load_flow_binary(args.data)
    edges = read_edge_csv(args.edges)
    fit_normalizer(series)
    windows = make_windows(series, cfg.t_in, cfg.t_out)
    splits = split_622(windows)
    n = series.values.shape[1]
    graph = build_graph(edges, n, mode=cfg.adjacency, k_r=cfg.k_r)
    mc = ModelConfig(n_nodes=n, channels=series.values.shape[2],
                     steps_per_day=series.steps_per_day,
                     t_in=cfg.t_in, t_out=cfg.t_out, heads=cfg.heads,
                     head_dim=cfg.head_dim, blocks=cfg.blocks, k_r=cfg.k_r,
                     graph_embed_dim=cfg.embed_dim, hops=cfg.hops,
                     alpha_mode=cfg.alpha_mode, beta_mode=cfg.beta_mode,
                     decomposition=cfg.decomposition)
    model = Model(mc, graph.spectral_basis, series.mean, series.std,
                  seed=cfg.seed)
    return series, windows, splits, model


def _split_windows(splits, name: str):
    windows = {"train": splits.train, "val": splits.val,
               "test": splits.test}[name]
    if not windows:
        raise DataSizeError(f"the {name} split has no windows")
    return windows


def cmd_gen_data(args) -> int:
    if args.nodes < 2:
        raise ConfigError("--nodes must be >= 2")
    if args.days < 1:
        raise ConfigError("--days must be >= 1")
    series, graph = synth_generate(args.nodes, args.days, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    flow_path = os.path.join(args.out_dir, "flow.stdn")
    edge_path = os.path.join(args.out_dir, "edges.csv")
    write_flow_binary(flow_path, series)
    write_edge_csv(edge_path, graph.edges)
    t, n, c = series.values.shape
    print(f"nodes={n} steps={t} channels={c} steps_per_day={series.steps_per_day}")
    print(f"flow={flow_path} bytes={os.path.getsize(flow_path)}")
    print(f"edges={edge_path} count={len(graph.edges)}")
    return 0


def cmd_convert(args) -> int:
    series = read_matrix_dump(args.input, steps_per_day=args.steps_per_day,
                              channels=args.channels,
                              start_day_of_week=args.start_day_of_week,
                              start_slot_of_day=args.start_slot)
    write_flow_binary(args.output, series)
    t, n, c = series.values.shape
    print(f"wrote {args.output}: steps={t} nodes={n} channels={c}")
    return 0


def cmd_train(args) -> int:
    cfg = _config_from(args)
    _, _, splits, model = _prepare(args, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    result = train(model, splits.train, splits.val, lr=cfg.lr,
                   batch_size=cfg.batch, patience=cfg.patience,
                   max_epochs=cfg.max_epochs, seed=cfg.seed,
                   timing=cfg.timing,
                   log=lambda line: print(line, file=sys.stderr))
    history_path = os.path.join(args.out_dir, "history.csv")
    ckpt_path = os.path.join(args.out_dir, "best.stdc")
    with open(history_path, "w", newline="") as fh:
        fh.write(history_to_csv(result.history))
    save_checkpoint(ckpt_path, result.best_state)
    print(f"epochs={len(result.history)} best_epoch={result.best_epoch} "
          f"best_val_mae={result.best_val_mae:.6f} "
          f"stopped_early={result.stopped_early}")
    print(f"history={history_path}")
    print(f"checkpoint={ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from(args)
    _, _, splits, model = _prepare(args, cfg)
    load_state(model, load_checkpoint(args.checkpoint))
    mae, rmse, mape = evaluate(model, _split_windows(splits, args.split),
                               batch_size=cfg.batch, threads=args.threads)
    print(f"{mae:.6f},{rmse:.6f},{mape:.6f}")
    return 0


def cmd_predict(args) -> int:
    cfg = _config_from(args)
    series, _, splits, model = _prepare(args, cfg)
    load_state(model, load_checkpoint(args.checkpoint))
    windows = _split_windows(splits, args.split)
    preds = predict_batches(model, windows, batch_size=cfg.batch)
    b, t_out, n, c = preds.shape
    out = FlowSeries(values=preds.reshape(b * t_out, n, c).astype(np.float32),
                     steps_per_day=series.steps_per_day,
                     start_day_of_week=int(windows[0].dow_out[0]),
                     start_slot_of_day=int(windows[0].tod_out[0]))
    write_flow_binary(args.out, out)
    print(f"wrote {args.out}: windows={b} horizon={t_out} nodes={n}")
    return 0


def _grad_check_model(seed: int) -> tuple[Model, tuple]:
    """Tiny double-precision model plus a batch touching every embedding row."""
    n, t, spd, channels = 3, 3, 6, 1
    cfg = ModelConfig(n_nodes=n, channels=channels, steps_per_day=spd,
                      t_in=t, t_out=t, heads=2, head_dim=4, blocks=1,
                      k_r=2, graph_embed_dim=2, hops=1)
    edges = [(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]
    graph = build_graph(edges, n, k_r=cfg.k_r)
    model = Model(cfg, graph.spectral_basis, np.zeros(1), np.ones(1), seed=seed)
    rng = np.random.default_rng(seed)
    b = 2
    x = rng.standard_normal((b, t, n, channels))
    y = rng.standard_normal((b, t, n, channels))
    # Cover all time slots and all seven days across the calendars so no
    # embedding row is left with an exactly zero gradient.
    tod_in = np.arange(b * t).reshape(b, t) % spd
    tod_out = (np.arange(b * t).reshape(b, t) + rng.integers(0, spd)) % spd
    dow_in = np.arange(b * t).reshape(b, t) % 7
    dow_out = (np.arange(b * t).reshape(b, t) + 3) % 7
    return model, (x, y, tod_in, dow_in, tod_out, dow_out)


def cmd_grad_check(args) -> int:
    worst_overall = 0.0
    print("seed,parameter,max_rel_err")
    for offset in range(args.seeds):
        seed = args.seed + offset
        model, (x, y, ti, di, to, do) = _grad_check_model(seed)
        target = T.Tensor(y)

        def loss_fn():
            pred = model.forward(x, ti, di, to, do)
            return T.mean(T.abs_(pred - target))

        # Floor 1e-6 absorbs central-difference rounding noise (~1e-11
        # absolute) on coordinates whose true gradient is near zero.
        report = check_gradients_named(loss_fn, model.named_parameters(),
                                       floor=1e-6)
        for name, err in report.items():
            print(f"{seed},{name},{err:.3e}")
        worst_overall = max(worst_overall, max(report.values()))
    print(f"worst={worst_overall:.3e} tol={args.tol:.1e}")
    if worst_overall >= args.tol:
        raise DivergenceError(
            f"gradient check failed: {worst_overall:.3e} >= {args.tol:.1e}")
    return 0


def cmd_inspect_graph(args) -> int:
    edges = read_edge_csv(args.edges)
    graph = build_graph(edges, args.nodes, mode=args.adjacency, k_r=1)
    k = min(10, args.nodes)
    head = ",".join(f"eig{i}" for i in range(k))
    vals = ",".join(f"{v:.8f}" for v in graph.eigenvalues[:k])
    print(f"nodes,edges,components,{head}")
    print(f"{args.nodes},{len(edges)},{component_count(args.nodes, edges)},{vals}")
    return 0


def cmd_inspect_decomposition(args) -> int:
    cfg = _config_from(args)
    _, windows, _, model = _prepare(args, cfg)
    load_state(model, load_checkpoint(args.checkpoint))
    if not 0 <= args.sample < len(windows):
        raise ConfigError(f"--sample must be in [0, {len(windows) - 1}]")
    x, _, ti, di, _, _ = collate(windows[args.sample:args.sample + 1])
    parts = model.decompose_window(x, ti, di)
    trend = np.abs(parts.trend.data[0]).mean(axis=(0, 2))
    seasonal = np.abs(parts.seasonal.data[0]).mean(axis=(0, 2))
    print("node,mean_abs_trend,mean_abs_seasonal")
    for node in range(trend.shape[0]):
        print(f"{node},{trend[node]:.6f},{seasonal[node]:.6f}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "convert": cmd_convert,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "grad-check": cmd_grad_check,
    "inspect-graph": cmd_inspect_graph,
    "inspect-decomposition": cmd_inspect_decomposition,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (DivergenceError, ConvergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FlowcastError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
