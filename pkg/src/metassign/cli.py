"""Command-line entry point.

Subcommands: generate, assign, meta-train, meta-test, report, selftest.
All run-level settings come from an INI config file (see
demos/desk_config.ini) plus ``--set section.key=value`` overrides; ``--seed``
overrides both the generation and meta seeds. Errors print a single
``error: ...`` line on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .assignment import SolverOptions, bpr_cost, solve_ue
from .config import RunConfig, load_run_config
from .datasets import read_dataset, write_dataset
from .errors import MetassignError
from .evaluation import meta_test, rerender_report, write_report
from .meta import meta_train
from .model import FlowSurrogate, GatedGCNParams, load_params, save_params
from .network import parse_network, parse_node_coords, parse_trips
from .scenarios import generate_dataset


def _add_config_args(sub: argparse.ArgumentParser):
    sub.add_argument("--config", help="INI run-configuration file")
    sub.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="SECTION.KEY=VALUE", help="override a config value")
    sub.add_argument("--seed", type=int, default=None,
                     help="override generation and meta seeds")


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise MetassignError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        dotted, value = item.split("=", 1)
        overrides[dotted] = value
    if args.seed is not None:
        overrides.setdefault("generation.seed", str(args.seed))
        overrides.setdefault("meta.seed", str(args.seed))
    return load_run_config(getattr(args, "config", None), overrides)


def _read_text(path: str) -> str:
    with open(path) as f:
        return f.read()


def _load_network(args):
    network = parse_network(_read_text(args.net))
    if getattr(args, "nodes", None):
        network = parse_node_coords(_read_text(args.nodes), network)
    return network


def _read_mask(path: str, n_edges: int) -> np.ndarray:
    """Closure file: whitespace/newline-separated ids of closed edges."""
    closed = np.loadtxt(path, dtype=np.int64, ndmin=1)
    if closed.size and (closed.min() < 0 or closed.max() >= n_edges):
        raise MetassignError(f"mask file names edge ids outside 0..{n_edges - 1}")
    present = np.ones(n_edges, dtype=bool)
    present[closed] = False
    return present


def _progress(stream):
    def advance(done, total, *extra):
        if done == total or done % max(1, total // 100) == 0:
            tail = f" loss={extra[0]:.6g}" if extra else ""
            print(f"\r{done}/{total}{tail}", end="", file=stream, flush=True)
            if done == total:
                print(file=stream)
    return advance


def _cmd_generate(args) -> int:
    cfg = _load_config(args)
    network = _load_network(args)
    base_od = parse_trips(_read_text(args.trips))
    dataset = generate_dataset(network, base_od, cfg.generation, cfg.solver,
                               n_workers=args.workers,
                               progress=_progress(sys.stderr))
    write_dataset(dataset, args.out)
    print(f"wrote {len(dataset.samples)} samples "
          f"({cfg.generation.n_tasks} tasks x {cfg.generation.n_ods} ODs) to {args.out}")
    return 0


def _cmd_assign(args) -> int:
    network = _load_network(args)
    od = parse_trips(_read_text(args.trips))
    mask = _read_mask(args.mask, network.n_edges) if args.mask else None
    options = SolverOptions(method=args.method, gap_tolerance=args.gap,
                            max_iterations=args.max_iterations)
    result = solve_ue(network, mask, od, options, on_unreachable="drop")
    if not result.converged:
        print(f"warning: gap {result.relative_gap:.3g} > {args.gap:g} after "
              f"{result.iterations} iterations", file=sys.stderr)
    costs = bpr_cost(network.free_flow_time, network.capacity,
                     network.bpr_b, network.bpr_power, result.flows)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("edge_id,from,to,flow,cost,gap_at_exit\n")
        for e in range(network.n_edges):
            out.write(f"{e},{network.original_node_ids[network.from_node[e]]},"
                      f"{network.original_node_ids[network.to_node[e]]},"
                      f"{float(result.flows[e])!r},{float(costs[e])!r},"
                      f"{result.relative_gap!r}\n")
    finally:
        if args.out:
            out.close()
    return 0


def _cmd_meta_train(args) -> int:
    cfg = _load_config(args)
    dataset = read_dataset(args.data)
    model = FlowSurrogate(dataset.network,
                          cfg.model.hyper_for(dataset.network.n_zones))
    result = meta_train(model, dataset, cfg.meta, progress=_progress(sys.stderr))
    params = GatedGCNParams.from_named(model.hyper, result.theta)
    save_params(params, args.out)
    if args.history:
        with open(args.history, "w", newline="\n") as f:
            f.write("iteration,mean_query_loss,wall_time_s\n")
            for entry in result.history:
                f.write(f"{entry.iteration},{entry.mean_query_loss!r},"
                        f"{entry.wall_time_s!r}\n")
    print(f"best mean query loss {result.best_loss:.6g} at iteration "
          f"{result.best_iteration}; checkpoint written to {args.out}")
    return 0


def _cmd_meta_test(args) -> int:
    cfg = _load_config(args)
    dataset = read_dataset(args.data)
    params = load_params(args.checkpoint)
    model = FlowSurrogate(dataset.network, params.hyper)
    report = meta_test(model, params.named_parameters(), dataset, cfg.meta)
    write_report(report, args.out_dir)
    for task in report.per_task:
        print(f"task {task.task_id}: R^2 = {task.r_squared:.4f} "
              f"over {task.n_points} points, query loss {task.query_loss:.6g}")
    return 0


def _cmd_report(args) -> int:
    written = rerender_report(args.in_dir, args.out_dir)
    print(f"wrote {len(written)} files to {args.out_dir}")
    return 0


def _cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return run_selftest(quick=args.quick)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metassign",
        description="Equilibrium traffic assignment on disrupted networks "
                    "and a meta-trained graph-network surrogate.")
    subs = parser.add_subparsers(dest="command", required=True)

    gen = subs.add_parser("generate", help="build a closure/OD corpus with "
                                           "equilibrium targets")
    gen.add_argument("--net", required=True, help="network file (link format)")
    gen.add_argument("--trips", required=True, help="base trips file")
    gen.add_argument("--nodes", help="optional node coordinate file")
    gen.add_argument("--out", required=True, help="output dataset path")
    gen.add_argument("--workers", type=int, default=1)
    _add_config_args(gen)
    gen.set_defaults(func=_cmd_generate)

    assign = subs.add_parser("assign", help="solve one user-equilibrium assignment")
    assign.add_argument("--net", required=True)
    assign.add_argument("--trips", required=True)
    assign.add_argument("--nodes", help="optional node coordinate file")
    assign.add_argument("--mask", help="file listing closed edge ids")
    assign.add_argument("--method", default="bcfw", choices=["fw", "bfw", "bcfw"])
    assign.add_argument("--gap", type=float, default=1e-4)
    assign.add_argument("--max-iterations", type=int, default=500)
    assign.add_argument("--out", help="CSV output path (default: stdout)")
    assign.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    assign.set_defaults(func=_cmd_assign)

    train = subs.add_parser("meta-train", help="meta-train the surrogate on a dataset")
    train.add_argument("--data", required=True, help="dataset file from 'generate'")
    train.add_argument("--out", required=True, help="checkpoint output path")
    train.add_argument("--history", help="meta-loss history CSV path")
    _add_config_args(train)
    train.set_defaults(func=_cmd_meta_train)

    test = subs.add_parser("meta-test", help="adapt and score held-out tasks")
    test.add_argument("--data", required=True)
    test.add_argument("--checkpoint", required=True)
    test.add_argument("--out-dir", required=True)
    _add_config_args(test)
    test.set_defaults(func=_cmd_meta_test)

    rep = subs.add_parser("report", help="re-render plots and metrics from a "
                                         "report directory")
    rep.add_argument("--in-dir", required=True)
    rep.add_argument("--out-dir", required=True)
    rep.set_defaults(func=_cmd_report)

    self_test = subs.add_parser("selftest", help="run the built-in oracle and "
                                                 "property checks")
    self_test.add_argument("--quick", action="store_true",
                           help="skip the slower checks")
    self_test.set_defaults(func=_cmd_selftest)
    return parser


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except MetassignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())
