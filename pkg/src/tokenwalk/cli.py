"""Command line entry point: ``run``, ``compare`` and ``verify``.

Every option can also come from a ``key = value`` file passed with
``--config`` (keys are the long option names, dashes or underscores).
Command line flags override the file.  The default output directory is
``$TOKENWALK_OUT`` or ``./tokenwalk_out``.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bregman_verify as bv
from .accelerated import init_tavr, params_tavr, run_tavr
from .baselines import BASELINE_KINDS, run_baseline
from .exceptions import ConfigError, TokenWalkError
from .graph import (WALK_KINDS, CommGraph, complete_graph, random_walk, read_edge_list,
                    ring_graph)
from .metrics import (X_AXES, Trace, comparison_table, emit_csv, emit_plot_data, predict,
                      write_text)
from .objective import (LOSS_KINDS, Problem, ReferenceSolution, load_libsvm, make_synthetic,
                        problem_from_samples, smoothness_profile, solve_reference)
from .simulator import draw_schedule, run_simulated, skip_plan
from .token_core import init_state, params_tgd, params_tvr, run

ENV_OUT = "TOKENWALK_OUT"
TOKEN_ALGOS = ("tgd", "tvr", "tavr")
ALGOS = TOKEN_ALGOS + BASELINE_KINDS
METRICS = ("node", "token", "both")
DIRECT_ITERS = 10_000_000
SCHEDULE_ITERS = 200_000


def _int_list(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _str_list(text: str) -> tuple[str, ...]:
    vals = tuple(v for v in str(text).replace(" ", "").split(",") if v)
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _skip(text: str) -> str | int:
    text = str(text).strip().lower()
    if text in ("auto", "none"):
        return text
    try:
        return int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("skip must be auto, none or a jump count") from exc


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce a run or a comparison."""

    algorithms: tuple[str, ...]
    graph: str = "complete"
    n: int = 10
    m: int = 20
    d: int = 5
    loss: str = "logistic"
    sigma: float = 1e-2
    data: str | None = None
    problem_seed: int | None = None
    K_values: tuple[int, ...] = (1,)
    seeds: tuple[int, ...] = (0,)
    eps: float | None = 1e-8
    max_iters: int | None = None
    metric: str = "both"
    tau_comm: float = 1000.0
    tau_comp: float = 1.0
    walk: str = "lazy"
    lazy_beta: float = 0.5
    skip: str | int = "auto"
    check_every: int | None = None
    out: Path = field(default_factory=lambda: Path(os.environ.get(ENV_OUT, "tokenwalk_out")))
    plot_axes: tuple[str, ...] = ("comm", "comp", "time")

    def validate(self) -> None:
        for a in self.algorithms:
            if a not in ALGOS:
                raise ConfigError(f"unknown algorithm {a!r}; choose from {', '.join(ALGOS)}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.n < 2 or self.m < 1 or self.d < 1:
            raise ConfigError("need n >= 2, m >= 1 and d >= 1")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        for K in self.K_values:
            if not 1 <= K <= self.n:
                raise ConfigError(f"K must lie in [1, n], got {K}")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError("eps must be positive")
        if self.max_iters is not None and self.max_iters < 1:
            raise ConfigError("max-iters must be positive")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}")
        if not (self.tau_comm >= 0 and self.tau_comp >= 0):
            raise ConfigError("latencies must be nonnegative")
        if self.walk not in WALK_KINDS:
            raise ConfigError(f"walk must be one of {WALK_KINDS}")
        if not 0 <= self.lazy_beta < 1:
            raise ConfigError("lazy-beta must lie in [0, 1)")
        if isinstance(self.skip, int) and self.skip < 1:
            raise ConfigError("skip must be a positive jump count")
        if self.check_every is not None and self.check_every < 1:
            raise ConfigError("check-every must be positive")
        for ax in self.plot_axes:
            if ax not in X_AXES:
                raise ConfigError(f"plot axis must be one of {tuple(X_AXES)}")
        if self.data is not None and not Path(self.data).is_file():
            raise ConfigError(f"data file not found: {self.data}")
        if self.out.exists() and not self.out.is_dir():
            raise ConfigError(f"output path is not a directory: {self.out}")


# ---------------------------------------------------------------------------
# building blocks


def build_graph(cfg: ExperimentConfig) -> CommGraph:
    if cfg.graph == "complete":
        return complete_graph(cfg.n)
    if cfg.graph == "ring":
        return ring_graph(cfg.n)
    path = Path(cfg.graph)
    if not path.is_file():
        raise ConfigError(f"graph must be complete, ring or an edge-list file: {cfg.graph}")
    g = read_edge_list(path, cfg.n)
    if g.n != cfg.n:
        raise ConfigError(f"graph has {g.n} nodes but n={cfg.n}")
    return g


def build_problem(cfg: ExperimentConfig) -> Problem:
    if cfg.data is not None:
        X, y = load_libsvm(cfg.data)
        return problem_from_samples(X, y, cfg.n, cfg.m, cfg.loss, cfg.sigma)
    seed = cfg.seeds[0] if cfg.problem_seed is None else cfg.problem_seed
    return make_synthetic(cfg.n, cfg.m, cfg.d, cfg.loss, seed=seed, sigma=cfg.sigma)


def iteration_cap(cfg: ExperimentConfig, scheduled: bool) -> int:
    """Explicit cap, else a default; drawn schedules are held in memory so get less."""
    if cfg.max_iters is not None:
        return cfg.max_iters
    return SCHEDULE_ITERS if scheduled else DIRECT_ITERS


def run_one(cfg: ExperimentConfig, algo: str, K: int, seed: int, problem: Problem,
            reference: ReferenceSolution, graph: CommGraph) -> Trace:
    """One algorithm run; token methods on non-complete graphs use the skip protocol."""
    label = f"{algo}_K{K}_seed{seed}"
    common = dict(eps=cfg.eps, metric=cfg.metric, tau_comm=cfg.tau_comm, tau_comp=cfg.tau_comp)
    if algo in BASELINE_KINDS:
        trace = run_baseline(algo, problem, reference, graph,
                             max_rounds=iteration_cap(cfg, False),
                             check_every=cfg.check_every or 1, seed=seed, **common)
        trace.label = label
        return trace
    use_skip = cfg.skip != "none" and (not graph.is_complete or isinstance(cfg.skip, int))
    if algo == "tavr":
        params = params_tavr(problem, K)
        state = init_tavr(problem, params, seed=seed)
        if not use_skip and graph.is_complete:
            _, trace = run_tavr(state, reference, max_iters=iteration_cap(cfg, False),
                                check_every=cfg.check_every, label=label, **common)
            return trace
        walk = _walk(cfg, graph)
        sched = draw_schedule(params, graph, walk, iteration_cap(cfg, True), seed, skip=cfg.skip)
        return run_simulated(state, sched, reference, check_every=cfg.check_every,
                             label=label, **common)
    params = (params_tgd if algo == "tgd" else params_tvr)(problem, K)
    if not use_skip:
        if not graph.is_complete:
            walk = _walk(cfg, graph)
            state = init_state(problem, params, seed=seed)
            sched = draw_schedule(params, graph, walk, iteration_cap(cfg, True), seed,
                                  allow_no_skip=True)
            return run_simulated(state, sched, reference, check_every=cfg.check_every,
                                 label=label, **common)
        state = init_state(problem, params, seed=seed)
        _, trace = run(state, reference, max_iters=iteration_cap(cfg, False),
                       check_every=cfg.check_every, label=label, **common)
        return trace
    walk = _walk(cfg, graph)
    plan = skip_plan(params, walk)
    jumps = cfg.skip if isinstance(cfg.skip, int) else plan.jumps
    state = init_state(problem, plan.params, seed=seed)
    sched = draw_schedule(plan.params, graph, walk, iteration_cap(cfg, True), seed, skip=jumps)
    trace = run_simulated(state, sched, reference, check_every=cfg.check_every,
                          node_rho=plan.node_rho, label=label, **common)
    trace.meta.update({"skip": jumps, "eta": plan.eta})
    return trace


def _walk(cfg: ExperimentConfig, graph: CommGraph):
    kind = "uniform_jump" if graph.is_complete and cfg.walk == "uniform_jump" else cfg.walk
    return random_walk(graph, kind, cfg.lazy_beta)


def _summary(trace: Trace) -> dict:
    last = trace.last
    status = "reached" if trace.reached else ("diverged" if trace.diverged else "truncated")
    return {"label": trace.label, "status": status, "iterations": last.t,
            "err_node": last.err_node, "err_token": last.err_token,
            "comm_total": last.comm_total, "comm_per_token": last.comm_per_token,
            "grads_per_node": last.grads_per_node, "time": last.time}


def _prepare(cfg: ExperimentConfig) -> tuple[Problem, ReferenceSolution, CommGraph]:
    cfg.validate()
    graph = build_graph(cfg)
    if "tavr" in cfg.algorithms and not graph.is_complete and not isinstance(cfg.skip, int):
        raise ConfigError("TAVR on a general graph needs an explicit --skip jump count")
    problem = build_problem(cfg)
    reference = solve_reference(problem)
    return problem, reference, graph


def _write_outputs(cfg: ExperimentConfig, traces: dict[str, Trace]) -> list[Path]:
    paths = []
    for label, trace in traces.items():
        paths.append(emit_csv(trace, cfg.out / f"{label}.csv"))
    for ax in cfg.plot_axes:
        paths += emit_plot_data(traces, ax, cfg.out / "plots")
    return paths


# ---------------------------------------------------------------------------
# subcommands


def cli_run(cfg: ExperimentConfig) -> int:
    problem, reference, graph = _prepare(cfg)
    traces = {}
    for algo in cfg.algorithms:
        for K in cfg.K_values:
            for seed in cfg.seeds:
                tr = run_one(cfg, algo, K, seed, problem, reference, graph)
                traces[tr.label] = tr
    paths = _write_outputs(cfg, traces)
    rows = [_summary(t) for t in traces.values()]
    paths.append(write_text(cfg.out / "summary.csv", comparison_table(rows)))
    sys.stdout.write(comparison_table(rows))
    print(f"wrote {len(paths)} files to {cfg.out}")
    return 0 if cfg.eps is None or all(t.reached for t in traces.values()) else 1


def cli_compare(cfg: ExperimentConfig) -> int:
    problem, reference, graph = _prepare(cfg)
    prof = smoothness_profile(problem)
    traces: dict[str, Trace] = {}
    rows = []
    for algo in cfg.algorithms:
        for K in cfg.K_values:
            group = []
            for seed in cfg.seeds:
                tr = run_one(cfg, algo, K, seed, problem, reference, graph)
                traces[tr.label] = tr
                group.append(tr)
            rows.append(_compare_row(algo, K, group, problem, prof, cfg))
    paths = _write_outputs(cfg, traces)
    table = comparison_table(rows)
    paths.append(write_text(cfg.out / "comparison.csv", table))
    sys.stdout.write(table)
    print(f"wrote {len(paths)} files to {cfg.out}")
    return 0 if cfg.eps is None or all(t.reached for t in traces.values()) else 1


def _compare_row(algo: str, K: int, group: list[Trace], problem: Problem, prof,
                 cfg: ExperimentConfig) -> dict:
    lasts = [t.last for t in group]
    row = {"algorithm": algo, "K": K, "seeds": len(group),
           "reached": sum(t.reached for t in group),
           "comm_total": float(np.mean([r.comm_total for r in lasts])),
           "comm_per_token": float(np.mean([r.comm_per_token for r in lasts])),
           "grads_per_node": float(np.mean([r.grads_per_node for r in lasts])),
           "time": float(np.mean([r.time for r in lasts]))}
    if algo in TOKEN_ALGOS:
        st = problem.n * problem.sigma / (problem.n + K)
        pred = predict(algo, problem.n, problem.m, K, prof.kappa, prof.kappa_s(st))
        logf = math.log(1.0 / cfg.eps) if cfg.eps is not None and cfg.eps < 1 else 1.0
        row["pred_comm_per_token"] = pred.comm_per_token * logf
        row["pred_grads_per_node"] = pred.grads_per_node * logf
        row["ratio_comm"] = row["comm_per_token"] / row["pred_comm_per_token"]
        row["ratio_grads"] = row["grads_per_node"] / row["pred_grads_per_node"]
    return row


VERIFY_INSTANCES = {
    # (n, m, d, K, seed)
    "quick": ((2, 1, 2, 1, 0), (3, 2, 2, 2, 1)),
    "full": ((2, 1, 2, 1, 0), (2, 2, 3, 2, 1), (3, 1, 2, 1, 2), (3, 2, 2, 2, 3),
             (3, 2, 3, 1, 4), (2, 2, 2, 1, 5)),
}


def cli_verify(level: str, out: Path, mu_reference: str = "claimed",
               samples: int | None = None) -> int:
    """Run the dual/Bregman checks on tiny quadratic instances."""
    if level not in VERIFY_INSTANCES:
        raise ConfigError(f"level must be one of {tuple(VERIFY_INSTANCES)}")
    if mu_reference not in ("claimed", "certified"):
        raise ConfigError("mu reference must be claimed or certified")
    if out.exists() and not out.is_dir():
        raise ConfigError(f"output path is not a directory: {out}")
    samples = samples or (2000 if level == "quick" else 10_000)
    trials = 100 if level == "quick" else 1000
    reports: list[tuple[str, bv.Report]] = []
    for n, m, d, K, seed in VERIFY_INSTANCES[level]:
        name = f"n{n}_m{m}_d{d}_K{K}_s{seed}"
        problem = make_synthetic(n, m, d, "quadratic", seed=seed, sigma=0.1)
        params = params_tvr(problem, K)
        dp = bv.DualProblem(problem, K, params.alpha, params.sigma_tilde)
        st = dp.sigma_tilde
        mu_cert = K / (2.0 * st * smoothness_profile(problem).kappa_s(st))
        claim = params.alpha / 2.0 if mu_reference == "claimed" else mu_cert
        cfg = bv.bound_config(dp)
        reports.append((name, bv.check_constants(dp, samples, seed, mu_claim=claim)))
        reports.append((name, bv.check_monotonicity(dp, cfg, trials, seed)))
        reports.append((name, bv.check_contraction(dp, cfg, 50, seed)))
        neg = bv.check_monotonicity(dp, bv.bound_config(dp, scale=10.0, check_bound=False),
                                    trials, seed)
        reports.append((name, bv.Report("negative_control_detected", not neg.passed,
                                        {"max_relative_increase":
                                         neg.values["max_relative_increase"]})))
        dev, _ = bv.coupled_run(problem, params, 500, seed)
        reports.append((name, bv.Report("primal_dual_equivalence", dev <= 1e-10,
                                        {"max_deviation": dev})))
    lines = []
    rows = [("instance", "check", "key", "value")]
    for name, rep in reports:
        lines.append(f"[{name}] " + rep.lines()[0])
        lines += rep.lines()[1:]
        rows += [(name,) + r for r in rep.rows()]
        rows.append((name, rep.name, "passed", str(rep.passed)))
    text = "\n".join(lines) + "\n"
    csv_text = "\n".join(",".join(r) for r in rows) + "\n"
    write_text(out / f"verify_{level}.txt", text)
    write_text(out / f"verify_{level}.csv", csv_text)
    sys.stdout.write(text)
    failed = [f"{name}:{rep.name}" for name, rep in reports if not rep.passed]
    if failed:
        print(f"{len(failed)} checks failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_experiment_args(p: argparse.ArgumentParser, multi: bool) -> None:
    if multi:
        p.add_argument("--algos", type=_str_list, default="tgd,tvr,tavr",
                       help="comma-separated algorithms")
        p.add_argument("--K-values", dest="K_values", type=_int_list, default="1",
                       help="comma-separated token counts")
        p.add_argument("--seeds", type=_int_list, default="0,1,2")
    else:
        p.add_argument("--algo", choices=ALGOS, default="tgd")
        p.add_argument("--K", type=int, default=1, help="number of tokens")
        p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graph", default="complete", help="complete, ring or an edge-list file")
    p.add_argument("--n", type=int, default=10, help="number of nodes")
    p.add_argument("--m", type=int, default=20, help="samples per node")
    p.add_argument("--d", type=int, default=5, help="dimension of synthetic data")
    p.add_argument("--loss", choices=LOSS_KINDS, default="logistic")
    p.add_argument("--sigma", type=float, default=1e-2, help="l2 regularisation")
    p.add_argument("--data", default=None, help="libsvm file instead of synthetic data")
    p.add_argument("--problem-seed", type=int, default=None)
    p.add_argument("--eps", type=float, default=1e-8, help="target squared error")
    p.add_argument("--max-iters", type=int, default=None,
                   help=f"iteration cap (default {DIRECT_ITERS}, {SCHEDULE_ITERS} for walk schedules)")
    p.add_argument("--metric", choices=METRICS, default="both")
    p.add_argument("--tau-comm", type=float, default=1000.0)
    p.add_argument("--tau-comp", type=float, default=1.0)
    p.add_argument("--walk", choices=WALK_KINDS, default="lazy")
    p.add_argument("--lazy-beta", type=float, default=0.5)
    p.add_argument("--skip", type=_skip, default="auto",
                   help="auto, none, or a fixed number of jumps before each average")
    p.add_argument("--check-every", type=int, default=None)
    p.add_argument("--plot-axes", type=_str_list, default="comm,comp,time")
    _add_common(p)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", type=Path, default=None,
                   help=f"output directory (default ${ENV_OUT} or ./tokenwalk_out)")
    p.add_argument("--config", type=Path, default=None, help="key = value option file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tokenwalk",
                                     description="Token algorithms for decentralized learning.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_experiment_args(sub.add_parser("run", help="run one algorithm"), multi=False)
    _add_experiment_args(sub.add_parser("compare", help="compare algorithms and token counts"),
                         multi=True)
    v = sub.add_parser("verify", help="numerical checks of the dual coordinate descent theory")
    v.add_argument("--level", choices=tuple(VERIFY_INSTANCES), default="quick")
    v.add_argument("--mu", dest="mu_reference", choices=("claimed", "certified"),
                   default="claimed", help="strong convexity constant to certify")
    v.add_argument("--samples", type=int, default=None)
    _add_common(v)
    return parser


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:  # noqa: SLF001
        if isinstance(action, argparse._SubParsersAction):  # noqa: SLF001
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    values = read_config_file(args.config)
    sub = _subparser(parser, args.command)
    known = {a.dest for a in sub._actions}  # noqa: SLF001
    unknown = sorted(set(values) - known - {"config"})
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    values.pop("config", None)
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    out = args.out if args.out is not None else Path(os.environ.get(ENV_OUT, "tokenwalk_out"))
    if args.command == "run":
        algos, Ks, seeds = (args.algo,), (args.K,), (args.seed,)
    else:
        algos, Ks, seeds = args.algos, args.K_values, args.seeds
    return ExperimentConfig(
        algorithms=tuple(algos), graph=args.graph, n=args.n, m=args.m, d=args.d,
        loss=args.loss, sigma=args.sigma, data=args.data, problem_seed=args.problem_seed,
        K_values=tuple(Ks), seeds=tuple(seeds), eps=args.eps, max_iters=args.max_iters,
        metric=args.metric, tau_comm=args.tau_comm, tau_comp=args.tau_comp, walk=args.walk,
        lazy_beta=args.lazy_beta, skip=args.skip, check_every=args.check_every, out=out,
        plot_axes=tuple(args.plot_axes))


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        if args.command == "verify":
            out = args.out if args.out is not None else Path(os.environ.get(ENV_OUT,
                                                                            "tokenwalk_out"))
            return cli_verify(args.level, out, args.mu_reference, args.samples)
        cfg = config_from_args(args)
        if args.command == "run":
            return cli_run(cfg)
        return cli_compare(cfg)
    except (TokenWalkError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
