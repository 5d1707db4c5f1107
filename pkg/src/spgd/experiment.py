"""Run every (method, seed) cell of a config and write the results."""

from __future__ import annotations

import json
import os

from .config import RunConfig
from .errors import InvalidConfigError
from .optimizers import run
from .problems import DiscretePde, make_linear_lsq, make_mlp_regression, make_poisson, make_softmax_toy
from .report import cell_summary, median_traces, milestone_table, summary, write_rows, write_trace_csv


def build_problem(problem_cfg):
    kind = problem_cfg.kind
    kw = problem_cfg.kwargs()
    if kind == "linear_lsq":
        return make_linear_lsq(kw["m"], kw["n"], kw["kappa"], kw["seed"])
    if kind == "discrete_pde":
        return DiscretePde(kw["n"], kw["nonlinearity"], init_radius=kw["init_radius"])
    if kind == "mlp_regression":
        return make_mlp_regression(**kw)
    if kind == "poisson":
        return make_poisson(**kw)
    if kind == "softmax_toy":
        return make_softmax_toy(**kw)
    raise InvalidConfigError(f"unknown problem kind {kind!r}")


def cell_run_id(cfg: RunConfig, label: str) -> str:
    return f"{cfg.run_id}-{label}"


def trace_path(cfg: RunConfig, label: str, seed: int) -> str:
    return os.path.join(cfg.out, f"{cell_run_id(cfg, label)}-{seed}.csv")


def run_cells(cfg: RunConfig, progress=None) -> dict:
    """Train every cell; returns ``{label: [trace per seed]}``.

    Each cell gets a freshly built problem, so cells share no state.
    """
    traces = {}
    for m in cfg.methods:
        traces[m.label] = []
        for seed in cfg.seeds:
            problem = build_problem(cfg.problem)
            trace = run(problem, m.method, m.hyper, cfg.epochs, seed=seed)
            traces[m.label].append(trace)
            if progress is not None:
                progress(m.label, seed, trace)
    return traces


def write_outputs(cfg: RunConfig, traces: dict) -> dict:
    """Write one CSV per cell and ``<id>-summary.json``; returns the summary."""
    os.makedirs(cfg.out, exist_ok=True)
    cells = []
    for label, per_seed in traces.items():
        for seed, trace in zip(cfg.seeds, per_seed):
            write_trace_csv(trace_path(cfg, label, seed), cell_run_id(cfg, label), label, seed, trace)
            cells.append(cell_summary(label, seed, trace, cfg.thresholds))
    result = summary(cfg.hash(), cells, cfg.thresholds)
    with open(os.path.join(cfg.out, f"{cfg.run_id}-summary.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return result


def write_comparison(cfg: RunConfig, traces: dict, result: dict) -> str:
    """Milestone table (returned and saved) plus the median-trace CSV."""
    table = milestone_table(result["aggregate"], cfg.thresholds)
    with open(os.path.join(cfg.out, f"{cfg.run_id}-milestones.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    write_rows(os.path.join(cfg.out, f"{cfg.run_id}-median.csv"), median_traces(traces, cfg.epochs))
    return table
