"""Trace CSVs, run summaries and comparison tables."""

from __future__ import annotations

import csv
import math
import statistics

import numpy as np

from .diagnostics import milestones

CSV_COLUMNS = ("run_id", "method", "seed", "epoch", "loss", "grad_norm", "residual_norm", "lr", "wall_ms")


def _num(x) -> str:
    # repr gives the shortest string that round-trips, so reruns are byte-identical
    return repr(float(x))


def write_trace_csv(path, run_id: str, label: str, seed: int, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in trace:
            writer.writerow(
                [
                    run_id,
                    label,
                    seed,
                    row.t,
                    _num(row.loss),
                    _num(row.grad_norm),
                    _num(row.residual_norm),
                    _num(row.lr),
                    f"{row.wall_ms:.3f}",
                ]
            )


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for rec in reader:
            rows.append(
                {
                    "run_id": rec["run_id"],
                    "method": rec["method"],
                    "seed": int(rec["seed"]),
                    "epoch": int(rec["epoch"]),
                    **{k: float(rec[k]) for k in CSV_COLUMNS[4:]},
                }
            )
        return rows


def _tau_key(tau) -> str:
    return repr(float(tau))


def cell_summary(label: str, seed: int, trace, thresholds) -> dict:
    losses = [row.loss for row in trace]
    final = losses[-1] if losses else None
    if final is not None and not math.isfinite(final):
        final = None
    reached = milestones(losses, thresholds)
    return {
        "method": label,
        "seed": seed,
        "final_loss": final,
        "diverged": bool(trace.diverged),
        "epochs_run": len(losses),
        "milestones": {_tau_key(t): e for t, e in reached.items()},
    }


def aggregate(cells, thresholds) -> dict:
    """Per-method statistics.

    Final-loss statistics use finished seeds only.  Milestone success rates
    count every seed, diverged ones included, in the denominator.
    """
    out = {}
    labels = list(dict.fromkeys(c["method"] for c in cells))
    for label in labels:
        mine = [c for c in cells if c["method"] == label]
        finished = [c["final_loss"] for c in mine if not c["diverged"] and c["final_loss"] is not None]
        entry = {
            "seeds": len(mine),
            "finished": len(finished),
            "diverged": sum(c["diverged"] for c in mine),
            "median_final_loss": statistics.median(finished) if finished else None,
            "best_final_loss": min(finished) if finished else None,
            "worst_final_loss": max(finished) if finished else None,
            "milestones": {},
        }
        for tau in thresholds:
            key = _tau_key(tau)
            epochs = [c["milestones"][key] for c in mine if key in c["milestones"]]
            entry["milestones"][key] = {
                "median_epoch": statistics.median(epochs) if epochs else None,
                "success_rate": len(epochs) / len(mine),
            }
        out[label] = entry
    return out


def summary(config_hash: str, cells, thresholds) -> dict:
    return {"config_hash": config_hash, "cells": list(cells), "aggregate": aggregate(cells, thresholds)}


def milestone_table(agg: dict, thresholds) -> str:
    """Plain-text table: one row per method, median epoch and success rate per threshold."""
    header = ["method", "median final loss"] + [f"epoch to {t:g} (success)" for t in thresholds]
    rows = []
    for label, entry in agg.items():
        med = entry["median_final_loss"]
        cols = [label, "-" if med is None else f"{med:.3e}"]
        for tau in thresholds:
            m = entry["milestones"][_tau_key(tau)]
            epoch = "-" if m["median_epoch"] is None else f"{m['median_epoch']:g}"
            cols.append(f"{epoch} ({100 * m['success_rate']:.0f}%)")
        rows.append(cols)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def line(cols):
        return "  ".join(c.ljust(w) for c, w in zip(cols, widths)).rstrip()

    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows]) + "\n"


def median_traces(traces_by_label: dict, epochs: int) -> list[list]:
    """Rows ``epoch, <label>_median, <label>_q25, <label>_q75, ...`` of the loss.

    At each epoch the quantiles are over the seeds that still have a row
    there; empty cells mean no seed reached that epoch.
    """
    header = ["epoch"]
    for label in traces_by_label:
        header += [f"{label}_median", f"{label}_q25", f"{label}_q75"]
    rows = [header]
    for epoch in range(epochs):
        row = [epoch]
        for traces in traces_by_label.values():
            vals = [tr[epoch].loss for tr in traces if len(tr) > epoch]
            if vals:
                q25, med, q75 = np.percentile(vals, [25, 50, 75])
                row += [_num(med), _num(q25), _num(q75)]
            else:
                row += ["", "", ""]
        rows.append(row)
    return rows


def write_rows(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
