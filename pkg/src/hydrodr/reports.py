"""Report assembly and emission: JSON, CSV and aligned text tables.

CSV outputs are byte-deterministic under a fixed seed: they carry no
wall-clock fields (timings live in the JSON reports, which double as the
run metadata).  Floats are serialized with repr so reruns reproduce files
exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

EVAL_CSV_FIELDS = ["model", "plan", "mean_cost", "std_cost", "max_dev", "n_failed"]
COMPARE_CSV_FIELDS = ["model", "plan", "mean_cost", "std_cost", "gap_pct",
                      "max_dev", "n_failed"]


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, fields: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row[f]) for f in fields])


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def eval_report(model: str, case_hash: str, scenario_hash: str, test_seed: int,
                n_test: int, stats, timing: dict, extra: dict | None = None) -> dict:
    doc = {
        "model": model,
        "plan": "dcll",
        "case_hash": case_hash,
        "scenario_hash": scenario_hash,
        "test_seed": test_seed,
        "n_test": n_test,
        "mean_cost": stats.mean_cost,
        "std_cost": stats.std_cost,
        "max_dev": getattr(stats, "max_dev", 0.0),
        "n_failed": stats.n_failed,
        "timing": timing,
    }
    if extra:
        doc.update(extra)
    return doc


def write_eval_outputs(outdir, report: dict) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_json(outdir / "eval_report.json", report)
    row = {f: report[f] for f in EVAL_CSV_FIELDS}
    write_csv(outdir / "eval.csv", EVAL_CSV_FIELDS, [row])


class CompareError(ValueError):
    pass


@dataclass
class CompareRow:
    model: str
    plan: str
    mean_cost: float
    std_cost: float
    gap_pct: float
    max_dev: float
    n_failed: int
    train_minutes: float | None
    exec_seconds_per_decision: float | None


def build_compare(reports: list[dict]) -> list[CompareRow]:
    """Validate that runs share one test set, order by cost, compute gaps."""
    if len(reports) < 1:
        raise CompareError("nothing to compare")
    keyfields = ("case_hash", "scenario_hash", "test_seed", "n_test")
    key0 = tuple(reports[0].get(k) for k in keyfields)
    for rep in reports[1:]:
        key = tuple(rep.get(k) for k in keyfields)
        if key != key0:
            raise CompareError(
                f"mismatched test sets: {rep['model']} ran on {key}, expected {key0}")
    ordered = sorted(reports, key=lambda r: (r["mean_cost"], r["model"]))
    best = ordered[0]["mean_cost"]
    rows = []
    for rep in ordered:
        timing = rep.get("timing", {})
        rows.append(CompareRow(
            model=rep["model"], plan=rep["plan"],
            mean_cost=rep["mean_cost"], std_cost=rep["std_cost"],
            gap_pct=100.0 * (rep["mean_cost"] - best) / best if best else 0.0,
            max_dev=rep.get("max_dev", 0.0), n_failed=rep.get("n_failed", 0),
            train_minutes=timing.get("train_minutes"),
            exec_seconds_per_decision=timing.get("exec_seconds_per_decision")))
    return rows


def compare_table(rows: list[CompareRow]) -> str:
    """Six-column aligned text table (cost comparisons first)."""
    header = ["Model", "Plan", "Imp Cost (USD)", "GAP (%)", "Training (Min)",
              "Execution (Min)"]
    body = []
    for r in rows:
        cost = f"{r.mean_cost:.2f} (+- {r.std_cost:.2f})"
        gap = "-" if r.gap_pct == 0.0 else f"{r.gap_pct:.2f}"
        train = "-" if r.train_minutes is None else f"{r.train_minutes:.4g}"
        ex = "-" if r.exec_seconds_per_decision is None \
            else f"{r.exec_seconds_per_decision / 60.0:.4g}"
        body.append([r.model, r.plan, cost, gap, train, ex])
    widths = [max(len(header[i]), *(len(row[i]) for row in body)) if body else len(header[i])
              for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in body:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def write_compare_outputs(outdir, rows: list[CompareRow], reports: list[dict]) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    csv_rows = [{"model": r.model, "plan": r.plan, "mean_cost": r.mean_cost,
                 "std_cost": r.std_cost, "gap_pct": r.gap_pct,
                 "max_dev": r.max_dev, "n_failed": r.n_failed} for r in rows]
    write_csv(outdir / "compare.csv", COMPARE_CSV_FIELDS, csv_rows)
    doc = {"rows": [vars(r) for r in rows], "reports": reports}
    write_json(outdir / "compare.json", doc)
    (outdir / "compare_table.txt").write_text(compare_table(rows))


def write_curve_csv(path, curve: list[dict]) -> None:
    fields = ["epoch", "train_loss", "val_mean", "val_std", "grad_norm", "seconds"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in curve:
            writer.writerow([_fmt("" if row[f] is None else row[f]) for f in fields])
