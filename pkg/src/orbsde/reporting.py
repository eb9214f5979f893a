"""Deterministic artifact writers: solution CSV, summaries, diagnostics.

Identical inputs must produce byte-identical files: floats are printed
with 17 significant digits (round-trip exact), rows are emitted in
canonical node/mode order, JSON keys are sorted, and line endings are LF
regardless of platform.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

from .oblique import ObliqueProblem, SystemSolution
from .tree import AdaptedProcess, PredictableIncrements

CSV_HEADER = "node_id,time_index,time,mode,y,dk,da,dm\n"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def write_json(path: Path, payload) -> None:
    write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def solution_csv_text(problem: ObliqueProblem, solution: SystemSolution) -> str:
    tree = problem.tree
    lines = [CSV_HEADER]
    for n in tree.nodes:
        for j in range(problem.d):
            lines.append(
                ",".join(
                    (
                        n.node_id,
                        str(n.t),
                        fmt(n.t * tree.dt),
                        str(j),
                        fmt(solution.y[j].values[n.index]),
                        fmt(solution.k[j].values[n.index]),
                        fmt(solution.a[j].values[n.index]),
                        fmt(solution.m_increments[j][n.index]),
                    )
                )
                + "\n"
            )
    return "".join(lines)


def write_solution_csv(
    path: Path, problem: ObliqueProblem, solution: SystemSolution
) -> None:
    write_text(path, solution_csv_text(problem, solution))


def load_solution_csv(path: Path, problem: ObliqueProblem) -> SystemSolution:
    """Rebuild a SystemSolution from a solve-emitted CSV (round-trip exact)."""
    tree = problem.tree
    d = problem.d
    y = [[0.0] * tree.n_nodes for _ in range(d)]
    k = [[0.0] * tree.n_nodes for _ in range(d)]
    a = [[0.0] * tree.n_nodes for _ in range(d)]
    m = [[0.0] * tree.n_nodes for _ in range(d)]
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != CSV_HEADER.strip():
            raise ValueError(f"unexpected solution CSV header: {header!r}")
        for line in fh:
            if not line.strip():
                continue
            node_id, _t, _time, mode, yv, dk, da, dm = line.rstrip("\n").split(",")
            i = tree.index_of(node_id)
            j = int(mode)
            y[j][i] = float(yv)
            k[j][i] = float(dk)
            a[j][i] = float(da)
            m[j][i] = float(dm)
    return SystemSolution(
        y=tuple(AdaptedProcess(tree, tuple(col)) for col in y),
        m_increments=tuple(tuple(col) for col in m),
        k=tuple(PredictableIncrements(tree, tuple(col)) for col in k),
        a=tuple(PredictableIncrements(tree, tuple(col)) for col in a),
        sweeps=0,
        deltas=(),
    )


def summary_text(payload: Mapping) -> str:
    lines = [f"scenario: {payload.get('scenario', '')}"]
    root = payload.get("root_values")
    if root is not None:
        lines.append(
            "root values: "
            + ", ".join(f"Y^{j} = {fmt(v)}" for j, v in enumerate(root))
        )
    for key in ("sweeps", "final_delta", "max_flat_off_residual", "worst_residual"):
        if key in payload:
            val = payload[key]
            lines.append(f"{key.replace('_', ' ')}: "
                         f"{fmt(val) if isinstance(val, float) else val}")
    for line in payload.get("notes", []):
        lines.append(f"note: {line}")
    return "\n".join(lines) + "\n"
