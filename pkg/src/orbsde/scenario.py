"""Scenario files: a versioned JSON description of a solvable problem.

Generator, cost, barrier and terminal specifications are restricted to
families that satisfy the structural hypotheses by construction (own
component decreasing, other components nondecreasing, positive costs), so
a parsed scenario either builds a validator-clean problem or the run
aborts with the validator report.  Time-dependent coefficients are always
evaluated at physical time ``t_index * dt``.

Schema (format 1), fully documented in the README:

    format         1
    name           optional label
    tree           {"kind": "chain" | "binomial" | "explicit", ...}
    modes          d >= 2
    generators     one spec per mode: constant | linear | affine-coupled | table
    costs          d x d matrix of constants or {"poly": [c0, c1, ...]}
    barriers       one upper-barrier spec per mode: constant | linear | table
    terminal       {"kind": "table" | "price-affine", ...}
    v_increments   optional, per mode: {parent node id: edge increment}
    solver         tolerances, sweep budget, enumeration caps, corner slack
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .oblique import CostMatrix, ObliqueProblem
from .tree import AdaptedProcess, EventTree, PredictableIncrements

__all__ = ["Scenario", "ScenarioError", "SOLVER_DEFAULTS"]

SOLVER_DEFAULTS = {
    "tol": 1e-10,
    "max_sweeps": 200,
    "stopping_depth_cap": 4,
    "stopping_count_cap": 10**6,
    "strategy_cap": 10**6,
    "subsolution_slack": 0.0,
}

PENALTY_LADDER = (1.0, 10.0, 100.0, 1000.0, 1e6)


class ScenarioError(ValueError):
    """Malformed scenario file (structure, not mathematics)."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def _poly_eval(coeffs: Sequence[float], x: float) -> float:
    acc = 0.0
    for c in reversed(list(coeffs)):
        acc = acc * x + float(c)
    return acc


def _cost_entry(entry: Any) -> dict | float:
    if isinstance(entry, (int, float)):
        return float(entry)
    if isinstance(entry, dict) and set(entry) == {"poly"}:
        return {"poly": [float(c) for c in entry["poly"]]}
    raise ScenarioError(f"bad cost entry {entry!r}")


def _cost_value(entry: dict | float, time: float) -> float:
    if isinstance(entry, dict):
        return _poly_eval(entry["poly"], time)
    return entry


@dataclass
class Scenario:
    """Parsed scenario; ``normalized()`` is the canonical round-trip form."""

    tree_spec: dict
    modes: int
    generators: list[dict]
    costs: list[list[dict | float]]
    barriers: list[dict]
    terminal: dict
    v_increments: list[dict]
    solver: dict
    name: str = ""

    # -- parsing -----------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Scenario":
        _require(isinstance(raw, Mapping), "scenario must be a JSON object")
        _require(raw.get("format") == 1, "unsupported or missing format (need 1)")
        for key in ("tree", "modes", "generators", "costs", "barriers", "terminal"):
            _require(key in raw, f"missing field {key!r}")
        d = int(raw["modes"])
        _require(d >= 2, "need at least two modes")

        tree_spec = cls._parse_tree(raw["tree"])
        gens = [cls._parse_generator(g, d) for g in raw["generators"]]
        _require(len(gens) == d, "one generator spec per mode required")
        costs = raw["costs"]
        _require(
            isinstance(costs, list) and len(costs) == d
            and all(isinstance(row, list) and len(row) == d for row in costs),
            "costs must be a d x d matrix",
        )
        cost_rows = [[_cost_entry(e) for e in row] for row in costs]
        for j in range(d):
            _require(cost_rows[j][j] == 0.0, f"cost diagonal [{j}][{j}] must be 0")
        barriers = [cls._parse_barrier(b) for b in raw["barriers"]]
        _require(len(barriers) == d, "one barrier spec per mode required")
        terminal = cls._parse_terminal(raw["terminal"], d)
        v_raw = raw.get("v_increments") or [{} for _ in range(d)]
        _require(
            isinstance(v_raw, list) and len(v_raw) == d,
            "v_increments must list one parent->increment map per mode",
        )
        v_increments = [
            {str(k): float(v) for k, v in (entry or {}).items()} for entry in v_raw
        ]
        solver = dict(SOLVER_DEFAULTS)
        for k, v in (raw.get("solver") or {}).items():
            _require(k in SOLVER_DEFAULTS, f"unknown solver option {k!r}")
            solver[k] = type(SOLVER_DEFAULTS[k])(v)
        return cls(
            tree_spec=tree_spec,
            modes=d,
            generators=gens,
            costs=cost_rows,
            barriers=barriers,
            terminal=terminal,
            v_increments=v_increments,
            solver=solver,
            name=str(raw.get("name", "")),
        )

    @classmethod
    def from_file(cls, path) -> "Scenario":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as err:
            raise ScenarioError(f"cannot read scenario: {err}") from err
        except json.JSONDecodeError as err:
            raise ScenarioError(f"scenario is not valid JSON: {err}") from err
        return cls.from_dict(raw)

    @staticmethod
    def _parse_tree(spec: Mapping) -> dict:
        _require(isinstance(spec, Mapping), "tree must be an object")
        kind = spec.get("kind")
        dt = float(spec.get("dt", 0.0))
        _require(dt > 0.0, "tree.dt must be positive")
        if kind == "chain":
            steps = int(spec["steps"])
            _require(steps >= 1, "chain needs steps >= 1")
            return {"kind": "chain", "steps": steps, "dt": dt,
                    "x0": float(spec.get("x0", 1.0))}
        if kind == "binomial":
            steps = int(spec["steps"])
            _require(steps >= 1, "binomial needs steps >= 1")
            p_up = float(spec.get("p_up", 0.5))
            _require(0.0 < p_up < 1.0, "p_up must lie in (0, 1)")
            return {
                "kind": "binomial", "steps": steps, "dt": dt, "p_up": p_up,
                "x0": float(spec.get("x0", 1.0)),
                "up": float(spec.get("up", 1.0)),
                "down": float(spec.get("down", 1.0)),
            }
        if kind == "explicit":
            nodes = spec.get("nodes")
            _require(isinstance(nodes, list) and nodes, "explicit tree needs nodes")
            out = []
            for n in nodes:
                entry = {
                    "id": str(n["id"]),
                    "t": int(n["t"]),
                    "parent": None if n.get("parent") is None else str(n["parent"]),
                    "p": float(n.get("p", 1.0)),
                }
                if "price" in n:
                    entry["price"] = float(n["price"])
                out.append(entry)
            out.sort(key=lambda e: (e["t"], e["id"]))
            return {"kind": "explicit", "dt": dt, "nodes": out}
        raise ScenarioError(f"unknown tree kind {kind!r}")

    @staticmethod
    def _parse_generator(spec: Mapping, d: int) -> dict:
        _require(isinstance(spec, Mapping), "generator must be an object")
        fam = spec.get("family")
        if fam == "constant":
            return {"family": "constant", "a": float(spec["a"])}
        if fam == "linear":
            b = float(spec["b"])
            _require(b >= 0.0, "linear generator needs b >= 0")
            return {"family": "linear", "a": float(spec["a"]), "b": b}
        if fam == "affine-coupled":
            b = float(spec["b"])
            _require(b >= 0.0, "affine-coupled generator needs b >= 0")
            g = [float(x) for x in spec["g"]]
            _require(len(g) == d, "coupling vector must have one entry per mode")
            _require(all(x >= 0.0 for x in g), "coupling weights must be >= 0")
            return {"family": "affine-coupled", "a": float(spec["a"]), "b": b, "g": g}
        if fam == "table":
            times = [float(x) for x in spec["times"]]
            grid = [float(x) for x in spec["grid"]]
            values = [[float(v) for v in row] for row in spec["values"]]
            _require(len(times) >= 1 and len(grid) >= 2, "table too small")
            _require(sorted(times) == times, "table times must be ascending")
            _require(sorted(grid) == grid, "table grid must be ascending")
            _require(len(values) == len(times), "one value row per time")
            for i, row in enumerate(values):
                _require(len(row) == len(grid), "row length must match grid")
                for a, b2 in zip(row, row[1:]):
                    _require(
                        b2 <= a + 1e-12,
                        f"table row {i} must be nonincreasing along the grid",
                    )
            return {"family": "table", "times": times, "grid": grid,
                    "values": values}
        raise ScenarioError(f"unknown generator family {fam!r}")

    @staticmethod
    def _parse_barrier(spec: Mapping) -> dict:
        _require(isinstance(spec, Mapping), "barrier must be an object")
        kind = spec.get("kind")
        if kind == "constant":
            return {"kind": "constant", "value": float(spec["value"])}
        if kind == "linear":
            return {
                "kind": "linear",
                "intercept": float(spec["intercept"]),
                "slope": float(spec["slope"]),
            }
        if kind == "table":
            return {
                "kind": "table",
                "values": {str(k): float(v) for k, v in spec["values"].items()},
            }
        raise ScenarioError(f"unknown barrier kind {kind!r}")

    @staticmethod
    def _parse_terminal(spec: Mapping, d: int) -> dict:
        _require(isinstance(spec, Mapping), "terminal must be an object")
        kind = spec.get("kind")
        if kind == "table":
            vals = {}
            for k, vec in spec["values"].items():
                _require(
                    isinstance(vec, list) and len(vec) == d,
                    f"terminal vector at {k!r} must have {d} entries",
                )
                vals[str(k)] = [float(v) for v in vec]
            return {"kind": "table", "values": vals}
        if kind == "price-affine":
            a = [float(x) for x in spec["a"]]
            b = [float(x) for x in spec["b"]]
            _require(len(a) == d and len(b) == d, "price-affine needs d coefficients")
            return {"kind": "price-affine", "a": a, "b": b}
        raise ScenarioError(f"unknown terminal kind {kind!r}")

    # -- canonical form ----------------------------------------------------

    def normalized(self) -> dict:
        return {
            "format": 1,
            "name": self.name,
            "tree": self.tree_spec,
            "modes": self.modes,
            "generators": self.generators,
            "costs": self.costs,
            "barriers": self.barriers,
            "terminal": self.terminal,
            "v_increments": self.v_increments,
            "solver": self.solver,
        }

    def to_json(self) -> str:
        return json.dumps(self.normalized(), indent=2, sort_keys=True) + "\n"

    # -- materialization ---------------------------------------------------

    def build_tree(self) -> tuple[EventTree, dict[str, float]]:
        """Expand the tree spec; returns (tree, price per node id)."""
        spec = self.tree_spec
        dt = spec["dt"]
        if spec["kind"] == "chain":
            steps = spec["steps"]
            nodes = [{"id": "n0", "t": 0, "parent": None}]
            nodes += [
                {"id": f"n{k}", "t": k, "parent": f"n{k-1}", "p": 1.0}
                for k in range(1, steps + 1)
            ]
            tree = EventTree.build(nodes, dt)
            prices = {n["id"]: spec["x0"] for n in nodes}
            return tree, prices
        if spec["kind"] == "binomial":
            steps, p_up = spec["steps"], spec["p_up"]
            up, down, x0 = spec["up"], spec["down"], spec["x0"]
            nodes = [{"id": "r", "t": 0, "parent": None}]
            prices = {"r": x0}
            frontier = ["r"]
            for t in range(1, steps + 1):
                nxt = []
                for pid in frontier:
                    for tag, p, factor in (("d", 1.0 - p_up, down), ("u", p_up, up)):
                        nid = pid + tag
                        nodes.append({"id": nid, "t": t, "parent": pid, "p": p})
                        prices[nid] = prices[pid] * factor
                        nxt.append(nid)
                frontier = nxt
            return EventTree.build(nodes, dt), prices
        nodes = spec["nodes"]
        tree = EventTree.build(nodes, dt)
        prices = {n["id"]: n.get("price", 1.0) for n in nodes}
        return tree, prices

    def build_problem(self) -> ObliqueProblem:
        """Materialize the validator-ready problem (math checks come later)."""
        tree, prices = self.build_tree()
        d = self.modes
        dt = tree.dt
        n_steps = tree.n_steps

        generators = tuple(
            _make_generator(spec, j, dt) for j, spec in enumerate(self.generators)
        )
        cost_values = np.zeros((n_steps + 1, d, d))
        for t in range(n_steps + 1):
            for j in range(d):
                for k in range(d):
                    if j != k:
                        cost_values[t, j, k] = _cost_value(self.costs[j][k], t * dt)
        costs = CostMatrix(cost_values)

        upper = tuple(
            _make_barrier(self.barriers[j], tree, dt) for j in range(d)
        )

        terminal: dict[int, tuple[float, ...]] = {}
        if self.terminal["kind"] == "table":
            vals = self.terminal["values"]
            for leaf in tree.leaves:
                nid = tree.node(leaf).node_id
                _require(nid in vals, f"terminal table misses leaf {nid!r}")
                terminal[leaf] = tuple(vals[nid])
        else:
            a, b = self.terminal["a"], self.terminal["b"]
            for leaf in tree.leaves:
                price = prices[tree.node(leaf).node_id]
                terminal[leaf] = tuple(a[j] + b[j] * price for j in range(d))

        v = []
        for j in range(d):
            per_parent = {}
            for pid, val in self.v_increments[j].items():
                _require(
                    tree.has_node(pid),
                    f"v_increments references unknown node {pid!r}",
                )
                per_parent[tree.index_of(pid)] = val
            v.append(PredictableIncrements.from_parent_values(tree, per_parent))

        return ObliqueProblem(
            tree=tree,
            d=d,
            terminal=terminal,
            generators=generators,
            v=tuple(v),
            upper=upper,
            costs=costs,
            subsolution_slack=self.solver["subsolution_slack"],
        )


def _make_generator(spec: dict, mode: int, dt: float):
    fam = spec["family"]
    if fam == "constant":
        a = spec["a"]
        return lambda t, y: a
    if fam == "linear":
        a, b = spec["a"], spec["b"]
        return lambda t, y, _m=mode: a - b * y[_m]
    if fam == "affine-coupled":
        a, b, g = spec["a"], spec["b"], spec["g"]

        def gen(t, y, _m=mode, _a=a, _b=b, _g=g):
            acc = _a - _b * y[_m]
            for k, w in enumerate(_g):
                if k != _m and w != 0.0:
                    acc += w * y[k]
            return acc

        return gen
    times = np.asarray(spec["times"])
    grid = np.asarray(spec["grid"])
    values = np.asarray(spec["values"])

    def table_gen(t, y, _m=mode):
        time = t * dt
        per_row = [float(np.interp(y[_m], grid, row)) for row in values]
        if len(per_row) == 1:
            return per_row[0]
        return float(np.interp(time, times, per_row))

    return table_gen


def _make_barrier(spec: dict, tree: EventTree, dt: float) -> AdaptedProcess:
    if spec["kind"] == "constant":
        return AdaptedProcess.constant(tree, spec["value"])
    if spec["kind"] == "linear":
        a, s = spec["intercept"], spec["slope"]
        return AdaptedProcess.from_fn(tree, lambda n: a + s * (n.t * dt))
    vals = spec["values"]
    missing = [n.node_id for n in tree.nodes if n.node_id not in vals]
    _require(not missing, f"barrier table misses nodes {missing}")
    return AdaptedProcess.from_dict(tree, vals)
