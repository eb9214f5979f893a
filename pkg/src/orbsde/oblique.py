"""Systems reflected obliquely from below and capped by an upper barrier.

Mode j of the system satisfies the scalar dynamics of :mod:`orbsde.scalar`
with lower barrier ``H^j(Y)``, a function of the *other* components, and
upper barrier ``U^j``.  With the switching-cost obstacle

    H^j(t, y) = max over k != j of (y^k - c[j][k](t)),

strictly positive costs satisfying the triangle condition
``c[i][j] + c[j][k] > c[i][k]`` rule out binding cycles among modes, and on
a finite tree the Mokobodzki condition reduces to the pointwise inequality
``H(U) <= U`` (every adapted process is a difference of supermartingales
via the discrete Doob decomposition, so U itself is the witness).

The solver is a monotone Picard iteration: start from a subsolution built
with each generator frozen at a low corner of the state box, then repeatedly
solve the d scalar two-barrier problems with the obstacle and the generator
evaluated along the previous iterate.  Sweeps are nondecreasing; a decrease
anywhere means the corner was not low enough, in which case the corner
margin is scaled up tenfold and the solve restarts (at most three times).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import (
    InvalidProblemError,
    NonMonotoneSweepError,
    ConvergenceError,
    Violation,
)
from .scalar import ScalarSolution, _backward_solve
from .tree import AdaptedProcess, EventTree, Node, PredictableIncrements

__all__ = [
    "CostMatrix",
    "ObliqueProblem",
    "SystemSolution",
    "MokobodzkiWitness",
    "MinimalityReport",
    "evaluate_H",
    "validate_problem",
    "build_subsolution",
    "picard_solve",
    "verify_minimality",
    "binding_graph_cycles",
]

VecGeneratorFn = Callable[[int, Sequence[float]], float]
ObstacleFn = Callable[[int, Sequence[float]], Sequence[float]]

BINDING_TOL = 1e-10


class CostMatrix:
    """Switching costs per time index: values[t, j, k], zero diagonal."""

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values, dtype=float)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise ValueError("cost matrix must have shape (T+1, d, d)")
        arr = arr.copy()
        arr.flags.writeable = False
        self.values = arr

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    def at(self, t: int, j: int, k: int) -> float:
        return float(self.values[t, j, k])

    @classmethod
    def constant(cls, n_steps: int, costs: Sequence[Sequence[float]]) -> "CostMatrix":
        base = np.asarray(costs, dtype=float)
        return cls(np.repeat(base[None, :, :], n_steps + 1, axis=0))

    @classmethod
    def from_function(
        cls, n_steps: int, d: int, fn: Callable[[int, int, int], float]
    ) -> "CostMatrix":
        arr = np.zeros((n_steps + 1, d, d))
        for t in range(n_steps + 1):
            for j in range(d):
                for k in range(d):
                    if j != k:
                        arr[t, j, k] = fn(t, j, k)
        return cls(arr)

    def validate(self) -> list[Violation]:
        out: list[Violation] = []
        T, d, _ = self.values.shape
        for t in range(T):
            c = self.values[t]
            for j in range(d):
                if c[j, j] != 0.0:
                    out.append(
                        Violation("cost-diagonal", f"c[{j}][{j}] = {c[j, j]} != 0",
                                  time_index=t)
                    )
                for k in range(d):
                    if j != k and not c[j, k] > 0.0:
                        out.append(
                            Violation(
                                "cost-positivity",
                                f"c[{j}][{k}] = {c[j, k]} not positive",
                                time_index=t,
                            )
                        )
            for i in range(d):
                for j in range(d):
                    for k in range(d):
                        if len({i, j, k}) == 3 and not c[i, j] + c[j, k] > c[i, k]:
                            out.append(
                                Violation(
                                    "cost-triangle",
                                    f"c[{i}][{j}] + c[{j}][{k}] = "
                                    f"{c[i, j] + c[j, k]} <= c[{i}][{k}] = {c[i, k]}",
                                    time_index=t,
                                )
                            )
        return out


def evaluate_H(costs: CostMatrix, t: int, y: Sequence[float]) -> tuple[float, ...]:
    """Obstacle vector H^j = max over k != j of (y^k - c[j][k](t)).

    Independent of y^j and nondecreasing in every component of y.
    """
    c = costs.values[t]
    d = costs.d
    return tuple(
        max(float(y[k] - c[j, k]) for k in range(d) if k != j) for j in range(d)
    )


@dataclass(frozen=True)
class ObliqueProblem:
    """Terminal vector, generator family, drifts, upper barriers, obstacle.

    ``terminal`` maps leaf index -> d-vector.  Each ``generators[j]`` takes
    (time index, full y vector).  The obstacle is the switching-cost form
    when ``costs`` is given; a general increasing continuous obstacle may be
    supplied instead via ``obstacle`` (existence-mode solves only: the
    switching layer and its oracles require the cost form).
    """

    tree: EventTree
    d: int
    terminal: Mapping[int, tuple[float, ...]]
    generators: tuple[VecGeneratorFn, ...]
    v: tuple[PredictableIncrements, ...]
    upper: tuple[AdaptedProcess, ...]
    costs: CostMatrix | None = None
    obstacle: ObstacleFn | None = None
    subsolution_slack: float = 0.0

    def __post_init__(self):
        if (self.costs is None) == (self.obstacle is None):
            raise ValueError("supply exactly one of costs / obstacle")

    def H(self, t: int, y: Sequence[float]) -> tuple[float, ...]:
        if self.costs is not None:
            return evaluate_H(self.costs, t, y)
        return tuple(self.obstacle(t, y))

    def xi(self, leaf: int, j: int) -> float:
        return self.terminal[leaf][j]


@dataclass(frozen=True)
class MokobodzkiWitness:
    """Adapted vector process squeezed between H(U) and U.

    On a finite tree any adapted process splits into martingale plus
    predictable bounded-variation parts, hence is a difference of
    supermartingales; existence of a witness is therefore equivalent to
    H(U) <= U pointwise, with X = U itself the canonical witness.
    """

    x: tuple[AdaptedProcess, ...]

    def violations(self, problem: ObliqueProblem) -> list[Violation]:
        out: list[Violation] = []
        tree = problem.tree
        for n in tree.nodes:
            u_vec = tuple(problem.upper[j].values[n.index] for j in range(problem.d))
            h_u = problem.H(n.t, u_vec)
            for j in range(problem.d):
                xj = self.x[j].values[n.index]
                if h_u[j] > xj + 1e-12:
                    out.append(
                        Violation(
                            "mokobodzki",
                            f"H^{j}(U) = {h_u[j]:.17g} > X^{j} = {xj:.17g}",
                            n.node_id, n.t, j,
                        )
                    )
                if xj > u_vec[j] + 1e-12:
                    out.append(
                        Violation(
                            "mokobodzki",
                            f"X^{j} = {xj:.17g} > U^{j} = {u_vec[j]:.17g}",
                            n.node_id, n.t, j,
                        )
                    )
        return out


def default_witness(problem: ObliqueProblem) -> MokobodzkiWitness:
    return MokobodzkiWitness(x=problem.upper)


def _probe_box(problem: ObliqueProblem) -> list[float]:
    vals: list[float] = []
    for vec in problem.terminal.values():
        vals.extend(vec)
    for j in range(problem.d):
        vals.extend(problem.upper[j].values)
    lo, hi = min(vals), max(vals)
    pad = 1.0 + 0.5 * (hi - lo)
    return [lo - pad, lo, 0.5 * (lo + hi), hi, hi + pad]


def validate_problem(problem: ObliqueProblem) -> list[Violation]:
    """All structural hypotheses, reported with node/time coordinates.

    Checks cost positivity and the triangle condition, the Mokobodzki
    inequality H(U) <= U at every node, the terminal sandwich
    H_T(xi) <= xi <= U_T at every leaf, and finite-difference spot-checks
    of the generator monotonicity directions (decreasing in the own
    component, nondecreasing in the others) and continuity.
    """
    out: list[Violation] = []
    tree = problem.tree
    d = problem.d
    if d < 2:
        out.append(Violation("dimension", f"need d >= 2 modes, got {d}"))
        return out
    if len(problem.generators) != d or len(problem.upper) != d or len(problem.v) != d:
        out.append(Violation("dimension", "per-mode field lengths disagree with d"))
        return out
    if problem.costs is not None:
        if problem.costs.d != d:
            out.append(Violation("dimension", "cost matrix dimension mismatch"))
            return out
        if problem.costs.n_steps != tree.n_steps:
            out.append(Violation("dimension", "cost matrix horizon mismatch"))
            return out
        out.extend(problem.costs.validate())

    out.extend(default_witness(problem).violations(problem))

    for leaf in tree.leaves:
        if leaf not in problem.terminal:
            out.append(
                Violation("terminal", "missing terminal vector",
                          tree.node(leaf).node_id)
            )
            continue
        xi = problem.terminal[leaf]
        h_xi = problem.H(tree.n_steps, xi)
        for j in range(d):
            uj = problem.upper[j].values[leaf]
            if h_xi[j] > xi[j] + 1e-12:
                out.append(
                    Violation(
                        "terminal-sandwich",
                        f"H^{j}_T(xi) = {h_xi[j]:.17g} > xi^{j} = {xi[j]:.17g}",
                        tree.node(leaf).node_id, tree.n_steps, j,
                    )
                )
            if xi[j] > uj + 1e-12:
                out.append(
                    Violation(
                        "terminal-sandwich",
                        f"xi^{j} = {xi[j]:.17g} > U^{j}_T = {uj:.17g}",
                        tree.node(leaf).node_id, tree.n_steps, j,
                    )
                )

    grid = _probe_box(problem)
    times = sorted({0, tree.n_steps // 2, max(tree.n_steps - 1, 0)})
    for j, f in enumerate(problem.generators):
        for t in times:
            base = [grid[2]] * d
            for lo_y in grid:
                for hi_y in grid:
                    if lo_y >= hi_y:
                        continue
                    y_lo = list(base)
                    y_hi = list(base)
                    y_lo[j], y_hi[j] = lo_y, hi_y
                    if f(t, y_lo) < f(t, y_hi) - 1e-12:
                        out.append(
                            Violation(
                                "generator-on-diagonal",
                                f"f^{j} increases in its own component "
                                f"between {lo_y} and {hi_y}",
                                time_index=t, mode=j,
                            )
                        )
                    for k in range(d):
                        if k == j:
                            continue
                        y_lo = list(base)
                        y_hi = list(base)
                        y_lo[k], y_hi[k] = lo_y, hi_y
                        if f(t, y_lo) > f(t, y_hi) + 1e-12:
                            out.append(
                                Violation(
                                    "generator-off-diagonal",
                                    f"f^{j} decreases in component {k} "
                                    f"between {lo_y} and {hi_y}",
                                    time_index=t, mode=j,
                                )
                            )
            h = 1e-7
            for y0 in grid:
                jump = abs(f(t, [y0 + h] * d) - f(t, [y0] * d))
                if jump > 1.0:
                    out.append(
                        Violation(
                            "generator-continuity",
                            f"f^{j} jumps by {jump:.3g} over step {h} near {y0}",
                            time_index=t, mode=j,
                        )
                    )
    return out


def _corner(problem: ObliqueProblem, margin: float) -> tuple[float, ...]:
    """Low corner of the state box: below xi, H(U) and U by the margin."""
    tree = problem.tree
    lows = []
    for j in range(problem.d):
        vals = [vec[j] for vec in problem.terminal.values()]
        vals.extend(problem.upper[j].values)
        for n in tree.nodes:
            u_vec = tuple(problem.upper[i].values[n.index] for i in range(problem.d))
            vals.append(problem.H(n.t, u_vec)[j])
        lows.append(min(vals) - margin)
    return tuple(lows)


def build_subsolution(
    problem: ObliqueProblem, margin: float | None = None
) -> tuple[tuple[float, ...], list[ScalarSolution]]:
    """Per-mode upper-barrier solves with generators frozen at a low corner.

    Off-diagonal monotonicity makes the frozen generator a lower bound for
    the true one whenever the iterates stay above the corner, which is what
    makes the result a valid starting subsolution.  Returns (corner, one
    ScalarSolution per mode with K identically zero).
    """
    if margin is None:
        margin = 1.0 + problem.subsolution_slack
    corner = _corner(problem, margin)
    tree = problem.tree
    parts: list[ScalarSolution] = []
    for j in range(problem.d):
        f = problem.generators[j]

        def gen(node: Node, c: float, _f=f, _j=j) -> float:
            vec = list(corner)
            vec[_j] = c
            return _f(node.t, vec)

        terminal = {leaf: problem.terminal[leaf][j] for leaf in tree.leaves}
        flipped = _backward_solve(
            tree,
            {leaf: -v for leaf, v in terminal.items()},
            lambda node, yy, _g=gen: -_g(node, -yy),
            PredictableIncrements(tree, tuple(-v for v in problem.v[j].values)),
            AdaptedProcess(tree, tuple(-v for v in problem.upper[j].values)),
            None,
        )
        parts.append(
            ScalarSolution(
                y=AdaptedProcess(tree, tuple(-v for v in flipped.y.values)),
                m_increments=tuple(-v for v in flipped.m_increments),
                k=PredictableIncrements.zero(tree),
                a=flipped.k,
            )
        )
    return corner, parts


@dataclass(frozen=True)
class SystemSolution:
    """Per-mode (Y, dM, K, A) plus the iteration log."""

    y: tuple[AdaptedProcess, ...]
    m_increments: tuple[tuple[float, ...], ...]
    k: tuple[PredictableIncrements, ...]
    a: tuple[PredictableIncrements, ...]
    sweeps: int
    deltas: tuple[float, ...]
    corner: tuple[float, ...] = ()
    history: tuple | None = None

    def y_vector(self, u: int) -> tuple[float, ...]:
        return tuple(yj.values[u] for yj in self.y)


def picard_solve(
    problem: ObliqueProblem,
    tol: float = 1e-10,
    max_sweeps: int = 200,
    record_history: bool = False,
) -> SystemSolution:
    """Monotone iteration of scalar two-barrier solves.

    Sweep n solves, for each mode j, the scalar problem with lower barrier
    ``H^j(Y_prev)``, upper barrier ``U^j`` and generator
    ``c -> f^j(t, Y_prev; c)``.  Stops when the sup-norm delta over nodes
    and modes drops to ``tol``.  Raises NonMonotoneSweepError if a sweep
    decreases somewhere even after three corner restarts, ConvergenceError
    if the sweep budget runs out.
    """
    report = validate_problem(problem)
    if report:
        raise InvalidProblemError(report)
    tree = problem.tree
    d = problem.d
    base_margin = 1.0 + problem.subsolution_slack
    last_error: NonMonotoneSweepError | None = None
    for attempt in range(4):
        margin = base_margin * (10.0**attempt)
        try:
            return _picard_attempt(
                problem, tree, d, margin, tol, max_sweeps, record_history
            )
        except NonMonotoneSweepError as err:
            last_error = err
    raise last_error


def _picard_attempt(
    problem: ObliqueProblem,
    tree: EventTree,
    d: int,
    margin: float,
    tol: float,
    max_sweeps: int,
    record_history: bool,
) -> SystemSolution:
    corner, parts = build_subsolution(problem, margin)
    prev = [tuple(p.y.values) for p in parts]
    deltas: list[float] = []
    history: list[tuple] = []
    solutions = parts
    for sweep in range(1, max_sweeps + 1):
        prev_rows = [
            tuple(prev[j][u] for j in range(d)) for u in range(tree.n_nodes)
        ]
        new_solutions: list[ScalarSolution] = []
        for j in range(d):
            f = problem.generators[j]

            def gen(node: Node, c: float, _f=f, _j=j) -> float:
                row = prev_rows[node.index]
                vec = row[:_j] + (c,) + row[_j + 1:]
                return _f(node.t, vec)

            lower = AdaptedProcess(
                tree,
                tuple(
                    problem.H(n.t, prev_rows[n.index])[j] for n in tree.nodes
                ),
            )
            terminal = {leaf: problem.terminal[leaf][j] for leaf in tree.leaves}
            new_solutions.append(
                _backward_solve(
                    tree, terminal, gen, problem.v[j], lower, problem.upper[j]
                )
            )
        delta = 0.0
        rise_floor = 0.0
        scale = 1.0
        for j in range(d):
            for u in range(tree.n_nodes):
                diff = new_solutions[j].y.values[u] - prev[j][u]
                delta = max(delta, abs(diff))
                rise_floor = min(rise_floor, diff)
                scale = max(scale, abs(prev[j][u]))
        # absolute slack at desk scale; relative term only guards against
        # root-finder ulp noise when a deep corner inflates the iterates
        if rise_floor < -max(1e-12, 1e-13 * scale):
            raise NonMonotoneSweepError(
                f"sweep {sweep} decreased by {-rise_floor:.3g} "
                f"(corner margin {margin:g} too small)"
            )
        deltas.append(delta)
        if record_history:
            history.append(
                (
                    tuple(tuple(s.y.values) for s in new_solutions),
                    tuple(tuple(s.a.values) for s in new_solutions),
                )
            )
        solutions = new_solutions
        prev = [tuple(s.y.values) for s in solutions]
        if delta <= tol:
            result = SystemSolution(
                y=tuple(s.y for s in solutions),
                m_increments=tuple(s.m_increments for s in solutions),
                k=tuple(s.k for s in solutions),
                a=tuple(s.a for s in solutions),
                sweeps=sweep,
                deltas=tuple(deltas),
                corner=corner,
                history=tuple(history) if record_history else None,
            )
            if problem.costs is not None:
                cycles = binding_graph_cycles(problem, result)
                if cycles:
                    raise RuntimeError(
                        f"binding cycle among modes at {cycles[0][0]} "
                        "despite triangle-valid costs"
                    )
            return result
    raise ConvergenceError(
        f"delta {deltas[-1]:.3g} > tol {tol:g} after {max_sweeps} sweeps"
    )


def binding_graph_cycles(
    problem: ObliqueProblem, solution: SystemSolution, tol: float = BINDING_TOL
) -> list[tuple[str, tuple[int, ...]]]:
    """Cycles j1 -> j2 -> ... -> j1 of binding obstacle equalities per node.

    Edge j -> k present when Y^j = Y^k - c[j][k](t) within tol.  Triangle
    costs make these graphs acyclic at every node of a true solution.
    """
    assert problem.costs is not None
    out: list[tuple[str, tuple[int, ...]]] = []
    d = problem.d
    for n in problem.tree.nodes:
        yv = solution.y_vector(n.index)
        adj = [
            [
                k
                for k in range(d)
                if k != j
                and abs(yv[j] - (yv[k] - problem.costs.at(n.t, j, k))) <= tol
            ]
            for j in range(d)
        ]
        color = [0] * d
        stack: list[int] = []

        def dfs(j: int) -> tuple[int, ...] | None:
            color[j] = 1
            stack.append(j)
            for k in adj[j]:
                if color[k] == 1:
                    return tuple(stack[stack.index(k):])
                if color[k] == 0:
                    res = dfs(k)
                    if res:
                        return res
            stack.pop()
            color[j] = 2
            return None

        for j in range(d):
            if color[j] == 0:
                cyc = dfs(j)
                if cyc:
                    out.append((n.node_id, cyc))
                    break
    return out


@dataclass(frozen=True)
class MinimalityReport:
    """Worst recomputed residuals of every solution-defining property."""

    worst_identity: float
    worst_martingale: float
    worst_sandwich_lower: float
    worst_sandwich_upper: float
    worst_flat_off_lower: float
    worst_flat_off_upper: float
    worst_negative_increment: float
    binding_cycles: tuple[tuple[str, tuple[int, ...]], ...]
    violations: tuple[Violation, ...]

    @property
    def worst_residual(self) -> float:
        return max(
            self.worst_identity,
            self.worst_martingale,
            self.worst_sandwich_lower,
            self.worst_sandwich_upper,
            self.worst_flat_off_lower,
            self.worst_flat_off_upper,
            self.worst_negative_increment,
        )

    def ok(self, tol: float = BINDING_TOL) -> bool:
        return self.worst_residual <= tol and not self.binding_cycles

    def as_dict(self) -> dict:
        return {
            "worst_identity": self.worst_identity,
            "worst_martingale": self.worst_martingale,
            "worst_sandwich_lower": self.worst_sandwich_lower,
            "worst_sandwich_upper": self.worst_sandwich_upper,
            "worst_flat_off_lower": self.worst_flat_off_lower,
            "worst_flat_off_upper": self.worst_flat_off_upper,
            "worst_negative_increment": self.worst_negative_increment,
            "worst_residual": self.worst_residual,
            "binding_cycles": [
                {"node_id": nid, "modes": list(cyc)}
                for nid, cyc in self.binding_cycles
            ],
            "violations": [v.as_dict() for v in self.violations],
        }


def verify_minimality(
    problem: ObliqueProblem,
    solution: SystemSolution,
    tol: float = BINDING_TOL,
) -> MinimalityReport:
    """Recompute every defining property of a system solution.

    Diagnostic: reports worst residuals for the backward identity (with the
    generator at the full current vector), the martingale property of dM,
    the obstacle sandwich H(Y) <= Y <= U, both flat-off products, increment
    nonnegativity, and the binding-cycle check.  Works on externally
    supplied solutions as well as solver output.
    """
    tree = problem.tree
    d = problem.d
    dt = tree.dt
    worst_id = worst_mart = 0.0
    worst_sl = worst_su = 0.0
    worst_fl = worst_fu = 0.0
    worst_neg = 0.0
    violations: list[Violation] = []

    def note(code: str, msg: str, n: Node, j: int, value: float, bound: float):
        if value > bound:
            violations.append(Violation(code, msg, n.node_id, n.t, j))

    for n in tree.nodes:
        yv = solution.y_vector(n.index)
        h = problem.H(n.t, yv)
        for j in range(d):
            yj = solution.y[j].values[n.index]
            sl = h[j] - yj
            su = yj - problem.upper[j].values[n.index]
            worst_sl = max(worst_sl, sl)
            worst_su = max(worst_su, su)
            note("sandwich-lower", f"H^{j}(Y) - Y^{j} = {sl:.3g}", n, j, sl, tol)
            note("sandwich-upper", f"Y^{j} - U^{j} = {su:.3g}", n, j, su, tol)
            if n.is_leaf:
                continue
            dk = solution.k[j].out_of(n.index)
            da = solution.a[j].out_of(n.index)
            neg = max(-dk, -da)
            worst_neg = max(worst_neg, neg)
            note("increment-sign", f"negative increment {min(dk, da):.3g}",
                 n, j, neg, tol)
            fl = abs(dk * (yj - h[j]))
            fu = abs(da * (problem.upper[j].values[n.index] - yj))
            worst_fl = max(worst_fl, fl)
            worst_fu = max(worst_fu, fu)
            note("flat-off-lower", f"dK * (Y - H(Y)) = {fl:.3g}", n, j, fl, tol)
            note("flat-off-upper", f"dA * (U - Y) = {fu:.3g}", n, j, fu, tol)
            f_val = problem.generators[j](n.t, yv)
            mart = 0.0
            for c in n.children:
                child = tree.node(c)
                resid = yj - (
                    solution.y[j].values[c]
                    + f_val * dt
                    + problem.v[j].values[c]
                    + solution.k[j].values[c]
                    - solution.a[j].values[c]
                    - solution.m_increments[j][c]
                )
                worst_id = max(worst_id, abs(resid))
                note("identity", f"backward identity residual {resid:.3g}",
                     child, j, abs(resid), tol)
                mart += child.prob * solution.m_increments[j][c]
            worst_mart = max(worst_mart, abs(mart))
            note("martingale", f"E[dM | parent] = {mart:.3g}", n, j,
                 abs(mart), tol)

    cycles = (
        tuple(binding_graph_cycles(problem, solution, tol))
        if problem.costs is not None
        else ()
    )
    for nid, cyc in cycles:
        violations.append(
            Violation("binding-cycle", f"modes {list(cyc)} bind in a cycle", nid)
        )
    return MinimalityReport(
        worst_identity=worst_id,
        worst_martingale=worst_mart,
        worst_sandwich_lower=worst_sl,
        worst_sandwich_upper=worst_su,
        worst_flat_off_lower=worst_fl,
        worst_flat_off_upper=worst_fu,
        worst_negative_increment=worst_neg,
        binding_cycles=cycles,
        violations=tuple(violations),
    )
