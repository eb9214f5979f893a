"""One-dimensional reflected backward equations on a tree.

The dynamics solved here, between a parent u at time index t and its
children, are

    Y_u = E[Y_{t+1} | u] + g(t, Y_u) dt + dV + dK - dA,

with dV, dK, dA predictable (decided at u, identical across sibling edges)
and the martingale increment on each edge absorbing the residual
``dM_c = Y_c - E[Y_{t+1} | u]``.  A lower barrier L keeps Y >= L via the
increasing  process K, an upper barrier U keeps Y <= U via A, and both act
minimally: an increment is nonzero only at parents where Y sits exactly on
its barrier (the discrete flat-off condition).

Generator convention: g is evaluated at the parent's time index and at the
post-projection value Y_u.  That makes the displayed identity exact, so the
reflecting increments are the positive/negative parts of the residual

    phi(y) = y - g(t, y) dt - E[Y_{t+1}|u] - dV

evaluated at the projected value: dK = phi(Y_u)^+, dA = phi(Y_u)^-.  For
generators constant in y this coincides with the naive assignment
(L - y*)^+ / (y* - U)^+ against the unconstrained root y*.

(H1)-monotonicity (g decreasing in y) makes phi strictly increasing, which
is what lets the implicit step run on bracketed bisection with no
derivative information.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from .errors import BracketingError, InvalidProblemError, Violation
from .tree import (
    AdaptedProcess,
    EventTree,
    Node,
    PredictableIncrements,
    enumerate_stopping_times,
    one_step_expectation,
)

__all__ = [
    "GeneratorFn",
    "ScalarRBSDEProblem",
    "ScalarSolution",
    "PenalizationParams",
    "PenalizedSolution",
    "implicit_step",
    "solve_lower",
    "solve_upper",
    "solve_two_barrier",
    "solve_penalized",
    "verify_snell_representation",
]

GeneratorFn = Callable[[int, float], float]

RESIDUAL_TOL = 1e-12
_MONOTONE_PROBE_YS = (-7.3, -1.0, -0.25, 0.0, 0.5, 2.0, 9.1)


def _root_find(phi: Callable[[float], float], x0: float, tol: float) -> float:
    """Root of a strictly increasing phi: cheap exact probes, then bisection.

    The first probe is exact for y-independent generators, the secant step
    for affine ones; everything else falls back to bracket expansion (at
    most 64 doublings) and bisection.  `tol` is the documented residual
    ceiling; the search itself runs to a few ulps in y (residual roughly
    machine epsilon times the local slope), so that comparison and
    monotonicity properties hold far inside the stated tolerances.  Stiff
    generators (penalty weights ~1e6) can make even `tol` unreachable in
    float64 near the kink; the ulp-width stall guard keeps the root exact
    in y regardless.
    """
    f0 = phi(x0)
    if not math.isfinite(f0):
        raise BracketingError(f"residual not finite at {x0}")

    def tight(x: float) -> float:
        return min(tol, 4e-15 * max(1.0, abs(x)))

    if abs(f0) <= tight(x0):
        return x0
    x1 = x0 - f0
    f1 = phi(x1)
    if abs(f1) <= tight(x1):
        return x1
    if f1 != f0:
        x2 = x1 - f1 * (x1 - x0) / (f1 - f0)
        f2 = phi(x2)
        if abs(f2) <= tight(x2):
            return x2
    else:
        x2, f2 = x1, f1

    lo = hi = None
    for x, f in ((x0, f0), (x1, f1), (x2, f2)):
        if f <= 0.0 and (lo is None or x > lo):
            lo = x
        if f >= 0.0 and (hi is None or x < hi):
            hi = x
    step = max(1.0, abs(x0)) * 0.5
    anchor = x0
    expansions = 0
    while lo is None or hi is None:
        if expansions >= 64:
            raise BracketingError(
                "no sign change after 64 interval expansions; "
                "generator is likely not decreasing in y"
            )
        expansions += 1
        if lo is None:
            probe = (hi if hi is not None else anchor) - step
            if phi(probe) <= 0.0:
                lo = probe
        if hi is None:
            probe = (lo if lo is not None else anchor) + step
            if phi(probe) >= 0.0:
                hi = probe
        step *= 2.0

    while True:
        mid = 0.5 * (lo + hi)
        fm = phi(mid)
        if abs(fm) <= tight(mid):
            return mid
        if hi - lo <= 4e-16 * max(1.0, abs(lo), abs(hi)):
            return mid
        if fm > 0.0:
            hi = mid
        else:
            lo = mid


def implicit_step(
    e_next: float,
    g: GeneratorFn,
    t: int,
    dv: float,
    dt: float,
    tol: float = RESIDUAL_TOL,
) -> float:
    """Solve y = e_next + g(t, y) dt + dv for the unique root y*.

    Requires g decreasing in y; raises BracketingError otherwise (after the
    64-fold interval expansion gives up).
    """
    target = e_next + dv
    return _root_find(lambda y: y - g(t, y) * dt - target, target, tol)


@dataclass(frozen=True)
class ScalarRBSDEProblem:
    """Terminal data, generator, drift increments, and optional barriers.

    ``terminal`` maps leaf index -> value.  ``generator`` takes the parent's
    time index and a trial value.  Either barrier may be absent; when both
    are present they must be ordered (L <= U everywhere, L_T <= xi <= U_T).
    """

    tree: EventTree
    terminal: Mapping[int, float]
    generator: GeneratorFn
    v_increments: PredictableIncrements | None = None
    lower: AdaptedProcess | None = None
    upper: AdaptedProcess | None = None

    def v(self) -> PredictableIncrements:
        return (
            self.v_increments
            if self.v_increments is not None
            else PredictableIncrements.zero(self.tree)
        )

    def validate(self, probe_monotone: bool = True) -> list[Violation]:
        out: list[Violation] = []
        tree = self.tree
        if not tree.dt > 0.0:
            out.append(Violation("dt", "step length must be positive"))
        for leaf in tree.leaves:
            if leaf not in self.terminal:
                out.append(
                    Violation(
                        "terminal", "missing terminal value", tree.node(leaf).node_id
                    )
                )
        for n in tree.nodes:
            lo = self.lower.values[n.index] if self.lower is not None else None
            hi = self.upper.values[n.index] if self.upper is not None else None
            if lo is not None and hi is not None and lo > hi:
                out.append(
                    Violation(
                        "barrier-order",
                        f"lower {lo} above upper {hi}",
                        n.node_id,
                        n.t,
                    )
                )
            if n.is_leaf and n.index in self.terminal:
                xi = self.terminal[n.index]
                if lo is not None and xi < lo - 1e-12:
                    out.append(
                        Violation(
                            "terminal-sandwich",
                            f"terminal {xi} below barrier {lo}",
                            n.node_id,
                            n.t,
                        )
                    )
                if hi is not None and xi > hi + 1e-12:
                    out.append(
                        Violation(
                            "terminal-sandwich",
                            f"terminal {xi} above barrier {hi}",
                            n.node_id,
                            n.t,
                        )
                    )
        if probe_monotone:
            for t in range(tree.n_steps):
                for y0 in _MONOTONE_PROBE_YS:
                    for y1 in _MONOTONE_PROBE_YS:
                        if (self.generator(t, y0) - self.generator(t, y1)) * (
                            y0 - y1
                        ) > 1e-12:
                            out.append(
                                Violation(
                                    "generator-monotone",
                                    f"generator increases in y near ({y0}, {y1})",
                                    time_index=t,
                                )
                            )
                            break
                    else:
                        continue
                    break
        return out


@dataclass(frozen=True)
class ScalarSolution:
    """(Y, dM, K, A): value process, per-edge martingale increments, and the
    predictable reflecting increments (both >= 0, on the edges out of the
    parent they act at)."""

    y: AdaptedProcess
    m_increments: tuple[float, ...]
    k: PredictableIncrements
    a: PredictableIncrements


@dataclass(frozen=True)
class PenalizationParams:
    """Lower/upper penalty weights; both nonnegative."""

    p: float = 0.0
    q: float = 0.0

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass(frozen=True)
class PenalizedSolution:
    """Solution-shaped output of the penalized scheme.

    The ``k``/``a`` slots hold the penalty integrals p(L-Y)^+ dt and
    q(Y-U)^+ dt per edge instead of projection pushes, and the masses are
    their expected totals.  There is no flat-off property here; the scheme
    approaches the projected solution only as p, q grow.
    """

    y: AdaptedProcess
    m_increments: tuple[float, ...]
    k: PredictableIncrements
    a: PredictableIncrements
    lower_mass: float
    upper_mass: float


NodeGeneratorFn = Callable[[Node, float], float]


def _backward_solve(
    tree: EventTree,
    terminal: Mapping[int, float],
    gen: NodeGeneratorFn,
    dv: PredictableIncrements,
    lower: AdaptedProcess | None,
    upper: AdaptedProcess | None,
) -> ScalarSolution:
    """Shared projection kernel for every barrier combination."""
    dt = tree.dt
    n = tree.n_nodes
    y = [0.0] * n
    k = [0.0] * n
    a = [0.0] * n
    m = [0.0] * n
    for i in range(n - 1, -1, -1):
        node = tree.node(i)
        if node.is_leaf:
            y[i] = float(terminal[i])
            continue
        e = one_step_expectation(tree, y, i)
        dv_u = dv.out_of(i)
        target = e + dv_u
        phi = lambda yy: yy - gen(node, yy) * dt - target  # noqa: E731
        ystar = _root_find(phi, target, RESIDUAL_TOL)
        lo = lower.values[i] if lower is not None else None
        hi = upper.values[i] if upper is not None else None
        if lo is not None and ystar < lo:
            val, dk, da = lo, max(0.0, phi(lo)), 0.0
        elif hi is not None and ystar > hi:
            val, dk, da = hi, 0.0, max(0.0, -phi(hi))
        else:
            val, dk, da = ystar, 0.0, 0.0
        y[i] = val
        for c in node.children:
            k[c] = dk
            a[c] = da
            m[c] = y[c] - e
    return ScalarSolution(
        y=AdaptedProcess(tree, tuple(y)),
        m_increments=tuple(m),
        k=PredictableIncrements(tree, tuple(k)),
        a=PredictableIncrements(tree, tuple(a)),
    )


def _require_valid(problem: ScalarRBSDEProblem) -> None:
    report = problem.validate()
    if report:
        raise InvalidProblemError(report)


def _node_gen(problem: ScalarRBSDEProblem) -> NodeGeneratorFn:
    g = problem.generator
    return lambda node, yy: g(node.t, yy)


def solve_lower(problem: ScalarRBSDEProblem) -> ScalarSolution:
    """Reflect upward off the lower barrier only (A identically zero)."""
    if problem.upper is not None:
        raise ValueError("solve_lower expects a problem with no upper barrier")
    if problem.lower is None:
        raise ValueError("solve_lower expects a lower barrier")
    _require_valid(problem)
    return _backward_solve(
        problem.tree, problem.terminal, _node_gen(problem), problem.v(),
        problem.lower, None,
    )


def solve_upper(problem: ScalarRBSDEProblem) -> ScalarSolution:
    """Reflect downward off the upper barrier, by sign flip.

    (Y, M, A) solves the upper problem for (xi, g, V, U) exactly when
    (-Y, -M, A) solves the lower problem for (-xi, -g(., -.), -V, -U).
    """
    if problem.lower is not None:
        raise ValueError("solve_upper expects a problem with no lower barrier")
    if problem.upper is None:
        raise ValueError("solve_upper expects an upper barrier")
    _require_valid(problem)
    tree = problem.tree
    g = problem.generator
    reflected = ScalarRBSDEProblem(
        tree=tree,
        terminal={leaf: -v for leaf, v in problem.terminal.items()},
        generator=lambda t, yy: -g(t, -yy),
        v_increments=PredictableIncrements(
            tree, tuple(-v for v in problem.v().values)
        ),
        lower=AdaptedProcess(tree, tuple(-v for v in problem.upper.values)),
        upper=None,
    )
    flipped = _backward_solve(
        tree, reflected.terminal, _node_gen(reflected), reflected.v(),
        reflected.lower, None,
    )
    return ScalarSolution(
        y=AdaptedProcess(tree, tuple(-v for v in flipped.y.values)),
        m_increments=tuple(-v for v in flipped.m_increments),
        k=PredictableIncrements.zero(tree),
        a=flipped.k,
    )


def solve_two_barrier(problem: ScalarRBSDEProblem) -> ScalarSolution:
    """Project each implicit step into [L, U]; pushes split into K and A."""
    if problem.lower is None or problem.upper is None:
        raise ValueError("solve_two_barrier expects both barriers")
    _require_valid(problem)
    return _backward_solve(
        problem.tree, problem.terminal, _node_gen(problem), problem.v(),
        problem.lower, problem.upper,
    )


def solve_penalized(
    problem: ScalarRBSDEProblem, params: PenalizationParams
) -> PenalizedSolution:
    """Replace the projections by penalty drifts p(L-y)^+ - q(y-U)^+.

    The augmented generator stays decreasing in y, so the same implicit
    machinery applies with no projection.  Values are nondecreasing in p and
    nonincreasing in q, and approach the two-barrier solution as both grow.
    """
    if params.p > 0 and problem.lower is None:
        raise ValueError("lower penalty needs a lower barrier")
    if params.q > 0 and problem.upper is None:
        raise ValueError("upper penalty needs an upper barrier")
    _require_valid(problem)
    return _penalized_solve(
        problem.tree, problem.terminal, _node_gen(problem), problem.v(),
        problem.lower, problem.upper, params.p, params.q,
    )


def _penalized_solve(
    tree: EventTree,
    terminal: Mapping[int, float],
    gen: NodeGeneratorFn,
    dv: PredictableIncrements,
    lower: AdaptedProcess | None,
    upper: AdaptedProcess | None,
    p: float,
    q: float,
) -> PenalizedSolution:
    def penalized_gen(node: Node, yy: float) -> float:
        val = gen(node, yy)
        if p > 0:
            val += p * max(0.0, lower.values[node.index] - yy)
        if q > 0:
            val -= q * max(0.0, yy - upper.values[node.index])
        return val

    base = _backward_solve(tree, terminal, penalized_gen, dv, None, None)
    dt = tree.dt
    k = [0.0] * tree.n_nodes
    a = [0.0] * tree.n_nodes
    lower_mass = 0.0
    upper_mass = 0.0
    for n in tree.nodes:
        if n.is_leaf:
            continue
        yu = base.y.values[n.index]
        dk = p * max(0.0, lower.values[n.index] - yu) * dt if p > 0 else 0.0
        da = q * max(0.0, yu - upper.values[n.index]) * dt if q > 0 else 0.0
        weight = tree.node_probability(n.index)
        lower_mass += weight * dk
        upper_mass += weight * da
        for c in n.children:
            k[c] = dk
            a[c] = da
    return PenalizedSolution(
        y=base.y,
        m_increments=base.m_increments,
        k=PredictableIncrements(tree, tuple(k)),
        a=PredictableIncrements(tree, tuple(a)),
        lower_mass=lower_mass,
        upper_mass=upper_mass,
    )


def verify_snell_representation(
    problem: ScalarRBSDEProblem,
    solution: ScalarSolution,
    max_depth: int = 4,
    max_count: int = 10**6,
    drift_rates: Sequence[float] | None = None,
) -> float:
    """Check the optimal-stopping representation of a reflected solution.

    At every node u the solved value must equal the best stopped payoff

        max over stopping times s of
        E[ sum g(r, Y_r) dt + sum (dV - dA) + L_s 1{s<T} + xi 1{s=T} | u ],

    where the generator is frozen along the solver's own path values (the
    representation is implicit in Y) and the A-increments are folded into
    the drift when an upper barrier was active.  Returns the largest |gap|
    over nodes; exact up to roundoff for solver output.

    ``drift_rates`` optionally supplies the frozen per-node values of
    g(t, Y) directly; this is how one component of a coupled system is
    checked (its drift along the solved path depends on the node through
    the other components, not on (t, y) alone).
    """
    if problem.lower is None:
        raise ValueError("representation check needs a lower barrier")
    tree = problem.tree
    dt = tree.dt
    g = problem.generator
    y = solution.y.values
    dv = problem.v()
    da = solution.a
    lower = problem.lower.values
    rates = (
        tuple(drift_rates)
        if drift_rates is not None
        else tuple(g(n.t, y[n.index]) for n in tree.nodes)
    )

    def stopped_value(st, u: int) -> float:
        node = tree.node(u)
        if u in st.stopped:
            return float(problem.terminal[u]) if node.is_leaf else lower[u]
        acc = rates[u] * dt
        for c in node.children:
            acc += tree.node(c).prob * (
                dv.values[c] - da.values[c] + stopped_value(st, c)
            )
        return acc

    worst = 0.0
    for start in range(tree.n_nodes):
        best = max(
            stopped_value(st, start)
            for st in enumerate_stopping_times(tree, start, max_depth, max_count)
        )
        worst = max(worst, abs(best - y[start]))
    return worst
