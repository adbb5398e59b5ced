"""Exact ground truth by brute force over the reachable (node, context) graph.

The context grows by one edge per step and the horizon caps its length, so
the graph is a DAG and first-exit probabilities follow from memoized
backward induction. Keys are always the full (node, context) pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Protocol, Sequence

from .scenario import HorizonError, InadmissibleEdgeError, Scenario
from .smdp import EMPTY_CONTEXT, Context, Edge, Node, OutcomeLabel, context_update, state_key

MODES = ("behavior", "optimal")


class ConvergenceError(RuntimeError):
    pass


class InadmissiblePlanError(InadmissibleEdgeError):
    pass


class BehaviorModel(Protocol):
    def probs(self, sc: Scenario, node: Node, context: Context) -> Mapping[Edge, float]: ...


def uniform_probs(sc: Scenario, node: Node, context: Context) -> dict[Edge, float]:
    edges = sc.admissible_edges(node, context)
    return {e: 1.0 / len(edges) for e in edges} if edges else {}


@dataclass
class ReachAvoidSolution:
    values: dict[str, float]
    mode: str
    gamma: float
    residual: float
    roots: dict[str, str] = field(default_factory=dict)  # instruction -> root key

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def value(self, node: Node, context: Context = EMPTY_CONTEXT) -> float:
        return self.values[state_key(node, context)]

    def root_value(self, instruction: str) -> float:
        return self.values[self.roots[instruction]]

    def dump(self) -> str:
        lines = [f"# mode={self.mode} gamma={self.gamma!r} residual={self.residual:.3e}"]
        lines += [f"{k}\t{self.values[k]!r}" for k in sorted(self.values)]
        return "\n".join(lines) + "\n"

    @staticmethod
    def parse(text: str) -> dict[str, float]:
        out = {}
        for line in text.splitlines():
            if line and not line.startswith("#"):
                key, _, val = line.rpartition("\t")
                out[key] = float(val)
        return out


class _Solver:
    """Memoized first-exit values on the (node, context) DAG."""

    def __init__(self, sc: Scenario, mode: str, gamma: float, behavior=None):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if not 0.0 < gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
        if sc.horizon is None:
            raise HorizonError(f"scenario {sc.name} has no horizon cap")
        self.sc, self.mode, self.gamma = sc, mode, gamma
        self._probs = behavior.probs if behavior is not None else uniform_probs
        self.memo: dict[str, float] = {}
        self.labels: dict[str, OutcomeLabel] = {}
        self.states: dict[str, tuple[Node, Context]] = {}

    def backed(self, node: Node, ctx: Context, label: OutcomeLabel) -> float:
        """Contribution of arriving at (node, ctx): reward or discounted value."""
        if label is OutcomeLabel.GOAL:
            return 1.0
        if label is OutcomeLabel.FAIL:
            return 0.0
        return self.gamma * self.value(node, ctx)

    def q(self, node: Node, ctx: Context, edge: Edge) -> float:
        total = 0.0
        nctx = context_update(ctx, edge, node)
        for nxt, p in self.sc.kernel(node, ctx, edge):
            total += p * self.backed(nxt, nctx, self.sc.label(nxt, nctx))
        return total

    def value(self, node: Node, ctx: Context) -> float:
        key = state_key(node, ctx)
        hit = self.memo.get(key)
        if hit is not None:
            return hit
        label = self.sc.label(node, ctx)
        self.labels[key] = label
        self.states[key] = (node, ctx)
        v = (1.0 if label is OutcomeLabel.GOAL else 0.0) if label.terminal else self.backup(node, ctx)
        self.memo[key] = v
        return v

    def backup(self, node: Node, ctx: Context) -> float:
        if self.mode == "optimal":
            return max(self.q(node, ctx, e) for e in self.sc.admissible_edges(node, ctx))
        return math.fsum(w * self.q(node, ctx, e) for e, w in self._probs(self.sc, node, ctx).items() if w > 0)

    def residual(self) -> float:
        """Sup-norm Bellman residual recomputed from the stored table."""
        worst = 0.0
        for key, (node, ctx) in list(self.states.items()):
            if not self.labels[key].terminal:
                worst = max(worst, abs(self.backup(node, ctx) - self.memo[key]))
        return worst


def exact_reach_avoid(
    sc: Scenario,
    mode: str = "behavior",
    gamma: float = 1.0,
    tol: float = 1e-10,
    horizon: int | None = None,
    behavior: BehaviorModel | None = None,
    instructions: Iterable[str] | None = None,
) -> ReachAvoidSolution:
    """First-exit success probability for every reachable (node, context).

    ``behavior`` supplies mu_b in behavior mode (uniform when omitted);
    optimal mode maximizes over admissible edges instead.
    """
    if horizon is not None:
        sc = replace(sc, horizon=horizon)
    solver = _Solver(sc, mode, gamma, behavior)
    roots = {}
    for name in instructions or sc.instruction_names:
        root = sc.initial_node(name)
        solver.value(root, EMPTY_CONTEXT)
        roots[name] = state_key(root, EMPTY_CONTEXT)
    res = solver.residual()
    if res > tol:
        raise ConvergenceError(f"Bellman residual {res:.3e} exceeds tol {tol:.1e}")
    return ReachAvoidSolution(dict(solver.memo), mode, gamma, res, roots)


class OracleValue:
    """Value-model adaptor backed by the exact solver (optimal mode by default)."""

    kind = "oracle"

    def __init__(self, sc: Scenario, mode: str = "optimal", gamma: float = 1.0, behavior=None):
        self._solver = _Solver(sc, mode, gamma, behavior)

    def value(self, node: Node, context: Context = EMPTY_CONTEXT) -> float:
        return self._solver.value(node, context)


# ---------------------------------------------------------------------------
# open-loop plans


def _plan_edges(plan) -> tuple[Edge, ...]:
    edges = getattr(plan, "edges", plan)
    return tuple(Edge.parse(e) if isinstance(e, str) else e for e in edges)


def _feasible(sc: Scenario, node: Node, ctx: Context, plan: Sequence[Edge]) -> bool:
    """Some outcome branch (zero-probability ones included) runs the whole plan."""
    if not plan or sc.label(node, ctx).terminal:
        return True
    edge = plan[0]
    if edge not in sc.admissible_edges(node, ctx):
        return False
    nctx = context_update(ctx, edge, node)
    succ = {o.delta.apply(node) for o in sc.outcomes(node, ctx, edge)}
    return any(_feasible(sc, n2, nctx, plan[1:]) for n2 in sorted(succ, key=Node.serialize))


def _run_plan(sc: Scenario, node: Node, ctx: Context, plan: Sequence[Edge]) -> float:
    label = sc.label(node, ctx)
    if label.terminal:
        return 1.0 if label is OutcomeLabel.GOAL else 0.0
    if not plan or plan[0] not in sc.admissible_edges(node, ctx):
        return 0.0  # exhausted at an interior node, or mismatch with no admissible next edge
    edge = plan[0]
    nctx = context_update(ctx, edge, node)
    return math.fsum(p * _run_plan(sc, nxt, nctx, plan[1:]) for nxt, p in sc.kernel(node, ctx, edge))


def plan_success_prob(sc: Scenario, plan, instruction: str | None = None) -> float:
    """Exact probability that executing the fixed edge sequence reaches the goal."""
    edges = _plan_edges(plan)
    root = sc.initial_node(instruction)
    if not edges or not _feasible(sc, root, EMPTY_CONTEXT, edges):
        raise InadmissiblePlanError(
            f"plan {' -> '.join(map(str, edges)) or '<empty>'} is not admissible in {sc.full_name}"
        )
    return _run_plan(sc, root, EMPTY_CONTEXT, edges)


def enumerate_plans(
    sc: Scenario, instruction: str | None = None, depth: int | None = None
) -> list[tuple[tuple[Edge, ...], float]]:
    """All complete open-loop plans with their exact success probability.

    A plan is complete once its last edge moves probability into the goal set
    or leaves no interior mass. Rows are sorted by edge serialization.
    """
    if sc.horizon is None and depth is None:
        raise HorizonError(f"scenario {sc.name} has no horizon cap")
    depth = sc.horizon if depth is None else min(depth, sc.horizon or depth)
    root = sc.initial_node(instruction)
    rows: list[tuple[tuple[Edge, ...], float]] = []

    def extend(prefix, belief, success):
        if len(prefix) >= depth:
            return
        options = sorted({e for (n, z) in belief for e in sc.admissible_edges(n, z)}, key=Edge.serialize)
        for edge in options:
            nxt_belief: dict[tuple[Node, Context], float] = {}
            gained = 0.0
            for (n, z), w in belief.items():
                if edge not in sc.admissible_edges(n, z):
                    continue  # this branch fails under the mismatch rule
                nz = context_update(z, edge, n)
                for n2, p in sc.kernel(n, z, edge):
                    label = sc.label(n2, nz)
                    if label is OutcomeLabel.GOAL:
                        gained += w * p
                    elif label is OutcomeLabel.INTERIOR:
                        nxt_belief[(n2, nz)] = nxt_belief.get((n2, nz), 0.0) + w * p
            path = prefix + (edge,)
            if gained > 0.0 or not nxt_belief:
                rows.append((path, success + gained))
            if nxt_belief:
                extend(path, nxt_belief, success + gained)

    extend((), {(root, EMPTY_CONTEXT): 1.0}, 0.0)
    rows.sort(key=lambda r: tuple(e.serialize() for e in r[0]))
    return rows


def argmax_plan(sc: Scenario, depth: int | None = None, instruction: str | None = None):
    """Best open-loop plan by exhaustive enumeration; ties go to the lexicographically first."""
    if depth is not None and depth < 1:
        raise ValueError("depth must be >= 1")
    best = None
    for edges, prob in enumerate_plans(sc, instruction, depth):
        if best is None or round(prob, 12) > round(best[1], 12):
            best = (edges, prob)
    if best is None:
        return (), 0.0
    return best


def calibration_check(sc: Scenario) -> list[dict]:
    """Compare every configured target path against its exact probability."""
    rows = []
    for t in sc.targets:
        path = tuple(Edge.parse(e) for e in t["path"])
        prob = plan_success_prob(sc, path, t["instruction"])
        if "range" in t:
            lo, hi = (float(x) for x in t["range"])
        else:
            lo = hi = float(t["target"])
        tol = float(t.get("tol", 0.01))
        rows.append(
            {
                "instruction": t["instruction"],
                "label": t.get("label", ""),
                "path": " -> ".join(e.serialize() for e in path),
                "target": [lo, hi] if lo != hi else lo,
                "exact": prob,
                "ok": lo - tol - 1e-12 <= prob <= hi + tol + 1e-12,
            }
        )
    return rows
