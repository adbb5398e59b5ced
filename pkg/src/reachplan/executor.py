"""Plan execution through the scenario, with optional uncertainty-triggered replanning.

Mismatch rule: when the observed successor differs from the predicted one,
execution continues if the next plan edge is admissible at the observed
state and fails otherwise. A plan that runs out at an interior state fails.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .scenario import Scenario
from .search import Plan, SearchConfig, SearchError, SearchTree, search
from .smdp import EMPTY_CONTEXT, Context, EpisodeRecord, Node, OutcomeLabel, Transition, context_update, entrance_reward


class ExecutionError(ValueError):
    pass


@dataclass
class StepLog:
    edge: str
    predicted: str
    observed: str
    match: bool
    trigger: bool = False
    switch: str = ""  # "tree", "search" or "" when no switch happened

    def to_record(self) -> dict:
        return {
            "edge": self.edge,
            "predicted": self.predicted,
            "observed": self.observed,
            "match": self.match,
            "trigger": self.trigger,
            "switch": self.switch,
        }


def episode_log_jsonl(logs: list[StepLog]) -> str:
    return "".join(json.dumps(s.to_record(), sort_keys=True) + "\n" for s in logs)


class UncertaintyMonitor:
    """Rolling population variance over the last ``window`` trace samples."""

    def __init__(self, window: int = 5, kappa: float = 1.0):
        if window < 2:
            raise ValueError("window must be >= 2")
        if not kappa > 0:
            raise ValueError("kappa must be > 0")
        self.window = window
        self.kappa = kappa
        self.buf: deque[float] = deque(maxlen=window)

    def reset(self) -> None:
        self.buf.clear()

    def update(self, sample: float) -> bool:
        self.buf.append(float(sample))
        return len(self.buf) == self.window and float(np.var(self.buf)) > self.kappa


def monitor_update(mon: UncertaintyMonitor, sample: float) -> bool:
    return mon.update(sample)


@dataclass
class ReplanConfig:
    enabled: bool = True
    lambda_down: float = 0.5
    max_switches: int = 2
    search: SearchConfig = field(default_factory=SearchConfig)

    def __post_init__(self):
        if not 0.0 <= self.lambda_down < 1.0:
            raise ValueError("lambda_down must lie in [0, 1)")
        if self.max_switches < 0:
            raise ValueError("max_switches must be >= 0")


def _finish(ep: EpisodeRecord, label: OutcomeLabel, reason: str) -> EpisodeRecord:
    ep.label = label
    ep.reason = reason
    return ep


def _check_start(plan: Plan, sc: Scenario) -> Node:
    if not plan.edges:
        raise ExecutionError("cannot execute an empty plan")
    start = plan.nodes[0]
    if start != sc.initial_node(start.instruction):
        raise ExecutionError("plan does not start at the scenario's initial node")
    return start


def execute_plan(plan: Plan, sc: Scenario, rng: np.random.Generator) -> tuple[EpisodeRecord, list[StepLog]]:
    """Open-loop execution with the mismatch rule."""
    node = _check_start(plan, sc)
    ctx = EMPTY_CONTEXT
    ep = EpisodeRecord(node.instruction)
    logs: list[StepLog] = []
    for i, edge in enumerate(plan.edges):
        if edge not in sc.admissible_edges(node, ctx):
            return _finish(ep, OutcomeLabel.FAIL, "mismatch"), logs
        nxt, _, _ = sc.step_option(node, ctx, edge, rng)
        nctx = context_update(ctx, edge, node)
        arrived = sc.label(nxt, nctx)
        ep.steps.append(Transition(node, ctx, edge, nxt, entrance_reward(arrived), arrived))
        logs.append(StepLog(edge.serialize(), plan.nodes[i + 1].serialize(), nxt.serialize(), nxt == plan.nodes[i + 1]))
        node, ctx = nxt, nctx
        if arrived.terminal:
            return _finish(ep, arrived, arrived.value), logs
    return _finish(ep, OutcomeLabel.FAIL, "plan exhausted"), logs


def down_weight(leaf, lam: float) -> None:
    """Scale W (hence Q) on the committed root-to-leaf path; N is unchanged."""
    for n in leaf.path():
        n.W *= lam


def _switch(tree: SearchTree, node: Node, ctx: Context, proposal, value, rcfg: ReplanConfig):
    """Best alternative rooted at the observed state, else a fresh search from it."""
    anchors = [n for n in tree.nodes if n.node == node and n.context == ctx and n.children]
    best = None
    for a in anchors:
        leaf = tree.best_leaf(within=a)
        if leaf is not None and (best is None or _better(leaf, best[1], a, best[0])):
            best = (a, leaf)
    if best is not None:
        anchor, leaf = best
        path = leaf.path()
        start = path.index(anchor)
        sub = path[start:]
        plan = Plan(tuple(n.node for n in sub), tuple(n.edge for n in sub[1:]), leaf.label, leaf)
        return tree, plan, "tree"
    new_tree, plan = search(node, proposal, value, rcfg.search, root_context=ctx)
    return new_tree, plan, "search"


def _better(leaf, other, anchor, other_anchor) -> bool:
    def key(lf, an):
        p = 1.0
        for n in lf.path()[lf.path().index(an) + 1:]:
            p *= n.succ_prob
        return (-p * lf.Q, -lf.Q, lf.path_text())

    return key(leaf, anchor) < key(other, other_anchor)


def execute_with_replanning(
    tree: SearchTree,
    plan: Plan,
    sc: Scenario,
    monitor: UncertaintyMonitor,
    rcfg: ReplanConfig,
    proposal,
    value,
    rng: np.random.Generator,
) -> tuple[EpisodeRecord, list[StepLog]]:
    """Execute ``plan``; on a monitor trigger, penalize the committed branch and switch.

    The edge in flight always resolves to its sampled outcome, and the new
    plan starts from the observed node.
    """
    node = _check_start(plan, sc)
    ctx = EMPTY_CONTEXT
    ep = EpisodeRecord(node.instruction)
    logs: list[StepLog] = []
    switches = 0
    edges = list(plan.edges)
    predicted = list(plan.nodes[1:])
    committed = plan.leaf
    pos = 0
    while True:
        if pos >= len(edges):
            return _finish(ep, OutcomeLabel.FAIL, "plan exhausted"), logs
        edge = edges[pos]
        if edge not in sc.admissible_edges(node, ctx):
            return _finish(ep, OutcomeLabel.FAIL, "mismatch"), logs
        nxt, _, trace = sc.step_option(node, ctx, edge, rng)
        monitor.reset()
        triggered = False
        for x in trace.samples:
            triggered = monitor.update(x) or triggered
        nctx = context_update(ctx, edge, node)
        arrived = sc.label(nxt, nctx)
        ep.steps.append(Transition(node, ctx, edge, nxt, entrance_reward(arrived), arrived))
        log = StepLog(edge.serialize(), predicted[pos].serialize(), nxt.serialize(), nxt == predicted[pos], triggered)
        logs.append(log)
        node, ctx = nxt, nctx
        pos += 1
        if arrived.terminal:
            return _finish(ep, arrived, arrived.value), logs
        if triggered and rcfg.enabled and switches < rcfg.max_switches:
            if committed is not None:
                down_weight(committed, rcfg.lambda_down)
            try:
                tree, new_plan, how = _switch(tree, node, ctx, proposal, value, rcfg)
            except SearchError as exc:
                return _finish(ep, OutcomeLabel.FAIL, f"replan failed: {exc}"), logs
            switches += 1
            log.switch = how
            edges, predicted, committed, pos = list(new_plan.edges), list(new_plan.nodes[1:]), new_plan.leaf, 0


def never_triggering_monitor() -> UncertaintyMonitor:
    return UncertaintyMonitor(window=2, kappa=math.inf)
