"""Stochastic subgoal-level environments loaded from YAML scenario files.

Schema (top-level keys)::

    name: str
    horizon: int | null            # H_max, default 12; null = unbounded
    roles: {object: role}          # optional; used to lift object names
    fail: [fact-pattern]           # failure set: any fact matches any pattern
    traces: {regime: {mean, var, length}}   # named uncertainty regimes
    instructions:
      - name: str
        facts: [fact]              # initial facts
        gripper: open | closed | holding(obj)
        goal: [fact-pattern]       # goal set: every pattern matched by a fact
    edges:
      - edge: verb(args)           # may contain $var placeholders
        for: {var: [values]}       # optional cartesian expansion
        requires: [fact]           # initiation: all present
        forbids: [fact]            # initiation: none present
        gripper: any | open | closed | holding | holding(obj)
        after: [edge]              # optional: history must contain this subsequence
        outcomes: [{p, add, remove, gripper, trace}]
        overrides:                 # first matching entry wins
          - after: [edge]          # subsequence of the executed edge history
            requires: [fact]       # and/or fact conditions on the current node
            forbids: [fact]
            outcomes: [...]
    targets: [{instruction, path: [edge], target | range: [lo, hi]}]
    variants:
      name: {rename: {old: new}, perturb: [{edge, after?, requires?, delta}]}

Fact patterns use shell-style wildcards (``in(small,*)``). Probabilities are
numbers or ``"a/b"`` strings. Atoms such as ``in(box,drawer)`` may be written
unquoted inside flow lists; they are quoted before the YAML parser sees them.
"""

from __future__ import annotations

import itertools
import re
import math
from dataclasses import dataclass, field, replace
from fnmatch import fnmatchcase
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .smdp import (
    Context,
    Edge,
    Node,
    OutcomeLabel,
    SerializationError,
    rename_atom,
)

PROB_TOL = 1e-12
DEFAULT_HORIZON = 12
BUILTIN_SCENARIOS = ("plug3", "plug2", "drawer-box", "drawer-can", "cabinet", "simpler", "drawer-replan")


class ScenarioError(ValueError):
    pass


class ScenarioParseError(ScenarioError):
    pass


class ScenarioValidationError(ScenarioError):
    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


class InadmissibleEdgeError(ScenarioError):
    pass


class UnknownInstructionError(ScenarioError, KeyError):
    def __str__(self) -> str:
        return self.args[0]


class HorizonError(ScenarioError):
    pass


@dataclass(frozen=True)
class TraceSpec:
    mean: float = 0.0
    var: float = 0.01
    length: int = 10


@dataclass(frozen=True)
class ExecutionTrace:
    samples: tuple[float, ...]

    @property
    def duration(self) -> int:
        return len(self.samples)


@dataclass(frozen=True, order=True)
class Delta:
    """Fact-level change applied by an option outcome."""

    adds: tuple[str, ...] = ()
    removes: tuple[str, ...] = ()
    gripper: str | None = None

    def apply(self, node: Node) -> Node:
        facts = (set(node.facts) - set(self.removes)) | set(self.adds)
        return Node(tuple(facts), self.gripper or node.gripper, node.instruction)

    @classmethod
    def between(cls, before: Node, after: Node) -> "Delta":
        a, b = set(before.facts), set(after.facts)
        grip = after.gripper if after.gripper != before.gripper else None
        return cls(tuple(sorted(b - a)), tuple(sorted(a - b)), grip)

    def serialize(self) -> str:
        toks = [f"+{f}" for f in self.adds] + [f"-{f}" for f in self.removes]
        if self.gripper:
            toks.append(f"@{self.gripper}")
        return " ".join(toks) or "="

    @classmethod
    def parse(cls, text: str) -> "Delta":
        adds, removes, grip = [], [], None
        for tok in text.split():
            if tok == "=":
                continue
            if tok[0] == "+":
                adds.append(tok[1:])
            elif tok[0] == "-":
                removes.append(tok[1:])
            elif tok[0] == "@":
                grip = tok[1:]
            else:
                raise SerializationError(f"bad delta token {tok!r}")
        return cls(tuple(sorted(adds)), tuple(sorted(removes)), grip)

    def rename(self, mapping: Mapping[str, str]) -> "Delta":
        return Delta(
            tuple(sorted(rename_atom(f, mapping) for f in self.adds)),
            tuple(sorted(rename_atom(f, mapping) for f in self.removes)),
            rename_atom(self.gripper, mapping) if self.gripper else None,
        )


@dataclass(frozen=True)
class OutcomeEntry:
    delta: Delta
    probability: float
    trace: TraceSpec
    # FAIL when the delta itself enters the failure set, INTERIOR otherwise;
    # goal membership depends on the instruction and is decided on arrival.
    label: OutcomeLabel = OutcomeLabel.INTERIOR


@dataclass(frozen=True)
class Override:
    after: tuple[Edge, ...]
    outcomes: tuple[OutcomeEntry, ...]
    requires: tuple[str, ...] = ()
    forbids: tuple[str, ...] = ()

    def matches(self, node: Node, context: Context) -> bool:
        return (
            all(f in node.facts for f in self.requires)
            and not any(f in node.facts for f in self.forbids)
            and is_subsequence(self.after, context.edges)
        )


@dataclass(frozen=True)
class EdgeDef:
    edge: Edge
    requires: tuple[str, ...] = ()
    forbids: tuple[str, ...] = ()
    gripper: str = "any"
    after: tuple[Edge, ...] = ()
    outcomes: tuple[OutcomeEntry, ...] = ()
    overrides: tuple[Override, ...] = ()

    def initiation(self, node: Node, context: Context) -> bool:
        if any(f not in node.facts for f in self.requires):
            return False
        if any(f in node.facts for f in self.forbids):
            return False
        g = self.gripper
        if g == "holding":
            if node.held is None:
                return False
        elif g != "any" and node.gripper != g:
            return False
        return not self.after or is_subsequence(self.after, context.edges)

    def branch(self, node: Node, context: Context) -> tuple[OutcomeEntry, ...]:
        """Outcome table at (node, history): first matching override, else base."""
        for ov in self.overrides:
            if ov.matches(node, context):
                return ov.outcomes
        return self.outcomes


@dataclass(frozen=True)
class Instruction:
    name: str
    facts: tuple[str, ...]
    gripper: str
    goal: tuple[str, ...]


def is_subsequence(pattern: Sequence[Edge], history: Sequence[Edge]) -> bool:
    it = iter(history)
    return all(any(p == h for h in it) for p in pattern)


def matches_any(facts: Sequence[str], patterns: Sequence[str]) -> bool:
    return any(fnmatchcase(f, p) for p in patterns for f in facts)


@dataclass(frozen=True)
class Scenario:
    name: str
    objects: tuple[str, ...]
    instructions: tuple[Instruction, ...]
    edges: tuple[EdgeDef, ...]
    fail_patterns: tuple[str, ...]
    horizon: int | None = DEFAULT_HORIZON
    roles: Mapping[str, str] = field(default_factory=dict)
    variants: Mapping[str, Any] = field(default_factory=dict)
    variant: str = "base"
    targets: tuple = ()  # calibration targets, reported by `calibrate`
    # memo tables; init=False keeps them private to each instance (replace() builds fresh ones)
    _memo: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "_memo", {"cls": {}, "adm": {}})

    # -- predicates -------------------------------------------------------
    def instruction(self, name: str) -> Instruction:
        for ins in self.instructions:
            if ins.name == name:
                return ins
        raise UnknownInstructionError(f"unknown instruction {name!r} for scenario {self.name}")

    @property
    def instruction_names(self) -> tuple[str, ...]:
        return tuple(i.name for i in self.instructions)

    def is_goal(self, node: Node) -> bool:
        goal = self.instruction(node.instruction).goal
        return all(any(fnmatchcase(f, p) for f in node.facts) for p in goal)

    def is_fail(self, node: Node) -> bool:
        return matches_any(node.facts, self.fail_patterns)

    def classify(self, node: Node) -> OutcomeLabel:
        """Predicate label of a node (goal set / failure set / interior)."""
        memo = self._memo["cls"]
        lab = memo.get(node)
        if lab is None:
            if self.is_fail(node):
                lab = OutcomeLabel.FAIL
            elif self.is_goal(node):
                lab = OutcomeLabel.GOAL
            else:
                lab = OutcomeLabel.INTERIOR
            memo[node] = lab
        return lab

    def label(self, node: Node, context: Context) -> OutcomeLabel:
        """State-level label: horizon overrun and dead ends count as failure."""
        lab = self.classify(node)
        if lab.terminal:
            return lab
        if self.horizon is not None and context.depth >= self.horizon:
            return OutcomeLabel.FAIL
        if not self._initiated_edges(node, context):
            return OutcomeLabel.FAIL
        return lab

    # -- kernel -----------------------------------------------------------
    def _initiated(self, node: Node, context: Context) -> list[EdgeDef]:
        return [d for d in self.edges if d.initiation(node, context)]

    def edge_def(self, edge: Edge) -> EdgeDef:
        for d in self.edges:
            if d.edge == edge:
                return d
        raise InadmissibleEdgeError(f"edge {edge} is not defined in scenario {self.name}")

    def _initiated_edges(self, node: Node, context: Context) -> tuple[Edge, ...]:
        key = (node, context.edges)
        memo = self._memo["adm"]
        hit = memo.get(key)
        if hit is None:
            hit = tuple(sorted((d.edge for d in self._initiated(node, context)), key=Edge.serialize))
            memo[key] = hit
        return hit

    def admissible_edges(self, node: Node, context: Context) -> list[Edge]:
        if self.classify(node).terminal:
            return []
        return list(self._initiated_edges(node, context))

    def outcomes(self, node: Node, context: Context, edge: Edge) -> tuple[OutcomeEntry, ...]:
        if edge not in self.admissible_edges(node, context):
            raise InadmissibleEdgeError(f"edge {edge} is inadmissible at {node}")
        return self.edge_def(edge).branch(node, context)

    def kernel(self, node: Node, context: Context, edge: Edge) -> list[tuple[Node, float]]:
        """Exact successor distribution, equal successors merged, sorted by node."""
        acc: dict[Node, float] = {}
        for o in self.outcomes(node, context, edge):
            if o.probability > 0.0:
                nxt = o.delta.apply(node)
                acc[nxt] = acc.get(nxt, 0.0) + o.probability
        return sorted(acc.items(), key=lambda kv: kv[0].serialize())

    def step_option(self, node: Node, context: Context, edge: Edge, rng: np.random.Generator):
        entries = self.outcomes(node, context, edge)
        u = rng.random()
        acc = 0.0
        chosen = entries[-1]
        for o in entries:
            acc += o.probability
            if u < acc and o.probability > 0.0:
                chosen = o
                break
        if chosen.probability <= 0.0:
            chosen = next(o for o in reversed(entries) if o.probability > 0.0)
        nxt = chosen.delta.apply(node)
        spec = chosen.trace
        samples = rng.normal(spec.mean, math.sqrt(spec.var), spec.length)
        return nxt, self.classify(nxt), ExecutionTrace(tuple(float(s) for s in samples))

    def initial_node(self, instruction: str | None = None, rng: np.random.Generator | None = None) -> Node:
        ins = self.instruction(instruction) if instruction is not None else self.instructions[0]
        return Node(ins.facts, ins.gripper, ins.name)

    # -- lifting / variants -------------------------------------------------
    def lift_map(self) -> dict[str, str]:
        return {o: f"role-{r}" for o, r in self.roles.items()}

    def with_variant(self, name: str) -> "Scenario":
        if name == "base":
            return self
        if name not in self.variants:
            raise ScenarioValidationError("variant", f"scenario {self.name} has no variant {name!r}")
        spec = self.variants[name] or {}
        return _apply_variant(self, name, spec)

    @property
    def full_name(self) -> str:
        return self.name if self.variant == "base" else f"{self.name}:{self.variant}"

    def calibration_report(self, instruction: str | None = None):
        from .oracle import enumerate_plans

        if self.horizon is None:
            raise HorizonError(f"scenario {self.name} has no horizon cap")
        names = [instruction] if instruction else list(self.instruction_names)
        rows = []
        for name in names:
            for edges, prob in enumerate_plans(self, name):
                rows.append((name, tuple(edges), prob))
        return rows


# ---------------------------------------------------------------------------
# loading


def _prob(value, where: str) -> float:
    try:
        if isinstance(value, str):
            return float(Fraction(value.replace(" ", "")))
        return float(value)
    except (ValueError, ZeroDivisionError, TypeError):
        raise ScenarioValidationError("probability", f"{where}: cannot read probability {value!r}") from None


_VAR_RE = re.compile(r"\$([A-Za-z_][A-Za-z0-9_]*)")


def _subst(obj, binding: Mapping[str, str]):
    if isinstance(obj, str):
        return _VAR_RE.sub(lambda m: binding.get(m.group(1), m.group(0)), obj)
    if isinstance(obj, list):
        return [_subst(x, binding) for x in obj]
    if isinstance(obj, dict):
        return {k: _subst(v, binding) for k, v in obj.items()}
    return obj


def _expand_edges(raw_edges: list) -> list[dict]:
    out = []
    for raw in raw_edges:
        loops = raw.get("for") or {}
        if not loops:
            out.append(raw)
            continue
        keys = sorted(loops)
        for combo in itertools.product(*(loops[k] for k in keys)):
            binding = dict(zip(keys, (str(c) for c in combo)))
            item = {k: v for k, v in raw.items() if k != "for"}
            out.append(_subst(item, binding))
    return out


def _trace(raw, traces: Mapping[str, TraceSpec], failing: bool, where: str) -> TraceSpec:
    if raw is None:
        return traces["failure" if failing else "nominal"]
    if isinstance(raw, str):
        if raw not in traces:
            raise ScenarioValidationError("trace", f"{where}: unknown trace regime {raw!r}")
        return traces[raw]
    spec = TraceSpec(float(raw.get("mean", 0.0)), float(raw.get("var", 0.01)), int(raw.get("length", 10)))
    if spec.length < 1 or spec.var < 0:
        raise ScenarioValidationError("trace", f"{where}: trace length must be >= 1 and var >= 0")
    return spec


def _outcomes(raw_list, traces, fail_patterns, where: str) -> tuple[OutcomeEntry, ...]:
    if not raw_list:
        raise ScenarioValidationError("outcomes", f"{where}: no outcomes")
    entries = []
    for i, raw in enumerate(raw_list):
        w = f"{where} outcome {i}"
        p = _prob(raw.get("p"), w)
        if not -PROB_TOL <= p <= 1 + PROB_TOL:
            raise ScenarioValidationError("probability", f"{w}: probability {p} outside [0, 1]")
        adds = tuple(sorted(raw.get("add") or ()))
        delta = Delta(adds, tuple(sorted(raw.get("remove") or ())), raw.get("gripper"))
        failing = matches_any(adds, fail_patterns)
        entries.append(
            OutcomeEntry(
                delta,
                min(max(p, 0.0), 1.0),
                _trace(raw.get("trace"), traces, failing, w),
                OutcomeLabel.FAIL if failing else OutcomeLabel.INTERIOR,
            )
        )
    total = math.fsum(o.probability for o in entries)
    if abs(total - 1.0) > PROB_TOL:
        raise ScenarioValidationError("probability-sum", f"{where}: outcome probabilities sum to {total!r}, not 1")
    return tuple(entries)


def _build(doc: Mapping[str, Any]) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioValidationError("schema", "top level must be a mapping")
    for key in ("name", "instructions", "edges"):
        if key not in doc:
            raise ScenarioValidationError("schema", f"missing required key {key!r}")
    fail_patterns = tuple(doc.get("fail") or ("failed(*)",))
    traces = {
        "nominal": TraceSpec(0.0, 0.01, 10),
        "failure": TraceSpec(0.0, 0.25, 10),
    }
    for name, raw in (doc.get("traces") or {}).items():
        traces[name] = _trace(raw, traces, False, f"traces.{name}")
    try:
        instructions = tuple(
            Instruction(
                str(i["name"]),
                tuple(i.get("facts") or ()),
                str(i.get("gripper", "open")),
                tuple(i.get("goal") or ()),
            )
            for i in doc["instructions"]
        )
        edge_defs = []
        seen = set()
        for raw in _expand_edges(list(doc["edges"])):
            edge = Edge.parse(raw["edge"])
            where = f"edge {edge}"
            if edge in seen:
                raise ScenarioValidationError("schema", f"duplicate edge definition {edge}")
            seen.add(edge)
            overrides = tuple(
                Override(
                    tuple(Edge.parse(a) for a in ov.get("after") or ()),
                    _outcomes(ov.get("outcomes"), traces, fail_patterns, f"{where} override {j}"),
                    tuple(ov.get("requires") or ()),
                    tuple(ov.get("forbids") or ()),
                )
                for j, ov in enumerate(raw.get("overrides") or ())
            )
            edge_defs.append(
                EdgeDef(
                    edge,
                    tuple(raw.get("requires") or ()),
                    tuple(raw.get("forbids") or ()),
                    str(raw.get("gripper", "any")),
                    tuple(Edge.parse(a) for a in raw.get("after") or ()),
                    _outcomes(raw.get("outcomes"), traces, fail_patterns, where),
                    overrides,
                )
            )
    except (KeyError, TypeError, AttributeError) as exc:
        raise ScenarioValidationError("schema", f"malformed entry: {exc}") from None
    except SerializationError as exc:
        raise ScenarioValidationError("grammar", str(exc)) from None
    if not instructions:
        raise ScenarioValidationError("schema", "at least one instruction is required")
    horizon = doc.get("horizon", DEFAULT_HORIZON)
    if horizon is not None and (not isinstance(horizon, int) or horizon < 1):
        raise ScenarioValidationError("schema", f"horizon must be a positive integer or null, got {horizon!r}")
    objects = set(doc.get("objects") or ())
    for d in edge_defs:
        objects.update(d.edge.args)
    sc = Scenario(
        name=str(doc["name"]),
        objects=tuple(sorted(objects)),
        instructions=instructions,
        edges=tuple(edge_defs),
        fail_patterns=fail_patterns,
        horizon=horizon,
        roles=dict(doc.get("roles") or {}),
        variants=dict(doc.get("variants") or {}),
        targets=tuple(doc.get("targets") or ()),
    )
    validate(sc)
    return sc


def reachable_nodes(sc: Scenario, max_nodes: int = 200_000) -> set[Node]:
    """Node-level reachability over every branch (a superset of history-aware reach)."""
    frontier = [sc.initial_node(i) for i in sc.instruction_names]
    seen = set(frontier)
    while frontier:
        node = frontier.pop()
        if sc.classify(node).terminal:
            continue
        for d in sc.edges:
            if not _node_initiation(d, node):
                continue
            branches = [d.outcomes] + [ov.outcomes for ov in d.overrides]
            for outs in branches:
                for o in outs:
                    if o.probability <= 0.0:
                        continue
                    nxt = o.delta.apply(node)
                    if nxt not in seen:
                        seen.add(nxt)
                        frontier.append(nxt)
                        if len(seen) > max_nodes:
                            raise ScenarioValidationError("size", "reachable node set too large")
    return seen


def _node_initiation(d: EdgeDef, node: Node) -> bool:
    # history patterns are ignored here; the check over-approximates reach
    return replace(d, after=()).initiation(node, Context())


def validate(sc: Scenario) -> None:
    for ins in sc.instructions:
        try:
            Node(ins.facts, ins.gripper, ins.name)
        except SerializationError as exc:
            raise ScenarioValidationError("grammar", f"instruction {ins.name!r}: {exc}") from None
    try:
        nodes = reachable_nodes(sc)
    except SerializationError as exc:
        raise ScenarioValidationError("grammar", str(exc)) from None
    for node in nodes:
        if sc.is_fail(node) and sc.is_goal(node):
            raise ScenarioValidationError("disjointness", f"node {node} is in both goal and failure sets")
        if not sc.is_fail(node):
            continue
        for d in sc.edges:
            if not _node_initiation(d, node):
                continue
            for outs in [d.outcomes] + [ov.outcomes for ov in d.overrides]:
                for o in outs:
                    if o.probability > 0.0 and not sc.is_fail(o.delta.apply(node)):
                        raise ScenarioValidationError(
                            "absorption", f"edge {d.edge} leaves the failure set from {node}"
                        )


def _apply_variant(sc: Scenario, name: str, spec: Mapping[str, Any]) -> Scenario:
    perturb = list(spec.get("perturb") or ())
    edges = []
    for d in sc.edges:
        outcomes, overrides = d.outcomes, list(d.overrides)
        for p in perturb:
            if Edge.parse(p["edge"]) != d.edge:
                continue
            delta = float(p.get("delta", 0.0))
            after = tuple(Edge.parse(a) for a in p.get("after") or ())
            if not after and not p.get("requires"):
                outcomes = _shift(outcomes, delta)
            for j, ov in enumerate(overrides):
                if ov.after == after and ov.requires == tuple(p.get("requires") or ()):
                    overrides[j] = replace(ov, outcomes=_shift(ov.outcomes, delta))
        edges.append(replace(d, outcomes=outcomes, overrides=tuple(overrides)))
    out = replace(sc, edges=tuple(edges), variant=name)
    mapping = {str(k): str(v) for k, v in (spec.get("rename") or {}).items()}
    if mapping:
        out = _rename(out, mapping)
    validate(out)
    return out


def _shift(outcomes: tuple[OutcomeEntry, ...], delta: float) -> tuple[OutcomeEntry, ...]:
    """Move ``delta`` probability mass from the last outcome to the first."""
    if len(outcomes) < 2:
        return outcomes
    first, last = outcomes[0], outcomes[-1]
    d = min(max(delta, -first.probability), last.probability)
    outs = list(outcomes)
    outs[0] = replace(first, probability=first.probability + d)
    outs[-1] = replace(last, probability=last.probability - d)
    return tuple(outs)


def _rename(sc: Scenario, mapping: Mapping[str, str]) -> Scenario:
    def ren_facts(fs):
        return tuple(rename_atom(f, mapping) for f in fs)

    def ren_out(o: OutcomeEntry) -> OutcomeEntry:
        return replace(o, delta=o.delta.rename(mapping))

    edges = tuple(
        EdgeDef(
            d.edge.rename(mapping),
            ren_facts(d.requires),
            ren_facts(d.forbids),
            rename_atom(d.gripper, mapping),
            tuple(e.rename(mapping) for e in d.after),
            tuple(ren_out(o) for o in d.outcomes),
            tuple(
                Override(
                    tuple(e.rename(mapping) for e in ov.after),
                    tuple(ren_out(o) for o in ov.outcomes),
                    ren_facts(ov.requires),
                    ren_facts(ov.forbids),
                )
                for ov in d.overrides
            ),
        )
        for d in sc.edges
    )
    instructions = tuple(
        Instruction(i.name, ren_facts(i.facts), rename_atom(i.gripper, mapping), ren_facts(i.goal))
        for i in sc.instructions
    )
    roles = {mapping.get(o, o): r for o, r in sc.roles.items()}
    objects = tuple(sorted(mapping.get(o, o) for o in sc.objects))
    return replace(sc, edges=edges, instructions=instructions, roles=roles, objects=objects)


# multi-argument atom not already inside quotes
_BARE_ATOM_RE = re.compile(r"""(?<![\w"'$*-])([\w$*-]+\([^()\s"']*,[^()\s"']*\))(?!["'])""")


def _quote_atoms(text: str) -> str:
    return _BARE_ATOM_RE.sub(r'"\1"', text)


def load_scenario(config_text: str) -> Scenario:
    try:
        doc = yaml.safe_load(_quote_atoms(config_text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ScenarioParseError(f"scenario config parse error{where}: {getattr(exc, 'problem', exc)}") from None
    return _build(doc)


def builtin_path(name: str) -> Path:
    return Path(str(resources.files("reachplan") / "scenarios" / f"{name}.yaml"))


def get_scenario(spec: str) -> Scenario:
    """Load ``name`` or ``name:variant`` from the built-ins or a file path."""
    name, _, variant = spec.partition(":")
    path = Path(name)
    if not path.suffix:
        path = builtin_path(name)
    if not path.exists():
        raise ScenarioError(f"unknown scenario {name!r}")
    sc = load_scenario(path.read_text())
    return sc.with_variant(variant) if variant else sc
