"""Symbolic node/edge objects of the option-level decision process.

Canonical text grammar (used verbatim in dataset files, model files and
tree dumps)::

    node     := facts "|" gripper "|" instruction
    facts    := "" | fact (";" fact)*          # sorted, duplicate-free
    fact     := NAME | NAME "(" NAME ("," NAME)* ")"
    gripper  := "open" | "closed" | "holding(" NAME ")"
    edge     := NAME "(" [NAME ("," NAME)*] ")"
    context  := "" | edge " -> " node (" -> " edge " -> " node)*

NAME is ``[A-Za-z0-9_-]+``; instructions are free text without ``|`` or ``>``.
A context stores, for every executed edge, the edge followed by the node it
was taken from, so ``context_update(z, e, n)`` appends ``e`` then ``n``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

_NAME = r"[A-Za-z0-9_\-]+"
_FACT_RE = re.compile(rf"^{_NAME}(\({_NAME}(,{_NAME})*\))?$")
_EDGE_RE = re.compile(rf"^({_NAME})\((({_NAME})(,{_NAME})*)?\)$")
_GRIPPER_RE = re.compile(rf"^(open|closed|holding\(({_NAME})\))$")
CONTEXT_SEP = " -> "


class SerializationError(ValueError):
    pass


class TruncatedEpisodeError(ValueError):
    pass


class OutcomeLabel(str, enum.Enum):
    INTERIOR = "interior"
    GOAL = "goal"
    FAIL = "fail"

    @property
    def terminal(self) -> bool:
        return self is not OutcomeLabel.INTERIOR


def split_atom(atom: str) -> tuple[str, tuple[str, ...]]:
    """Split ``pred(a,b)`` into ``("pred", ("a", "b"))``."""
    if "(" not in atom:
        return atom, ()
    head, rest = atom.split("(", 1)
    inner = rest[:-1]
    return head, tuple(inner.split(",")) if inner else ()


def join_atom(head: str, args: Sequence[str]) -> str:
    return f"{head}({','.join(args)})"


def rename_atom(atom: str, mapping: Mapping[str, str]) -> str:
    head, args = split_atom(atom)
    if "(" not in atom:
        return atom
    return join_atom(head, [mapping.get(a, a) for a in args])


@dataclass(frozen=True, order=True)
class Edge:
    verb: str
    args: tuple[str, ...] = ()

    def __post_init__(self):
        if not re.fullmatch(_NAME, self.verb) or not all(re.fullmatch(_NAME, a) for a in self.args):
            raise SerializationError(f"bad edge tokens: {self.verb!r} {self.args!r}")

    @classmethod
    def parse(cls, text: str) -> "Edge":
        m = _EDGE_RE.match(text.strip())
        if not m:
            raise SerializationError(f"cannot parse edge {text!r}")
        verb, args = split_atom(text.strip())
        return cls(verb, args)

    def serialize(self) -> str:
        return join_atom(self.verb, self.args)

    def rename(self, mapping: Mapping[str, str]) -> "Edge":
        return Edge(self.verb, tuple(mapping.get(a, a) for a in self.args))

    def __str__(self) -> str:
        return self.serialize()


@dataclass(frozen=True)
class Node:
    """Canonical symbolic scene state: sorted facts, gripper status, instruction."""

    facts: tuple[str, ...]
    gripper: str = "open"
    instruction: str = ""

    def __post_init__(self):
        canon = tuple(sorted(set(self.facts)))
        object.__setattr__(self, "facts", canon)
        for f in canon:
            if not _FACT_RE.match(f):
                raise SerializationError(f"bad fact {f!r}")
        if not _GRIPPER_RE.match(self.gripper):
            raise SerializationError(f"bad gripper status {self.gripper!r}")
        if "|" in self.instruction or ">" in self.instruction:
            raise SerializationError(f"bad instruction {self.instruction!r}")

    @classmethod
    def make(cls, facts: Iterable[str], gripper: str = "open", instruction: str = "") -> "Node":
        return cls(tuple(facts), gripper, instruction)

    @classmethod
    def parse(cls, text: str) -> "Node":
        parts = text.split("|")
        if len(parts) != 3:
            raise SerializationError(f"cannot parse node {text!r}")
        facts = tuple(f for f in parts[0].split(";") if f)
        return cls(facts, parts[1], parts[2])

    def serialize(self) -> str:
        return f"{';'.join(self.facts)}|{self.gripper}|{self.instruction}"

    @property
    def held(self) -> str | None:
        m = _GRIPPER_RE.match(self.gripper)
        return m.group(2) if m else None

    def has(self, fact: str) -> bool:
        return fact in self.facts

    def rename(self, mapping: Mapping[str, str]) -> "Node":
        return Node(
            tuple(rename_atom(f, mapping) for f in self.facts),
            rename_atom(self.gripper, mapping),
            self.instruction,
        )

    def __str__(self) -> str:
        return self.serialize()


@dataclass(frozen=True)
class Context:
    """History of executed edges and the nodes they were taken from."""

    entries: tuple = ()

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def depth(self) -> int:
        return len(self.entries) // 2

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self.entries[0::2]

    @property
    def nodes(self) -> tuple[Node, ...]:
        return self.entries[1::2]

    @property
    def last_edge(self) -> Edge | None:
        return self.entries[-2] if self.entries else None

    def serialize(self) -> str:
        return CONTEXT_SEP.join(x.serialize() for x in self.entries)

    @classmethod
    def parse(cls, text: str) -> "Context":
        if not text:
            return cls()
        parts = text.split(CONTEXT_SEP)
        if len(parts) % 2:
            raise SerializationError(f"context has odd entry count: {text!r}")
        entries = []
        for i, p in enumerate(parts):
            entries.append(Edge.parse(p) if i % 2 == 0 else Node.parse(p))
        return cls(tuple(entries))

    def rename(self, mapping: Mapping[str, str]) -> "Context":
        return Context(tuple(x.rename(mapping) for x in self.entries))


EMPTY_CONTEXT = Context()


def context_update(z: Context, e: Edge, n: Node) -> Context:
    """Return ``[z, e, n]``; ``n`` is the node ``e`` was executed from."""
    return Context(z.entries + (e, n))


@dataclass(frozen=True)
class NodeEdgeState:
    node: Node
    context: Context = EMPTY_CONTEXT

    def key(self) -> str:
        return state_key(self.node, self.context)


def state_key(node: Node, context: Context) -> str:
    return f"{node.serialize()} @ {context.serialize()}"


def entrance_reward(next_label: OutcomeLabel) -> int:
    return int(next_label is OutcomeLabel.GOAL)


@dataclass(frozen=True)
class Transition:
    node: Node
    context: Context
    edge: Edge
    next_node: Node
    reward: int
    label: OutcomeLabel  # label of the arrival state


@dataclass
class EpisodeRecord:
    instruction: str
    steps: list[Transition] = field(default_factory=list)
    label: OutcomeLabel = OutcomeLabel.INTERIOR
    reason: str = ""

    @property
    def terminated(self) -> bool:
        return self.label.terminal

    @property
    def tau(self) -> int:
        """Decision epoch of first entry into the goal or failure set."""
        return len(self.steps)

    @property
    def edges(self) -> tuple[Edge, ...]:
        return tuple(t.edge for t in self.steps)

    @property
    def final_node(self) -> Node | None:
        return self.steps[-1].next_node if self.steps else None

    def path_key(self) -> str:
        return f"{self.instruction}: " + CONTEXT_SEP.join(e.serialize() for e in self.edges)


def episode_return(ep: EpisodeRecord) -> int:
    if not ep.terminated:
        raise TruncatedEpisodeError("truncated episode")
    return sum(t.reward for t in ep.steps)


def discounted_return(ep: EpisodeRecord, gamma: float) -> float:
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma}")
    if not ep.terminated:
        raise TruncatedEpisodeError("truncated episode")
    if ep.label is not OutcomeLabel.GOAL:
        return 0.0
    return gamma ** (ep.tau - 1)
