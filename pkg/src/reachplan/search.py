"""Batched value-guided tree search, plus fixed-order DFS and greedy chain baselines.

Children are created from the proposal model's greedy successor; the true
kernel is never sampled during search. The scenario is used only to label
predicted nodes (goal / failure / interior).

Final plan selection scores every leaf by ``P_path * Q(leaf)``, where
``P_path`` multiplies the predicted probabilities of the greedy successors
along the branch. Ties go to higher Q, then higher S, then the
lexicographically smaller path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

from .smdp import EMPTY_CONTEXT, Context, Edge, Node, OutcomeLabel, context_update

SCORINGS = ("value", "path-prob")


class SearchError(ValueError):
    pass


class NoPlanError(SearchError):
    pass


@dataclass
class SearchConfig:
    B: int = 4
    k: int = 3
    keep: int | None = None
    alpha: float = 0.5
    M: int = 20
    depth_cap: int | None = None
    scoring: str = "value"

    def __post_init__(self):
        if self.keep is None:
            self.keep = self.k
        if self.B < 1 or self.k < 1 or self.M < 1:
            raise ValueError("B, k and M must be >= 1")
        if not 1 <= self.keep <= self.k:
            raise ValueError("keep must lie in [1, k]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.scoring not in SCORINGS:
            raise ValueError(f"scoring must be one of {SCORINGS}")


@dataclass(eq=False)
class SearchNode:
    id: int
    node: Node
    context: Context
    label: OutcomeLabel
    parent: "SearchNode | None" = None
    edge: Edge | None = None
    prior: float = 1.0  # proposal probability of the incoming edge
    succ_prob: float = 1.0  # predicted probability of this greedy successor
    score: float = 0.0  # S at creation time
    v: float | None = None  # leaf value cache
    N: int = 0
    W: float = 0.0
    children: list["SearchNode"] = field(default_factory=list)
    created_at: int = 0  # expansion counter when the node was created

    @property
    def Q(self) -> float:
        return self.W / self.N if self.N else 0.0

    @property
    def depth(self) -> int:
        return self.context.depth

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def path(self) -> list["SearchNode"]:
        out, cur = [], self
        while cur is not None:
            out.append(cur)
            cur = cur.parent
        return out[::-1]

    def path_prob(self) -> float:
        p = 1.0
        for n in self.path()[1:]:
            p *= n.succ_prob
        return p

    def path_text(self) -> str:
        return " -> ".join(n.edge.serialize() for n in self.path()[1:])


@dataclass
class Plan:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    label: OutcomeLabel
    leaf: SearchNode | None = None
    score: float = 0.0
    found_at: int = 0  # expansions spent when the leaf was created
    diagnostic: str = ""

    def __len__(self) -> int:
        return len(self.edges)

    def serialize(self) -> str:
        lines = [f"node\t{self.nodes[0].serialize()}"]
        for e, n in zip(self.edges, self.nodes[1:]):
            lines += [f"edge\t{e.serialize()}", f"node\t{n.serialize()}"]
        lines.append(f"label\t{self.label.value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> "Plan":
        nodes, edges, label = [], [], OutcomeLabel.INTERIOR
        for ln in text.splitlines():
            tag, _, body = ln.partition("\t")
            if tag == "node":
                nodes.append(Node.parse(body))
            elif tag == "edge":
                edges.append(Edge.parse(body))
            elif tag == "label":
                label = OutcomeLabel(body)
        if not nodes or len(nodes) != len(edges) + 1:
            raise SearchError("malformed plan text")
        return cls(tuple(nodes), tuple(edges), label)

    def describe(self) -> str:
        return " -> ".join(e.serialize() for e in self.edges)


class SearchTree:
    def __init__(self, root: SearchNode, config: SearchConfig | None = None):
        self.root = root
        self.nodes: list[SearchNode] = [root]
        self.config = config
        self.expansions = 0

    def add_child(self, parent: SearchNode, edge: Edge, node: Node, label: OutcomeLabel,
                  prior: float, succ_prob: float, score: float) -> SearchNode:
        self.expansions += 1
        child = SearchNode(len(self.nodes), node, context_update(parent.context, edge, parent.node), label,
                           parent, edge, prior, succ_prob, score, created_at=self.expansions)
        parent.children.append(child)
        self.nodes.append(child)
        return child

    def leaves(self) -> list[SearchNode]:
        return [n for n in self.nodes if n.is_leaf and n is not self.root]

    def frontier(self, depth_cap: int | None = None) -> list[SearchNode]:
        return [
            n for n in self.nodes
            if n.is_leaf and not n.label.terminal and (depth_cap is None or n.depth < depth_cap)
        ]

    def best_leaf(self, within: SearchNode | None = None) -> SearchNode | None:
        """Best leaf by path probability times Q, optionally inside one subtree."""
        pool = self.leaves()
        if within is not None:
            pool = [n for n in pool if within in n.path()]
        if not pool:
            return None
        return min(pool, key=lambda n: (-n.path_prob() * n.Q, -n.Q, -n.score, n.path_text()))

    def plan_to(self, leaf: SearchNode, diagnostic: str = "") -> Plan:
        path = leaf.path()
        return Plan(
            tuple(n.node for n in path),
            tuple(n.edge for n in path[1:]),
            leaf.label,
            leaf,
            leaf.path_prob() * leaf.Q,
            leaf.created_at,
            diagnostic,
        )

    def dump(self) -> str:
        return tree_dump(self)


def backup(leaf: SearchNode, v: float) -> None:
    """Add ``v`` to every node on the root-to-leaf path, the leaf included."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"backed-up value must lie in [0, 1], got {v}")
    cur = leaf
    while cur is not None:
        cur.W += v
        cur.N += 1
        cur = cur.parent


def _labeler(proposal, labeler):
    sc = labeler if labeler is not None else getattr(proposal, "scenario", None)
    if sc is None:
        raise SearchError("search needs a scenario to label predicted nodes")
    return sc


def _evaluate(child: SearchNode, value, scoring: str) -> float:
    """Leaf value: boundary values on predicted terminals, else the model.

    The path-prob scoring replaces the learned value by the product of
    proposal probabilities along the branch (zero on predicted failure).
    """
    if child.label is OutcomeLabel.FAIL:
        v = 0.0
    elif scoring == "path-prob":
        v = 1.0
        for n in child.path()[1:]:
            v *= n.prior
    elif child.label is OutcomeLabel.GOAL:
        v = 1.0
    else:
        v = float(value.value(child.node, child.context))
    child.v = min(1.0, max(0.0, v))
    return child.v


def _rank_key(n: SearchNode):
    return (-n.Q, -n.score, n.path_text())


def search(
    root: Node,
    proposal,
    value,
    cfg: SearchConfig | None = None,
    root_context: Context = EMPTY_CONTEXT,
    labeler=None,
) -> tuple[SearchTree, Plan]:
    """Batched tree search: select top-B frontier leaves, propose, keep, evaluate, back up."""
    cfg = cfg or SearchConfig()
    sc = _labeler(proposal, labeler)
    root_label = sc.label(root, root_context)
    if root_label.terminal:
        raise SearchError(f"root is terminal ({root_label.value})")
    tree = SearchTree(SearchNode(0, root, root_context, root_label), cfg)
    depth_cap = None if cfg.depth_cap is None else root_context.depth + cfg.depth_cap
    for _ in range(cfg.M):
        frontier = tree.frontier(depth_cap)
        if not frontier:
            break
        for parent in sorted(frontier, key=_rank_key)[: cfg.B]:
            expand(tree, parent, proposal, value, cfg, sc)
    best = tree.best_leaf()
    if best is None:
        raise NoPlanError("search produced no leaves")
    return tree, tree.plan_to(best)


def expand(tree: SearchTree, parent: SearchNode, proposal, value, cfg: SearchConfig, sc) -> list[SearchNode]:
    """Propose k fresh edges at ``parent``, keep the top ``keep`` by S, add greedy children."""
    done = {c.edge for c in parent.children}
    ranked = proposal.propose_topk(parent.node, parent.context, cfg.k + len(done))
    fresh = [(e, p) for e, p in ranked if e not in done][: cfg.k]
    scored = [(cfg.alpha * parent.Q + (1.0 - cfg.alpha) * p, e, p) for e, p in fresh]
    scored.sort(key=lambda t: (-t[0], t[1].serialize()))
    made = []
    for s, edge, prior in scored[: cfg.keep]:
        nxt, sp = proposal.greedy(parent.node, parent.context, edge)
        nctx = context_update(parent.context, edge, parent.node)
        child = tree.add_child(parent, edge, nxt, sc.label(nxt, nctx), prior, sp, s)
        backup(child, _evaluate(child, value, cfg.scoring))
        made.append(child)
    return made


def dfs_search(
    root: Node,
    proposal,
    value,
    depth_cap: int,
    root_context: Context = EMPTY_CONTEXT,
    labeler=None,
) -> tuple[SearchTree, Plan]:
    """Fixed-order DFS: expand every admissible edge in lexicographic order."""
    if depth_cap < 1:
        raise NoPlanError("depth_cap must be >= 1")
    sc = _labeler(proposal, labeler)
    root_label = sc.label(root, root_context)
    if root_label.terminal:
        raise SearchError(f"root is terminal ({root_label.value})")
    tree = SearchTree(SearchNode(0, root, root_context, root_label))
    limit = root_context.depth + depth_cap

    def visit(parent: SearchNode) -> None:
        if parent.label.terminal or parent.depth >= limit:
            return
        edges = sorted(proposal.edge_probs(parent.node, parent.context).items(), key=lambda kv: kv[0].serialize())
        for edge, prior in edges:
            nxt, sp = proposal.greedy(parent.node, parent.context, edge)
            nctx = context_update(parent.context, edge, parent.node)
            child = tree.add_child(parent, edge, nxt, sc.label(nxt, nctx), prior, sp, prior)
            backup(child, _evaluate(child, value, "value"))
            visit(child)

    visit(tree.root)
    best = tree.best_leaf()
    if best is None:
        raise NoPlanError("no admissible edges at the root")
    return tree, tree.plan_to(best)


def chain_rollout(
    root: Node,
    proposal,
    depth_cap: int,
    root_context: Context = EMPTY_CONTEXT,
    labeler=None,
) -> Plan:
    """Greedy single path: top-1 edge and greedy successor until terminal or the cap."""
    sc = _labeler(proposal, labeler)
    if sc.label(root, root_context).terminal:
        raise SearchError("root is terminal")
    tree = SearchTree(SearchNode(0, root, root_context, sc.label(root, root_context)))
    cur = tree.root
    diagnostic = ""
    while not cur.label.terminal:
        if cur.depth - root_context.depth >= depth_cap:
            diagnostic = "depth cap reached"
            break
        top = proposal.propose_topk(cur.node, cur.context, 1)
        if not top:
            diagnostic = "dead end"
            break
        edge, prior = top[0]
        nxt, sp = proposal.greedy(cur.node, cur.context, edge)
        nctx = context_update(cur.context, edge, cur.node)
        cur = tree.add_child(cur, edge, nxt, sc.label(nxt, nctx), prior, sp, prior)
        backup(cur, 1.0 if cur.label is OutcomeLabel.GOAL else 0.0)
    if cur is tree.root:
        raise NoPlanError(diagnostic or "no plan")
    return tree.plan_to(cur, diagnostic)


# ---------------------------------------------------------------------------
# tree codec: one JSON record per node in creation order


def tree_dump(tree: SearchTree) -> str:
    out = []
    for n in tree.nodes:
        rec = {
            "id": n.id,
            "parent": n.parent.id if n.parent is not None else None,
            "edge": n.edge.serialize() if n.edge is not None else None,
            "node": n.node.serialize(),
            "label": n.label.value,
            "N": n.N,
            "W": n.W,
            "Q": n.Q,
            "v": n.v,
            "prior": n.prior,
            "succ_prob": n.succ_prob,
            "score": n.score,
            "created_at": n.created_at,
        }
        if n.parent is None:
            rec["context"] = n.context.serialize()
            rec["expansions"] = tree.expansions
        out.append(json.dumps(rec, sort_keys=True))
    return "\n".join(out) + "\n"


def tree_parse(text: str) -> SearchTree:
    records = [json.loads(ln) for ln in text.splitlines() if ln.strip()]
    if not records or records[0]["parent"] is not None:
        raise SearchError("tree dump must start with the root record")
    by_id: dict[int, SearchNode] = {}
    tree = None
    for r in records:
        parent = by_id.get(r["parent"]) if r["parent"] is not None else None
        if r["parent"] is not None and parent is None:
            raise SearchError(f"record {r['id']} references unknown parent {r['parent']}")
        edge = Edge.parse(r["edge"]) if r["edge"] else None
        ctx = Context.parse(r["context"]) if parent is None else context_update(parent.context, edge, parent.node)
        n = SearchNode(r["id"], Node.parse(r["node"]), ctx, OutcomeLabel(r["label"]), parent, edge,
                       r["prior"], r["succ_prob"], r["score"], r["v"], r["N"], r["W"], [], r["created_at"])
        by_id[n.id] = n
        if parent is None:
            tree = SearchTree(n)
            tree.expansions = r.get("expansions", 0)
        else:
            parent.children.append(n)
            tree.nodes.append(n)
    return tree


def iter_alternatives(tree: SearchTree, node: Node) -> Iterable[SearchNode]:
    """Tree nodes whose symbolic node equals ``node`` (replanning anchors)."""
    return (n for n in tree.nodes if n.node == node)
