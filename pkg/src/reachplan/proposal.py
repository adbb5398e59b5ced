"""Count-based categorical proposal model for edges and successor nodes.

Probabilities are Laplace-smoothed over the admissible edges (or the
scenario-enumerable successors) at query time. Lookups try the exact
condition key first, then the key with objects lifted to their roles, and
finally fall back to uniform.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .scenario import Delta, Scenario
from .smdp import Context, Edge, Node

CONDITIONING = ("node", "node+last-edge", "node+context")
PROPOSAL_FORMAT = "reachplan-proposal/1"


class ProposalError(ValueError):
    pass


def condition_key(node: Node, ctx: Context, conditioning: str, lift: Mapping[str, str] | None = None) -> str:
    if lift:
        node = node.rename(lift)
    head = node.serialize()
    if conditioning == "node":
        return head
    if conditioning == "node+last-edge":
        last = ctx.last_edge
        if last is not None and lift:
            last = last.rename(lift)
        return f"{head} # {last.serialize() if last is not None else ''}"
    if conditioning == "node+context":
        return f"{head} # {(ctx.rename(lift) if lift else ctx).serialize()}"
    raise ProposalError(f"unknown conditioning {conditioning!r}")


def _tables():
    return {"exact": defaultdict(lambda: defaultdict(int)), "lifted": defaultdict(lambda: defaultdict(int))}


@dataclass
class ProposalModel:
    conditioning: str = "node+last-edge"
    alpha: float = 1.0
    edge_counts: dict = field(default_factory=_tables)
    successor_counts: dict = field(default_factory=_tables)
    scenario: Scenario | None = None

    def __post_init__(self):
        if self.conditioning not in CONDITIONING:
            raise ProposalError(f"unknown conditioning {self.conditioning!r}")
        if not self.alpha > 0:
            raise ProposalError("smoothing alpha must be > 0")

    # -- fitting ----------------------------------------------------------
    @classmethod
    def fit(cls, ds, sc: Scenario, conditioning: str = "node+last-edge", alpha: float = 1.0) -> "ProposalModel":
        """Tally edge choices and successor deltas from a dataset."""
        if not len(ds):
            raise ProposalError("cannot fit a proposal model on an empty dataset")
        m = cls(conditioning, alpha, scenario=sc)
        lift = sc.lift_map()
        for s in ds.samples:
            delta = Delta.between(s.node, s.next_node)
            for kind, mp in (("exact", None), ("lifted", lift)):
                key = condition_key(s.node, s.context, conditioning, mp)
                edge = s.edge.rename(mp) if mp else s.edge
                d = delta.rename(mp) if mp else delta
                m.edge_counts[kind][key][edge.serialize()] += 1
                m.successor_counts[kind][f"{key} ! {edge.serialize()}"][d.serialize()] += 1
        return m

    def bind(self, sc: Scenario) -> "ProposalModel":
        """Same counts, queried against another scenario (e.g. an unseen variant)."""
        return ProposalModel(self.conditioning, self.alpha, self.edge_counts, self.successor_counts, sc)

    def _require_scenario(self) -> Scenario:
        if self.scenario is None:
            raise ProposalError("proposal model is not bound to a scenario")
        return self.scenario

    # -- queries ----------------------------------------------------------
    def _lookup(self, table: str, key_exact: str, key_lifted: str, items, lifted_items):
        """Counts for ``items`` from the first key that has data among them."""
        for kind, key, names in (("exact", key_exact, items), ("lifted", key_lifted, lifted_items)):
            row = getattr(self, table)[kind].get(key)
            if row:
                counts = [row.get(n, 0) for n in names]
                if sum(counts):
                    return counts, kind
        return None, "uniform"

    def _smooth(self, counts, n):
        if counts is None:
            return [1.0 / n] * n
        total = sum(counts) + self.alpha * n
        return [(c + self.alpha) / total for c in counts]

    def edge_probs(self, node: Node, ctx: Context) -> dict[Edge, float]:
        sc = self._require_scenario()
        edges = sc.admissible_edges(node, ctx)
        if not edges:
            return {}
        lift = sc.lift_map()
        counts, _ = self._lookup(
            "edge_counts",
            condition_key(node, ctx, self.conditioning),
            condition_key(node, ctx, self.conditioning, lift),
            [e.serialize() for e in edges],
            [e.rename(lift).serialize() for e in edges],
        )
        return dict(zip(edges, self._smooth(counts, len(edges))))

    def propose_topk(self, node: Node, ctx: Context, k: int) -> list[tuple[Edge, float]]:
        """Top-k admissible edges by probability, ties broken lexicographically."""
        if k < 1:
            raise ProposalError("k must be >= 1")
        ranked = sorted(self.edge_probs(node, ctx).items(), key=lambda kv: (-kv[1], kv[0].serialize()))
        return ranked[:k]

    def predict_successor(self, node: Node, ctx: Context, edge: Edge) -> list[tuple[Node, float]]:
        """Smoothed distribution over the scenario-enumerable successors."""
        sc = self._require_scenario()
        cands = sorted({o.delta.apply(node) for o in sc.outcomes(node, ctx, edge)}, key=Node.serialize)
        lift = sc.lift_map()
        deltas = [Delta.between(node, n2) for n2 in cands]
        counts, _ = self._lookup(
            "successor_counts",
            f"{condition_key(node, ctx, self.conditioning)} ! {edge.serialize()}",
            f"{condition_key(node, ctx, self.conditioning, lift)} ! {edge.rename(lift).serialize()}",
            [d.serialize() for d in deltas],
            [d.rename(lift).serialize() for d in deltas],
        )
        return list(zip(cands, self._smooth(counts, len(cands))))

    def greedy(self, node: Node, ctx: Context, edge: Edge) -> tuple[Node, float]:
        dist = self.predict_successor(node, ctx, edge)
        return min(dist, key=lambda kv: (-kv[1], kv[0].serialize()))

    def greedy_successor(self, node: Node, ctx: Context, edge: Edge) -> Node:
        return self.greedy(node, ctx, edge)[0]

    def probs(self, sc: Scenario, node: Node, ctx: Context) -> dict[Edge, float]:
        """Behavior-model view, so a fitted model can stand in for mu_b."""
        model = self if sc is self.scenario else self.bind(sc)
        return model.edge_probs(node, ctx)

    # -- persistence ------------------------------------------------------
    def dumps(self) -> str:
        lines = [f"# {PROPOSAL_FORMAT}", f"config\tconditioning\t{self.conditioning}", f"config\talpha\t{self.alpha!r}"]
        for tag, table in (("edge", self.edge_counts), ("succ", self.successor_counts)):
            for kind in ("exact", "lifted"):
                for key in sorted(table[kind]):
                    row = table[kind][key]
                    for item in sorted(row):
                        lines.append(f"{tag}\t{kind}\t{key}\t{item}\t{row[item]}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, sc: Scenario | None = None) -> "ProposalModel":
        lines = text.splitlines()
        if not lines or lines[0] != f"# {PROPOSAL_FORMAT}":
            raise ProposalError("not a proposal model file")
        cfg, edges, succ = {}, _tables(), _tables()
        for ln in lines[1:]:
            parts = ln.split("\t")
            if parts[0] == "config" and len(parts) == 3:
                cfg[parts[1]] = parts[2]
            elif parts[0] in ("edge", "succ") and len(parts) == 5 and parts[1] in ("exact", "lifted"):
                (edges if parts[0] == "edge" else succ)[parts[1]][parts[2]][parts[3]] = int(parts[4])
            elif ln.strip():
                raise ProposalError(f"malformed proposal line: {ln!r}")
        return cls(cfg.get("conditioning", "node+last-edge"), float(cfg.get("alpha", 1.0)), edges, succ, sc)

    @classmethod
    def load(cls, path: str | Path, sc: Scenario | None = None) -> "ProposalModel":
        return cls.loads(Path(path).read_text(), sc)


class KernelProposal:
    """Proposal with the true kernel: uniform edge scores, exact successors."""

    def __init__(self, sc: Scenario):
        self.scenario = sc

    def edge_probs(self, node: Node, ctx: Context) -> dict[Edge, float]:
        edges = self.scenario.admissible_edges(node, ctx)
        return {e: 1.0 / len(edges) for e in edges}

    def propose_topk(self, node: Node, ctx: Context, k: int) -> list[tuple[Edge, float]]:
        if k < 1:
            raise ProposalError("k must be >= 1")
        return sorted(self.edge_probs(node, ctx).items(), key=lambda kv: (-kv[1], kv[0].serialize()))[:k]

    def predict_successor(self, node: Node, ctx: Context, edge: Edge) -> list[tuple[Node, float]]:
        dist = dict(self.scenario.kernel(node, ctx, edge))
        for o in self.scenario.outcomes(node, ctx, edge):
            dist.setdefault(o.delta.apply(node), 0.0)
        return sorted(dist.items(), key=lambda kv: kv[0].serialize())

    def greedy(self, node: Node, ctx: Context, edge: Edge) -> tuple[Node, float]:
        return min(self.predict_successor(node, ctx, edge), key=lambda kv: (-kv[1], kv[0].serialize()))

    def greedy_successor(self, node: Node, ctx: Context, edge: Edge) -> Node:
        return self.greedy(node, ctx, edge)[0]
