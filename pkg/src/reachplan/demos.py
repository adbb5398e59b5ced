"""Mixed-quality demonstration datasets rolled out from behavior policies."""

from __future__ import annotations

import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scenario import Scenario
from .smdp import (
    EMPTY_CONTEXT,
    Context,
    Edge,
    EpisodeRecord,
    Node,
    OutcomeLabel,
    Transition,
    context_update,
    entrance_reward,
)

DATASET_FORMAT = "reachplan-dataset/1"
POLICY_KINDS = ("uniform", "path-balanced", "weighted")


class DatasetError(ValueError):
    pass


def episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    """Independent stream per episode so rollouts can run in any order."""
    return np.random.default_rng([int(seed), int(episode_id)])


@dataclass(frozen=True)
class PathSpec:
    instruction: str
    edges: tuple[Edge, ...]
    count: int = 1


@dataclass
class BehaviorPolicy:
    """mu_b(e | n, z): uniform, path-balanced, or pattern-weighted.

    Path-balanced policies follow one scripted path per episode; once the
    script runs out or stops being admissible they fall back to uniform.
    """

    kind: str = "uniform"
    paths: tuple[PathSpec, ...] = ()
    weights: Mapping[str, float] = field(default_factory=dict)
    default_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown behavior policy kind {self.kind!r}")
        if self.kind == "path-balanced" and not self.paths:
            raise ValueError("path-balanced policy needs at least one path")

    @classmethod
    def from_config(cls, cfg: Mapping | None) -> "BehaviorPolicy":
        cfg = dict(cfg or {})
        kind = cfg.get("kind", "uniform")
        paths = tuple(
            PathSpec(p["instruction"], tuple(Edge.parse(e) for e in p["path"]), int(p.get("count", 1)))
            for p in cfg.get("paths", ())
        )
        return cls(kind, paths, dict(cfg.get("weights", {})), float(cfg.get("default_weight", 1.0)))

    def describe(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.paths:
            out["paths"] = [
                {"instruction": p.instruction, "path": [e.serialize() for e in p.edges], "count": p.count}
                for p in self.paths
            ]
        if self.weights:
            out["weights"] = dict(self.weights)
            out["default_weight"] = self.default_weight
        return out

    def validate(self, sc: Scenario) -> None:
        from .oracle import plan_success_prob

        for p in self.paths:
            plan_success_prob(sc, p.edges, p.instruction)  # raises on inadmissible paths

    def _weight(self, edge: Edge) -> float:
        text = edge.serialize()
        for pattern, w in self.weights.items():
            if fnmatchcase(text, pattern):
                return float(w)
        return self.default_weight

    def _base_probs(self, sc: Scenario, node: Node, ctx: Context) -> dict[Edge, float]:
        edges = sc.admissible_edges(node, ctx)
        if not edges:
            return {}
        if self.kind == "weighted":
            raw = {e: self._weight(e) for e in edges}
            total = sum(raw.values())
            if total > 0:
                return {e: w / total for e, w in raw.items()}
        return {e: 1.0 / len(edges) for e in edges}

    def probs(self, sc: Scenario, node: Node, ctx: Context) -> dict[Edge, float]:
        """Marginal mu_b at (node, ctx); path-balanced mixes the consistent scripts."""
        if self.kind != "path-balanced":
            return self._base_probs(sc, node, ctx)
        admissible = set(sc.admissible_edges(node, ctx))
        if not admissible:
            return {}
        done = ctx.edges
        mix: dict[Edge, float] = defaultdict(float)
        total = 0
        for p in self.paths:
            if p.instruction != node.instruction or p.edges[: len(done)] != done:
                continue
            total += p.count
            nxt = p.edges[len(done)] if len(p.edges) > len(done) else None
            if nxt in admissible:
                mix[nxt] += p.count
            else:
                for e in admissible:
                    mix[e] += p.count / len(admissible)
        if total == 0:
            return self._base_probs(sc, node, ctx)
        return {e: mix[e] / total for e in sorted(mix, key=Edge.serialize)}

    def sample(self, sc: Scenario, node: Node, ctx: Context, rng: np.random.Generator, script=None) -> Edge:
        if script is not None:
            k = ctx.depth
            if k < len(script) and script[k] in sc.admissible_edges(node, ctx):
                return script[k]
        dist = self._base_probs(sc, node, ctx)
        u = rng.random()
        acc = 0.0
        for edge, p in dist.items():
            acc += p
            if u < acc:
                return edge
        return edge

    def schedule(self, n_episodes: int) -> list[PathSpec]:
        """Round-robin over paths, each repeated ``count`` times per cycle."""
        cycle = [p for p in self.paths for _ in range(p.count)]
        return [cycle[i % len(cycle)] for i in range(n_episodes)]


def rollout(
    sc: Scenario,
    policy: BehaviorPolicy,
    instruction: str | None,
    rng: np.random.Generator,
    script: Sequence[Edge] | None = None,
) -> EpisodeRecord:
    """Run one episode until the goal set, the failure set, or the horizon."""
    node = sc.initial_node(instruction)
    ctx = EMPTY_CONTEXT
    ep = EpisodeRecord(node.instruction)
    while True:
        label = sc.label(node, ctx)
        if label.terminal:
            ep.label = label
            ep.reason = _reason(sc, node, ctx, label)
            return ep
        edge = policy.sample(sc, node, ctx, rng, script)
        nxt, _, _ = sc.step_option(node, ctx, edge, rng)
        nctx = context_update(ctx, edge, node)
        arrived = sc.label(nxt, nctx)
        ep.steps.append(Transition(node, ctx, edge, nxt, entrance_reward(arrived), arrived))
        node, ctx = nxt, nctx


def _reason(sc: Scenario, node: Node, ctx: Context, label: OutcomeLabel) -> str:
    predicate = sc.classify(node)
    if predicate is OutcomeLabel.GOAL:
        return "goal"
    if predicate is OutcomeLabel.FAIL:
        return "fail"
    if sc.horizon is not None and ctx.depth >= sc.horizon:
        return "horizon"
    return "dead-end"


@dataclass(frozen=True)
class Sys2Sample:
    node: Node
    context: Context
    edge: Edge
    next_node: Node
    reward: int
    term: int
    episode_id: int
    episode_outcome: OutcomeLabel

    @property
    def next_context(self) -> Context:
        return context_update(self.context, self.edge, self.node)

    def to_record(self) -> dict:
        return {
            "episode": self.episode_id,
            "node": self.node.serialize(),
            "context": self.context.serialize(),
            "edge": self.edge.serialize(),
            "next": self.next_node.serialize(),
            "r": self.reward,
            "term": self.term,
            "outcome": self.episode_outcome.value,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "Sys2Sample":
        return cls(
            Node.parse(rec["node"]),
            Context.parse(rec["context"]),
            Edge.parse(rec["edge"]),
            Node.parse(rec["next"]),
            int(rec["r"]),
            int(rec["term"]),
            int(rec["episode"]),
            OutcomeLabel(rec["outcome"]),
        )


def segment(ep: EpisodeRecord, episode_id: int = 0) -> list[Sys2Sample]:
    """One sample per executed edge; only the last one is terminal."""
    if not ep.terminated:
        raise DatasetError("cannot segment a truncated episode")
    n = len(ep.steps)
    return [
        Sys2Sample(t.node, t.context, t.edge, t.next_node, t.reward, int(i == n - 1), episode_id, ep.label)
        for i, t in enumerate(ep.steps)
    ]


@dataclass
class Dataset:
    scenario: str
    samples: list[Sys2Sample]
    episodes: list[EpisodeRecord]
    seed: int
    policy: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def header(self) -> dict:
        return {
            "format": DATASET_FORMAT,
            "scenario": self.scenario,
            "seed": self.seed,
            "policy": self.policy,
            "n_episodes": len(self.episodes),
            "n_samples": len(self.samples),
        }

    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write(json.dumps(self.header(), sort_keys=True) + "\n")
        for s in self.samples:
            buf.write(json.dumps(s.to_record(), sort_keys=True) + "\n")
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "Dataset":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise DatasetError("empty dataset file")
        try:
            head = json.loads(lines[0])
            if head.get("format") != DATASET_FORMAT:
                raise DatasetError(f"unsupported dataset format {head.get('format')!r}")
            samples = [Sys2Sample.from_record(json.loads(ln)) for ln in lines[1:]]
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            if isinstance(exc, DatasetError):
                raise
            raise DatasetError(f"malformed dataset file: {exc}") from None
        return cls(head["scenario"], samples, _episodes_from(samples), int(head["seed"]), head.get("policy", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.loads(Path(path).read_text())

    def filter_outcome(self, label: OutcomeLabel) -> "Dataset":
        keep = [i for i, ep in enumerate(self.episodes) if ep.label is label]
        ids = set(keep)
        return Dataset(
            self.scenario,
            [s for s in self.samples if s.episode_id in ids],
            [self.episodes[i] for i in keep],
            self.seed,
            {**self.policy, "filter": label.value},
        )


def _episodes_from(samples: Sequence[Sys2Sample]) -> list[EpisodeRecord]:
    by_id: dict[int, list[Sys2Sample]] = defaultdict(list)
    for s in samples:
        by_id[s.episode_id].append(s)
    out = []
    for eid in sorted(by_id):
        ss = by_id[eid]
        steps = [
            Transition(s.node, s.context, s.edge, s.next_node, s.reward,
                       s.episode_outcome if s.term else OutcomeLabel.INTERIOR)
            for s in ss
        ]
        out.append(EpisodeRecord(ss[0].node.instruction, steps, ss[-1].episode_outcome))
    return out


def build_dataset(
    sc: Scenario,
    policy: BehaviorPolicy,
    n_episodes: int,
    instructions: Sequence[str] | Mapping[str, float] | None = None,
    seed: int = 0,
) -> Dataset:
    """Roll out ``n_episodes`` episodes, keeping successes and failures alike."""
    if n_episodes < 1:
        raise DatasetError("n_episodes must be >= 1")
    names, probs = _instruction_mix(sc, instructions)
    scripts = policy.schedule(n_episodes) if policy.kind == "path-balanced" else None
    samples: list[Sys2Sample] = []
    episodes: list[EpisodeRecord] = []
    for i in range(n_episodes):
        rng = episode_rng(seed, i)
        if scripts is not None:
            ins, script = scripts[i].instruction, scripts[i].edges
        else:
            ins, script = names[int(rng.choice(len(names), p=probs))], None
        ep = rollout(sc, policy, ins, rng, script)
        episodes.append(ep)
        samples.extend(segment(ep, i))
    return Dataset(sc.full_name, samples, episodes, seed, policy.describe())


def _instruction_mix(sc: Scenario, instructions) -> tuple[list[str], np.ndarray]:
    if instructions is None:
        names = list(sc.instruction_names)
        return names, np.full(len(names), 1.0 / len(names))
    if isinstance(instructions, Mapping):
        names = list(instructions)
        w = np.array([float(instructions[n]) for n in names])
    else:
        names = list(instructions)
        w = np.ones(len(names))
    for n in names:
        sc.instruction(n)
    return names, w / w.sum()


@dataclass(frozen=True)
class PathStat:
    path: str
    trials: int
    successes: int

    @property
    def p_hat(self) -> float:
        return self.successes / self.trials if self.trials else 0.0


def dataset_stats(ds: Dataset | Iterable[EpisodeRecord]) -> list[PathStat]:
    """Per-path trials, successes and empirical success rate, sorted by path."""
    episodes = ds.episodes if isinstance(ds, Dataset) else list(ds)
    trials: dict[str, int] = defaultdict(int)
    wins: dict[str, int] = defaultdict(int)
    for ep in episodes:
        key = ep.path_key()
        trials[key] += 1
        wins[key] += int(ep.label is OutcomeLabel.GOAL)
    return [PathStat(k, trials[k], wins[k]) for k in sorted(trials)]
