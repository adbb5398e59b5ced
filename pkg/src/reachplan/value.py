"""Reach-avoid value learning with expectile TD regression and an EMA target.

Residuals are ``u = y - V`` throughout; ``tau_e > 0.5`` weights positive
residuals more (optimistic), ``tau_e < 0.5`` weights negative ones more.
Goal and failure states are pinned to 1 and 0 and never learned.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .scenario import HorizonError, Scenario
from .smdp import EMPTY_CONTEXT, Context, Node, OutcomeLabel, context_update, state_key

VALUE_FORMAT = "reachplan-value/1"
KINDS = ("tabular", "linear")
PESSIMISTIC_TAU = 0.3


class TrainingError(RuntimeError):
    pass


class ConvergenceError(RuntimeError):
    pass


def expectile_weight(u: float, tau_e: float) -> float:
    _check_tau(tau_e)
    return tau_e if u >= 0 else 1.0 - tau_e


def expectile_loss(u: float, tau_e: float) -> float:
    return expectile_weight(u, tau_e) * u * u


def _check_tau(tau_e: float) -> None:
    if not 0.0 < tau_e < 1.0:
        raise ValueError(f"tau_e must lie in (0, 1), got {tau_e}")


@dataclass
class TrainConfig:
    kind: str = "tabular"
    gamma: float = 1.0
    tau_e: float = 0.7
    lr: float = 1.0  # tabular: blend toward the per-key fit; linear: SGD step
    ema: float = 0.9
    epochs: int = 300
    batch_size: int = 256
    seed: int = 0
    default_value: float = 0.0  # unseen keys are scored conservatively

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        _check_tau(self.tau_e)
        if not 0.0 < self.ema < 1.0:
            raise ValueError("ema must lie in (0, 1)")
        if self.epochs < 1 or self.lr <= 0:
            raise ValueError("epochs must be >= 1 and lr > 0")

    @classmethod
    def pessimistic(cls, **kw) -> "TrainConfig":
        return cls(tau_e=PESSIMISTIC_TAU, **kw)


def _lift_key(node: Node, ctx: Context, lift: Mapping[str, str]) -> str:
    return state_key(node.rename(lift), ctx.rename(lift))


class _Boundary:
    """Analytic values on terminal states when a scenario is bound."""

    scenario: Scenario | None

    def _boundary(self, node: Node, ctx: Context) -> float | None:
        if self.scenario is None:
            return None
        lab = self.scenario.label(node, ctx)
        if lab is OutcomeLabel.GOAL:
            return 1.0
        if lab is OutcomeLabel.FAIL:
            return 0.0
        return None


@dataclass
class TabularValue(_Boundary):
    table: dict[str, float] = field(default_factory=dict)
    lifted: dict[str, float] = field(default_factory=dict)
    visits: dict[str, int] = field(default_factory=dict)
    default_value: float = 0.0
    scenario: Scenario | None = None
    config: dict = field(default_factory=dict)
    kind = "tabular"

    def bind(self, sc: Scenario) -> "TabularValue":
        return TabularValue(self.table, self.lifted, self.visits, self.default_value, sc, self.config)

    def raw(self, node: Node, ctx: Context) -> float:
        v = self.table.get(state_key(node, ctx))
        if v is None and self.scenario is not None and self.lifted:
            v = self.lifted.get(_lift_key(node, ctx, self.scenario.lift_map()))
        return self.default_value if v is None else v

    def value(self, node: Node, ctx: Context = EMPTY_CONTEXT) -> float:
        b = self._boundary(node, ctx)
        if b is not None:
            return b
        return min(1.0, max(0.0, self.raw(node, ctx)))

    def dumps(self) -> str:
        lines = [f"# {VALUE_FORMAT}", "config\tkind\ttabular", f"config\tdefault\t{self.default_value!r}"]
        lines.append(f"config\ttrain\t{json.dumps(self.config, sort_keys=True)}")
        lines += [f"exact\t{k}\t{self.table[k]!r}\t{self.visits.get(k, 0)}" for k in sorted(self.table)]
        lines += [f"lifted\t{k}\t{self.lifted[k]!r}" for k in sorted(self.lifted)]
        return "\n".join(lines) + "\n"


class FeatureMap:
    """phi(n, z) = indicators for facts, gripper, instruction and last edge, plus depth and bias.

    Objects are lifted to their roles before lookup so renamed distractors
    share features. Unknown tokens contribute nothing.
    """

    def __init__(self, vocab: Sequence[str], lift: Mapping[str, str] | None = None):
        self.vocab = list(vocab)
        self.index = {t: i for i, t in enumerate(self.vocab)}
        self.lift = dict(lift or {})

    @property
    def dim(self) -> int:
        return len(self.vocab) + 2

    def tokens(self, node: Node, ctx: Context, lift: Mapping[str, str] | None = None) -> list[str]:
        lift = self.lift if lift is None else lift
        n = node.rename(lift) if lift else node
        toks = [f"fact:{f}" for f in n.facts] + [f"grip:{n.gripper}", f"ins:{n.instruction}"]
        last = ctx.last_edge
        toks.append(f"last:{last.rename(lift).serialize() if last is not None else '-'}")
        return toks

    @classmethod
    def build(cls, states, lift) -> "FeatureMap":
        fm = cls([], lift)
        vocab = sorted({t for n, z in states for t in fm.tokens(n, z)})
        return cls(vocab, lift)

    def __call__(self, node: Node, ctx: Context, lift: Mapping[str, str] | None = None) -> np.ndarray:
        x = np.zeros(self.dim)
        for t in self.tokens(node, ctx, lift):
            i = self.index.get(t)
            if i is not None:
                x[i] = 1.0
        x[-2] = ctx.depth
        x[-1] = 1.0
        return x


@dataclass
class LinearValue(_Boundary):
    features: FeatureMap
    weights: np.ndarray
    scenario: Scenario | None = None
    config: dict = field(default_factory=dict)
    kind = "linear"

    def bind(self, sc: Scenario) -> "LinearValue":
        return LinearValue(self.features, self.weights, sc, self.config)

    def raw(self, node: Node, ctx: Context) -> float:
        lift = self.scenario.lift_map() if self.scenario is not None else None
        return float(self.features(node, ctx, lift) @ self.weights)

    def value(self, node: Node, ctx: Context = EMPTY_CONTEXT) -> float:
        b = self._boundary(node, ctx)
        if b is not None:
            return b
        return min(1.0, max(0.0, self.raw(node, ctx)))

    @staticmethod
    def loss_and_grad(X: np.ndarray, y: np.ndarray, w: np.ndarray, tau_e: float):
        """Mean expectile loss of ``y - X w`` and its analytic gradient."""
        return kernels.expectile_loss_grad(X, y, w, tau_e)

    def dumps(self) -> str:
        lines = [f"# {VALUE_FORMAT}", "config\tkind\tlinear"]
        lines.append(f"config\tlift\t{json.dumps(self.features.lift, sort_keys=True)}")
        lines.append(f"config\ttrain\t{json.dumps(self.config, sort_keys=True)}")
        lines += [f"weight\t{t}\t{float(w)!r}" for t, w in zip(self.features.vocab, self.weights[:-2])]
        lines.append(f"weight\t@depth\t{float(self.weights[-2])!r}")
        lines.append(f"weight\t@bias\t{float(self.weights[-1])!r}")
        return "\n".join(lines) + "\n"


ValueModel = TabularValue | LinearValue


def td_target(sample, target, gamma: float) -> float:
    """y = r + gamma (1 - term) V_target(next state)."""
    if sample.term:
        return float(sample.reward)
    return gamma * target.raw(sample.next_node, sample.next_context)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: ValueModel
    losses: list[dict]

    def loss_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.losses)


def _guard(loss: float, epoch: int) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"training diverged at epoch {epoch}: loss={loss}")


def train(ds, cfg: TrainConfig, sc: Scenario | None = None) -> TrainResult:
    """Offline expectile TD on a fixed dataset (successes and failures)."""
    if not len(ds):
        raise TrainingError("cannot train on an empty dataset")
    lift = sc.lift_map() if sc is not None else {}
    if cfg.kind == "tabular":
        return _train_tabular(ds, cfg, lift, sc)
    return _train_linear(ds, cfg, lift, sc)


def _train_tabular(ds, cfg: TrainConfig, lift, sc) -> TrainResult:
    samples = ds.samples
    keys = [state_key(s.node, s.context) for s in samples]
    index = {k: i for i, k in enumerate(dict.fromkeys(keys))}
    group = np.array([index[k] for k in keys], dtype=np.int64)
    n_keys = len(index)
    reward = np.array([s.reward for s in samples], dtype=float)
    live = np.array([not s.term for s in samples])
    nxt = np.zeros(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        if live[i]:
            k = state_key(s.next_node, s.next_context)
            if k not in index:
                raise TrainingError(f"non-terminal successor {k!r} has no samples of its own")
            nxt[i] = index[k]
    ones = np.ones(len(samples))
    theta = np.full(n_keys, cfg.default_value)
    target = theta.copy()
    losses = []
    for epoch in range(cfg.epochs):
        y = np.where(live, cfg.gamma * target[nxt], reward)
        u = y - theta[group]
        loss = float(np.mean(kernels.expectile_weights(u, cfg.tau_e) * u * u))
        _guard(loss, epoch)
        fit = kernels.grouped_expectile(y, ones, group, n_keys, cfg.tau_e)
        theta = (1.0 - cfg.lr) * theta + cfg.lr * fit
        target = cfg.ema * target + (1.0 - cfg.ema) * theta
        losses.append({"epoch": epoch, "loss": loss, "kind": "tabular"})
    visits = np.bincount(group, minlength=n_keys)
    table = {k: float(theta[i]) for k, i in index.items()}
    lifted = {}
    if lift:
        # lifted keys regress on the same final targets, pooled across renamings
        y = np.where(live, cfg.gamma * target[nxt], reward)
        lkeys = [_lift_key(s.node, s.context, lift) for s in samples]
        lindex = {k: i for i, k in enumerate(dict.fromkeys(lkeys))}
        lgroup = np.array([lindex[k] for k in lkeys], dtype=np.int64)
        lfit = kernels.grouped_expectile(y, ones, lgroup, len(lindex), cfg.tau_e)
        lifted = {k: float(lfit[i]) for k, i in lindex.items()}
    model = TabularValue(
        table, lifted, {k: int(visits[i]) for k, i in index.items()}, cfg.default_value, sc, asdict(cfg)
    )
    return TrainResult(model, losses)


def _train_linear(ds, cfg: TrainConfig, lift, sc) -> TrainResult:
    samples = ds.samples
    states = [(s.node, s.context) for s in samples] + [(s.next_node, s.next_context) for s in samples]
    fm = FeatureMap.build(states, lift)
    X = np.stack([fm(s.node, s.context) for s in samples])
    Xn = np.stack([fm(s.next_node, s.next_context) for s in samples])
    reward = np.array([s.reward for s in samples], dtype=float)
    live = np.array([not s.term for s in samples])
    rng = np.random.default_rng(cfg.seed)
    w = np.zeros(fm.dim)
    w_target = w.copy()
    losses = []
    n = len(samples)
    for epoch in range(cfg.epochs):
        y_all = np.where(live, cfg.gamma * (Xn @ w_target), reward)
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = kernels.expectile_loss_grad(X[idx], y_all[idx], w, cfg.tau_e)
            w = w - cfg.lr * grad
        loss, _ = kernels.expectile_loss_grad(X, y_all, w, cfg.tau_e)
        _guard(loss, epoch)
        if not np.all(np.isfinite(w)):
            raise TrainingError(f"training diverged at epoch {epoch}: non-finite weights")
        w_target = cfg.ema * w_target + (1.0 - cfg.ema) * w
        losses.append({"epoch": epoch, "loss": float(loss), "kind": "linear"})
    return TrainResult(LinearValue(fm, w, sc, asdict(cfg)), losses)


# ---------------------------------------------------------------------------
# exact-kernel fixed point


@dataclass
class VIResult:
    values: dict[str, float]
    iterations: int
    residual: float


def reachable_states(sc: Scenario, instructions: Sequence[str] | None = None):
    """Breadth-first (node, context) states under the horizon cap, with labels."""
    if sc.horizon is None:
        raise HorizonError(f"scenario {sc.name} has no horizon cap")
    order: list[tuple[Node, Context]] = []
    seen: set[str] = set()
    queue = deque()
    for name in instructions or sc.instruction_names:
        root = (sc.initial_node(name), EMPTY_CONTEXT)
        queue.append(root)
        seen.add(state_key(*root))
    while queue:
        n, z = queue.popleft()
        order.append((n, z))
        for e in sc.admissible_edges(n, z):
            nz = context_update(z, e, n)
            for n2, _ in sc.kernel(n, z, e):
                k = state_key(n2, nz)
                if k not in seen and not sc.label(n2, nz).terminal:
                    seen.add(k)
                    queue.append((n2, nz))
    return order


def synchronous_expectile_vi(
    sc: Scenario,
    behavior=None,
    tau_e: float = 0.5,
    gamma: float = 1.0,
    tol: float = 1e-12,
    max_iter: int = 10_000,
) -> VIResult:
    """Jacobi iteration of per-state expectile regression on exact targets.

    Each non-terminal state regresses onto the distribution of one-step
    targets induced by ``behavior`` (uniform by default) and the true kernel.
    """
    _check_tau(tau_e)
    probs = behavior.probs if behavior is not None else None
    states = reachable_states(sc)
    index = {state_key(n, z): i for i, (n, z) in enumerate(states)}
    group, weight, const, nxt, boot = [], [], [], [], []
    for i, (n, z) in enumerate(states):
        dist = probs(sc, n, z) if probs else None
        edges = sc.admissible_edges(n, z)
        for e in edges:
            mu = dist.get(e, 0.0) if dist is not None else 1.0 / len(edges)
            if mu <= 0.0:
                continue
            nz = context_update(z, e, n)
            for n2, p in sc.kernel(n, z, e):
                lab = sc.label(n2, nz)
                group.append(i)
                weight.append(mu * p)
                const.append(1.0 if lab is OutcomeLabel.GOAL else 0.0)
                boot.append(not lab.terminal)
                nxt.append(index[state_key(n2, nz)] if not lab.terminal else 0)
    group = np.array(group, dtype=np.int64)
    weight = np.array(weight)
    const = np.array(const)
    boot = np.array(boot)
    nxt = np.array(nxt, dtype=np.int64)
    V = np.zeros(len(states))
    for it in range(1, max_iter + 1):
        y = np.where(boot, gamma * V[nxt], const)
        new = kernels.grouped_expectile(y, weight, group, len(states), tau_e)
        new = np.nan_to_num(new, nan=0.0)
        res = float(np.max(np.abs(new - V))) if len(V) else 0.0
        V = new
        if res < tol:
            return VIResult({k: float(V[i]) for k, i in index.items()}, it, res)
    raise ConvergenceError(f"no convergence after {max_iter} iterations (residual {res:.3e})")


# ---------------------------------------------------------------------------
# persistence


def loads_value(text: str, sc: Scenario | None = None) -> ValueModel:
    lines = text.splitlines()
    if not lines or lines[0] != f"# {VALUE_FORMAT}":
        raise ValueError("not a value model file")
    cfg: dict[str, str] = {}
    rows = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if parts[0] == "config":
            cfg[parts[1]] = parts[2]
        elif ln.strip():
            rows.append(parts)
    train_cfg = json.loads(cfg.get("train", "{}"))
    if cfg.get("kind") == "tabular":
        table, lifted, visits = {}, {}, {}
        for r in rows:
            if r[0] == "exact":
                table[r[1]] = float(r[2])
                visits[r[1]] = int(r[3])
            elif r[0] == "lifted":
                lifted[r[1]] = float(r[2])
        return TabularValue(table, lifted, visits, float(cfg.get("default", 0.0)), sc, train_cfg)
    if cfg.get("kind") == "linear":
        vocab = [r[1] for r in rows if r[0] == "weight" and not r[1].startswith("@")]
        by_name = {r[1]: float(r[2]) for r in rows if r[0] == "weight"}
        w = np.array([by_name[t] for t in vocab] + [by_name["@depth"], by_name["@bias"]])
        return LinearValue(FeatureMap(vocab, json.loads(cfg.get("lift", "{}"))), w, sc, train_cfg)
    raise ValueError(f"unknown value model kind {cfg.get('kind')!r}")


def load_value(path: str | Path, sc: Scenario | None = None) -> ValueModel:
    return loads_value(Path(path).read_text(), sc)


def save_value(model: ValueModel, path: str | Path) -> None:
    Path(path).write_text(model.dumps())
