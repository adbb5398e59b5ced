"""Experiment orchestration: model preparation, method ladder, evaluation, reporting."""

from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.stats import binomtest

from . import __version__, kernels
from .demos import BehaviorPolicy, Dataset, build_dataset, episode_rng
from .executor import ReplanConfig, UncertaintyMonitor, execute_plan, execute_with_replanning
from .oracle import plan_success_prob
from .proposal import ProposalModel
from .scenario import Scenario, get_scenario
from .search import Plan, SearchConfig, chain_rollout, dfs_search, search, tree_dump, tree_parse
from .smdp import OutcomeLabel
from .value import TrainConfig, train

METHODS = ("chain", "tree-no-fail", "full", "dfs")
EXTERNAL_METHOD = "external"  # reserved for a user-supplied proposer; none ships


class ExperimentError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "drawer-can"
    train_scenario: str | None = None  # defaults to the base variant of `scenario`
    n_episodes: int = 400
    policy: dict = field(default_factory=lambda: {"kind": "uniform"})
    instructions: list[str] | None = None
    train: dict = field(default_factory=dict)
    conditioning: str = "node+last-edge"
    smoothing: float = 1.0
    search: dict = field(default_factory=lambda: {"B": 4, "k": 3, "M": 10})
    replan: dict = field(default_factory=lambda: {"kappa_u": 1.0, "window": 5, "lambda_down": 0.5, "max_switches": 2})
    methods: list[str] = field(default_factory=lambda: list(METHODS[:3]))
    n_eval: int = 500
    seeds: list[int] = field(default_factory=lambda: [0])
    ks: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ExperimentError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**dict(data))
        for m in cfg.methods:
            if m not in METHODS:
                raise ExperimentError(f"unknown method {m!r}; expected one of {METHODS}")
        if cfg.n_eval < 1 or cfg.n_episodes < 1 or not cfg.seeds:
            raise ExperimentError("n_eval and n_episodes must be >= 1 and seeds non-empty")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        import yaml

        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ExperimentError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, Mapping):
            raise ExperimentError("config must be a mapping")
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def base_scenario(self) -> str:
        return self.train_scenario or self.scenario.partition(":")[0]

    @property
    def split(self) -> str:
        return "unseen" if self.scenario != self.base_scenario else "seen"


@dataclass
class Models:
    train_sc: Scenario
    eval_sc: Scenario
    dataset: Dataset
    proposal: ProposalModel  # fit on all episodes, bound to the eval scenario
    proposal_success: ProposalModel  # fit on successful episodes only
    value: Any


def prepare_models(cfg: ExperimentConfig, seed: int) -> Models:
    train_sc = get_scenario(cfg.base_scenario)
    eval_sc = get_scenario(cfg.scenario)
    policy = BehaviorPolicy.from_config(cfg.policy)
    policy.validate(train_sc)
    ds = build_dataset(train_sc, policy, cfg.n_episodes, cfg.instructions, seed)
    prop = ProposalModel.fit(ds, train_sc, cfg.conditioning, cfg.smoothing)
    wins = ds.filter_outcome(OutcomeLabel.GOAL)
    prop_s = ProposalModel.fit(wins if len(wins) else ds, train_sc, cfg.conditioning, cfg.smoothing)
    tcfg = TrainConfig(**{**cfg.train, "seed": seed})
    value = train(ds, tcfg, train_sc).model
    return Models(train_sc, eval_sc, ds, prop.bind(eval_sc), prop_s.bind(eval_sc), value.bind(eval_sc))


def select_plan(method: str, models: Models, instruction: str, scfg: SearchConfig):
    """Plan for one instruction; returns (plan, tree or None, expansions)."""
    sc = models.eval_sc
    root = sc.initial_node(instruction)
    cap = sc.horizon or 12
    if method == "chain":
        plan = chain_rollout(root, models.proposal, cap)
        return plan, None, len(plan)
    if method == "tree-no-fail":
        cfg = SearchConfig(**{**asdict(scfg), "scoring": "path-prob"})
        tree, plan = search(root, models.proposal_success, models.value, cfg)
        return plan, tree, tree.expansions
    if method == "full":
        tree, plan = search(root, models.proposal, models.value, scfg)
        return plan, tree, tree.expansions
    if method == "dfs":
        tree, plan = dfs_search(root, models.proposal, models.value, cap)
        return plan, tree, tree.expansions
    raise ExperimentError(f"unknown method {method!r}")


def clopper_pearson(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    ci = binomtest(successes, n).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def _record(cfg: ExperimentConfig, method: str, seed: int, successes: int, n: int, **extra) -> dict:
    lo, hi = clopper_pearson(successes, n)
    rec = {
        "method": method,
        "split": cfg.split,
        "scenario": cfg.scenario,
        "seed": seed,
        "n_eval": n,
        "successes": successes,
        "success_rate": successes / n,
        "ci_low": lo,
        "ci_high": hi,
        "config_hash": cfg.hash(),
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
    }
    rec.update(extra)
    return rec


def evaluate(cfg: ExperimentConfig, models: Models, method: str, seed: int, scfg: SearchConfig | None = None) -> dict:
    """Plan once per instruction, then execute ``n_eval`` episodes round-robin."""
    scfg = scfg or SearchConfig(**cfg.search)
    sc = models.eval_sc
    names = cfg.instructions or list(sc.instruction_names)
    t0 = time.perf_counter()
    plans, probs, expansions = {}, {}, []
    for name in names:
        plan, _, n_exp = select_plan(method, models, name, scfg)
        plans[name] = plan
        probs[name] = plan_success_prob(sc, plan.edges, name)
        expansions.append(n_exp)
    wins = 0
    for i in range(cfg.n_eval):
        name = names[i % len(names)]
        ep, _ = execute_plan(plans[name], sc, episode_rng(seed + 1_000_003, i))
        wins += ep.label is OutcomeLabel.GOAL
    return _record(
        cfg, method, seed, wins, cfg.n_eval,
        plan_prob=float(np.mean([probs[n] for n in names])),
        plans={n: plans[n].describe() for n in names},
        mean_expansions=float(np.mean(expansions)),
        mean_plan_length=float(np.mean([len(plans[n]) for n in names])),
        k=scfg.k,
        wall_time_s=round(time.perf_counter() - t0, 3),
    )


def run_bench(cfg: ExperimentConfig) -> list[dict]:
    out = []
    for seed in cfg.seeds:
        models = prepare_models(cfg, seed)
        for method in cfg.methods:
            out.append(evaluate(cfg, models, method, seed))
    return out


def scaling_sweep(cfg: ExperimentConfig) -> list[dict]:
    """Full method with per-parent expansion width k = keep = K for each K."""
    out = []
    for seed in cfg.seeds:
        models = prepare_models(cfg, seed)
        for K in cfg.ks:
            scfg = SearchConfig(**{**cfg.search, "k": K, "keep": K})
            out.append(evaluate(cfg, models, "full", seed, scfg))
    return out


def summarize_sweep(records: Sequence[dict]) -> list[dict]:
    """Pool seeds per K: mean success and an exact CI on the pooled counts."""
    by_k: dict[int, list[dict]] = {}
    for r in records:
        by_k.setdefault(r["k"], []).append(r)
    rows = []
    for K in sorted(by_k):
        rs = by_k[K]
        s = sum(r["successes"] for r in rs)
        n = sum(r["n_eval"] for r in rs)
        lo, hi = clopper_pearson(s, n)
        rows.append({"k": K, "seeds": len(rs), "success_rate": s / n, "ci_low": lo, "ci_high": hi, "successes": s, "n_eval": n})
    return rows


def replan_ablation(cfg: ExperimentConfig) -> list[dict]:
    """Same plan and episode streams with the replanning plug-in off and on."""
    rp = cfg.replan
    out = []
    scfg = SearchConfig(**cfg.search)
    for seed in cfg.seeds:
        models = prepare_models(cfg, seed)
        sc = models.eval_sc
        names = cfg.instructions or list(sc.instruction_names)
        trees = {}
        for name in names:
            tree, _ = search(sc.initial_node(name), models.proposal, models.value, scfg)
            trees[name] = tree_dump(tree)
        for enabled in (False, True):
            rcfg = ReplanConfig(enabled, float(rp.get("lambda_down", 0.5)), int(rp.get("max_switches", 2)), scfg)
            wins = switches = 0
            t0 = time.perf_counter()
            for i in range(cfg.n_eval):
                name = names[i % len(names)]
                tree = tree_parse(trees[name])  # private copy: down-weighting mutates it
                plan = tree.plan_to(tree.best_leaf())
                mon = UncertaintyMonitor(int(rp.get("window", 5)), float(rp.get("kappa_u", 1.0)))
                ep, logs = execute_with_replanning(
                    tree, plan, sc, mon, rcfg, models.proposal, models.value, episode_rng(seed + 1_000_003, i)
                )
                wins += ep.label is OutcomeLabel.GOAL
                switches += sum(1 for s in logs if s.switch)
            out.append(
                _record(cfg, "replan-on" if enabled else "replan-off", seed, wins, cfg.n_eval,
                        switches=switches, kappa_u=float(rp.get("kappa_u", 1.0)),
                        lambda_down=rcfg.lambda_down, wall_time_s=round(time.perf_counter() - t0, 3))
            )
    return out


def compare_search(cfg: ExperimentConfig) -> list[dict]:
    """Expansions needed by value-guided search versus full fixed-order DFS."""
    out = []
    scfg = SearchConfig(**cfg.search)
    for seed in cfg.seeds:
        models = prepare_models(cfg, seed)
        sc = models.eval_sc
        for name in cfg.instructions or list(sc.instruction_names):
            root = sc.initial_node(name)
            t0 = time.perf_counter()
            tree, plan = search(root, models.proposal, models.value, scfg)
            t1 = time.perf_counter()
            dtree, dplan = dfs_search(root, models.proposal, models.value, sc.horizon or 12)
            t2 = time.perf_counter()
            out.append(
                {
                    "scenario": cfg.scenario,
                    "instruction": name,
                    "seed": seed,
                    "search_plan": plan.describe(),
                    "dfs_plan": dplan.describe(),
                    "same_plan": plan.edges == dplan.edges,
                    "search_expansions_to_plan": plan.found_at,
                    "search_expansions": tree.expansions,
                    "dfs_expansions": dtree.expansions,
                    "plan_prob": plan_success_prob(sc, plan.edges, name),
                    "config_hash": cfg.hash(),
                    "version": __version__,
                    "search_time_s": round(t1 - t0, 4),
                    "dfs_time_s": round(t2 - t1, 4),
                }
            )
    return out


def calibrate(name: str) -> list[dict]:
    from .oracle import calibration_check

    sc = get_scenario(name)
    return [{"scenario": sc.full_name, **row} for row in calibration_check(sc)]


# ---------------------------------------------------------------------------
# reporting


def markdown_table(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return str(v)

    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        lines.append("| " + " | ".join(fmt(r.get(c, "")) for c in columns) + " |")
    return "\n".join(lines) + "\n"


def write_results(out_dir: str | Path, name: str, records: Sequence[Mapping], columns: Sequence[str],
                  extra_tables: Mapping[str, tuple[Sequence[Mapping], Sequence[str]]] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{name}.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    md = [f"# {name}\n", markdown_table(records, columns)]
    for title, (rows, cols) in (extra_tables or {}).items():
        md += [f"\n## {title}\n", markdown_table(rows, cols)]
    path = out / f"{name}.md"
    path.write_text("".join(md))
    return path


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    new = copy.deepcopy(cfg)
    for k, v in kw.items():
        if v is None:
            continue
        if k in ("B", "k", "alpha", "M", "keep"):
            new.search[k] = v
        elif k in ("tau_e", "gamma"):
            new.train[k] = v
        elif k in ("kappa_u", "lambda_down"):
            new.replan[k] = v
        else:
            setattr(new, k, v)
    return new
