"""Command-line entry point: ``reachplan <command> [options]``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .demos import BehaviorPolicy, Dataset, DatasetError, build_dataset, dataset_stats
from .experiments import (
    METHODS,
    ExperimentConfig,
    ExperimentError,
    calibrate,
    compare_search,
    replan_ablation,
    run_bench,
    scaling_sweep,
    summarize_sweep,
    with_overrides,
    write_results,
)
from .oracle import exact_reach_avoid, plan_success_prob
from .proposal import ProposalError, ProposalModel
from .scenario import BUILTIN_SCENARIOS, ScenarioError, get_scenario
from .search import SearchConfig, SearchError, chain_rollout, dfs_search, search
from .value import PESSIMISTIC_TAU, TrainConfig, TrainingError, load_value, save_value, train

BENCH_COLUMNS = ["method", "split", "seed", "success_rate", "ci_low", "ci_high", "plan_prob", "mean_expansions", "mean_plan_length"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (YAML or JSON)")
    p.add_argument("--seed", type=int, help="single seed (overrides the config's seed list)")
    p.add_argument("--out", default="results", help="output directory")
    p.add_argument("--scenario", help="scenario name[:variant] or path to a YAML file")


def _add_search(p: argparse.ArgumentParser) -> None:
    p.add_argument("--k", type=int, help="proposals per parent")
    p.add_argument("--B", type=int, help="parents expanded per iteration")
    p.add_argument("--alpha", type=float, help="mix between parent Q and proposal probability")
    p.add_argument("--M", type=int, help="search iterations")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau-e", type=float, help="expectile level")
    p.add_argument("--gamma", type=float, help="discount")
    p.add_argument("--pessimistic", action="store_true", help=f"use tau_e = {PESSIMISTIC_TAU}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="reachplan", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll out a behavior policy and write a dataset")
    _add_common(p)
    p.add_argument("--episodes", type=int, default=400)
    p.add_argument("--policy", help="behavior policy as JSON (default: from config, else uniform)")

    p = sub.add_parser("fit-proposal", help="fit the proposal model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--conditioning", default="node+last-edge")
    p.add_argument("--smoothing", type=float, default=1.0)
    p.add_argument("--success-only", action="store_true", help="drop failed episodes first")

    p = sub.add_parser("train-value", help="train the value model with expectile TD")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="results")
    p.add_argument("--kind", default="tabular", choices=["tabular", "linear"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    _add_train(p)

    p = sub.add_parser("plan", help="search for a plan from a scenario's initial node")
    _add_common(p)
    _add_search(p)
    p.add_argument("--instruction")
    p.add_argument("--proposal", required=True)
    p.add_argument("--value", help="value model file (required except for chain)")
    p.add_argument("--method", default="full", choices=["full", "chain", "dfs", "tree-no-fail"])

    for name, helptext in (
        ("run-bench", "chain / tree-no-fail / full (/ dfs) ladder"),
        ("scaling-sweep", "success versus expansion width K"),
        ("replan-ablation", "uncertainty-triggered replanning off versus on"),
        ("compare-search", "value-guided search versus fixed-order DFS"),
    ):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_search(p)
        _add_train(p)
        p.add_argument("--method", action="append", choices=list(METHODS) + ["external"])
        p.add_argument("--n-eval", type=int)
        p.add_argument("--episodes", type=int, help="training episodes")
        p.add_argument("--replan", action="store_true", help="(replan-ablation) enable the plug-in arm only")
        p.add_argument("--kappa-u", type=float)
        p.add_argument("--lambda-down", type=float)

    p = sub.add_parser("calibrate", help="check shipped scenarios against their target path probabilities")
    p.add_argument("--scenario", action="append", help="defaults to every built-in")
    p.add_argument("--out", default="results")

    p = sub.add_parser("solve", help="dump exact first-exit probabilities for a scenario")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", default="optimal", choices=["optimal", "behavior"])
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--out", default="results")
    return ap


def _experiment(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    tau = PESSIMISTIC_TAU if getattr(args, "pessimistic", False) else getattr(args, "tau_e", None)
    methods = getattr(args, "method", None)
    if methods and "external" in methods:
        raise ExperimentError("the 'external' method is reserved for a user-supplied proposer; none ships")
    cfg = with_overrides(
        cfg,
        scenario=args.scenario,
        B=args.B, k=args.k, alpha=args.alpha, M=args.M,
        tau_e=tau, gamma=getattr(args, "gamma", None),
        kappa_u=getattr(args, "kappa_u", None), lambda_down=getattr(args, "lambda_down", None),
        n_eval=getattr(args, "n_eval", None), n_episodes=getattr(args, "episodes", None),
        methods=methods,
    )
    if args.seed is not None:
        cfg.seeds = [args.seed]
    return ExperimentConfig.from_mapping(cfg.to_dict())


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "hash": cfg.hash()}, indent=2, sort_keys=True) + "\n")


def cmd_gen_data(args) -> int:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    sc = get_scenario(args.scenario or cfg.base_scenario)
    policy = BehaviorPolicy.from_config(json.loads(args.policy) if args.policy else cfg.policy)
    policy.validate(sc)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    ds = build_dataset(sc, policy, args.episodes, cfg.instructions, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds.save(out / "dataset.jsonl")
    rows = [{"path": r.path, "trials": r.trials, "successes": r.successes, "p_hat": r.p_hat,
             "scenario": ds.scenario, "seed": seed} for r in dataset_stats(ds)]
    write_results(out, "gen-data", rows, ["path", "trials", "successes", "p_hat"])
    print(f"wrote {len(ds)} samples from {len(ds.episodes)} episodes to {out / 'dataset.jsonl'}")
    return 0


def cmd_fit_proposal(args) -> int:
    ds = Dataset.load(args.data)
    if args.success_only:
        from .smdp import OutcomeLabel

        ds = ds.filter_outcome(OutcomeLabel.GOAL)
    sc = get_scenario(ds.scenario)
    m = ProposalModel.fit(ds, sc, args.conditioning, args.smoothing)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    m.save(out / "proposal.tsv")
    row = {"scenario": ds.scenario, "conditioning": m.conditioning, "alpha": m.alpha,
           "condition_keys": len(m.edge_counts["exact"]), "lifted_keys": len(m.edge_counts["lifted"]),
           "samples": len(ds)}
    write_results(out, "fit-proposal", [row], list(row))
    print(f"wrote {out / 'proposal.tsv'}")
    return 0


def cmd_train_value(args) -> int:
    ds = Dataset.load(args.data)
    sc = get_scenario(ds.scenario)
    kw = {"kind": args.kind, "seed": args.seed}
    if args.pessimistic:
        kw["tau_e"] = PESSIMISTIC_TAU
    elif args.tau_e is not None:
        kw["tau_e"] = args.tau_e
    if args.gamma is not None:
        kw["gamma"] = args.gamma
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    if args.kind == "linear":
        kw.setdefault("lr", 0.05)
        kw.setdefault("epochs", 50)
    res = train(ds, TrainConfig(**kw), sc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_value(res.model, out / "value.txt")
    (out / "loss.jsonl").write_text(res.loss_jsonl())
    last = res.losses[-1]
    write_results(out, "train-value", [{"scenario": ds.scenario, **kw, "final_loss": last["loss"], "epochs_run": len(res.losses)}],
                  ["scenario", "kind", "final_loss", "epochs_run"])
    print(f"wrote {out / 'value.txt'} (final loss {last['loss']:.6f})")
    return 0


def cmd_plan(args) -> int:
    sc = get_scenario(args.scenario or "plug3")
    prop = ProposalModel.load(args.proposal, sc)
    value = load_value(args.value, sc) if args.value else None
    if args.method != "chain" and value is None and args.method != "tree-no-fail":
        raise ExperimentError(f"--value is required for method {args.method}")
    root = sc.initial_node(args.instruction)
    scfg = SearchConfig(**{k: v for k, v in {"B": args.B, "k": args.k, "alpha": args.alpha, "M": args.M}.items() if v is not None})
    tree = None
    if args.method == "chain":
        plan = chain_rollout(root, prop, sc.horizon or 12)
    elif args.method == "dfs":
        tree, plan = dfs_search(root, prop, value, sc.horizon or 12)
    else:
        if args.method == "tree-no-fail":
            scfg.scoring = "path-prob"
        tree, plan = search(root, prop, value, scfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.txt").write_text(plan.serialize())
    if tree is not None:
        (out / "tree.jsonl").write_text(tree.dump())
    row = {"scenario": sc.full_name, "instruction": root.instruction, "method": args.method,
           "plan": plan.describe(), "predicted": plan.label.value, "score": plan.score,
           "plan_prob": plan_success_prob(sc, plan.edges, root.instruction),
           "expansions": tree.expansions if tree is not None else len(plan)}
    write_results(out, "plan", [row], list(row))
    print(f"{plan.describe()}  (exact success {row['plan_prob']:.4f})")
    return 0


def cmd_run_bench(args) -> int:
    cfg = _experiment(args)
    _write_config(Path(args.out), cfg)
    recs = run_bench(cfg)
    print(write_results(args.out, "run-bench", recs, BENCH_COLUMNS).read_text())
    return 0


def cmd_scaling_sweep(args) -> int:
    cfg = _experiment(args)
    _write_config(Path(args.out), cfg)
    recs = scaling_sweep(cfg)
    summary = summarize_sweep(recs)
    path = write_results(args.out, "scaling-sweep", recs, ["k", "seed", "success_rate", "ci_low", "ci_high", "plan_prob"],
                         {"pooled over seeds": (summary, ["k", "seeds", "success_rate", "ci_low", "ci_high"])})
    print(path.read_text())
    return 0


def cmd_replan_ablation(args) -> int:
    cfg = _experiment(args)
    _write_config(Path(args.out), cfg)
    recs = replan_ablation(cfg)
    if args.replan:
        recs = [r for r in recs if r["method"] == "replan-on"]
    cols = ["method", "seed", "success_rate", "ci_low", "ci_high", "switches", "kappa_u", "lambda_down"]
    print(write_results(args.out, "replan-ablation", recs, cols).read_text())
    return 0


def cmd_compare_search(args) -> int:
    cfg = _experiment(args)
    _write_config(Path(args.out), cfg)
    recs = compare_search(cfg)
    cols = ["instruction", "seed", "same_plan", "search_expansions_to_plan", "search_expansions", "dfs_expansions", "plan_prob"]
    print(write_results(args.out, "compare-search", recs, cols).read_text())
    return 0


def cmd_calibrate(args) -> int:
    rows = []
    for name in args.scenario or BUILTIN_SCENARIOS:
        rows.extend(calibrate(name))
    print(write_results(args.out, "calibrate", rows, ["scenario", "instruction", "label", "target", "exact", "ok"]).read_text())
    return 0 if all(r["ok"] for r in rows) else 1


def cmd_solve(args) -> int:
    sc = get_scenario(args.scenario)
    sol = exact_reach_avoid(sc, args.mode, args.gamma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "solution.txt").write_text(sol.dump())
    rows = [{"scenario": sc.full_name, "instruction": k, "root_value": sol.root_value(k), "mode": args.mode,
             "states": len(sol.values), "residual": sol.residual} for k in sol.roots]
    print(write_results(out, "solve", rows, list(rows[0])).read_text())
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "fit-proposal": cmd_fit_proposal,
    "train-value": cmd_train_value,
    "plan": cmd_plan,
    "run-bench": cmd_run_bench,
    "scaling-sweep": cmd_scaling_sweep,
    "replan-ablation": cmd_replan_ablation,
    "compare-search": cmd_compare_search,
    "calibrate": cmd_calibrate,
    "solve": cmd_solve,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ScenarioError, ExperimentError, DatasetError, ProposalError, TrainingError, SearchError,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
