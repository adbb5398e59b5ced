"""Acceptance criteria, one test each.

Every test prints a single ``[criterion N] PASS|FAIL ...`` line (visible even
under pytest's output capture) and then asserts. Running the module directly
executes all criteria in order and exits nonzero if any fails:

    python3 tests/test_acceptance.py
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np

from reachplan import kernels
from reachplan.demos import BehaviorPolicy, build_dataset, episode_rng, rollout
from reachplan.experiments import (
    ExperimentConfig,
    compare_search,
    replan_ablation,
    run_bench,
    scaling_sweep,
    summarize_sweep,
)
from reachplan.oracle import OracleValue, argmax_plan, calibration_check, exact_reach_avoid, plan_success_prob
from reachplan.proposal import KernelProposal
from reachplan.scenario import BUILTIN_SCENARIOS, get_scenario, load_scenario
from reachplan.search import SearchConfig, search
from reachplan.smdp import EMPTY_CONTEXT, Edge, OutcomeLabel, episode_return
from reachplan.value import LinearValue, TrainConfig, expectile_loss, synchronous_expectile_vi, train

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

CHAIN3 = """
name: chain3
horizon: 5
instructions:
  - {name: walk, facts: [at(a)], goal: [at(d)]}
edges:
  - edge: step(a,b)
    requires: [at(a)]
    outcomes: [{p: 1, add: [at(b)], remove: [at(a)]}]
  - edge: step(b,c)
    requires: [at(b)]
    outcomes: [{p: 1, add: [at(c)], remove: [at(b)]}]
  - edge: step(c,d)
    requires: [at(c)]
    outcomes: [{p: 1, add: [at(d)], remove: [at(c)]}]
"""


def report(n: int, ok: bool, detail: str, capsys=None) -> None:
    line = f"[criterion {n:2d}] {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


def test_c01_expectile_arithmetic(capsys):
    vals = (expectile_loss(1.0, 0.7), expectile_loss(-1.0, 0.7), expectile_loss(2.0, 0.5))
    # 1 - 0.7 is one ulp away from the double nearest 0.3, so compare at machine epsilon
    eps = np.finfo(float).eps
    ok = all(abs(v - t) <= eps * abs(t) for v, t in zip(vals, (0.7, 0.3, 2.0)))
    report(1, ok, f"rho_0.7(+1), rho_0.7(-1), rho_0.5(2) = {vals} (within eps = {eps:.1e} relative)", capsys)


def test_c02_pathwise_identity(capsys):
    t0 = time.perf_counter()
    scenarios = [get_scenario(n) for n in BUILTIN_SCENARIOS]
    per = 10_000 // len(scenarios) + 1
    bad = errors = total = 0
    meta = np.random.default_rng(20)
    for sc in scenarios:
        for i in range(per):
            # fuzz the behavior policy itself as well as the episode stream
            w = {e: float(x) for e, x in zip(("grasp(*)", "insert(*)", "push(*)", "place(*)"), meta.random(4) * 3)}
            pol = BehaviorPolicy(kind="weighted", weights=w, default_weight=float(meta.random() + 0.1))
            name = sc.instruction_names[i % len(sc.instruction_names)]
            try:
                ep = rollout(sc, pol, name, episode_rng(int(meta.integers(1 << 30)), i))
                bad += episode_return(ep) != int(ep.label is OutcomeLabel.GOAL)
            except Exception:
                errors += 1
            total += 1
    dt = time.perf_counter() - t0
    ok = bad == 0 and errors == 0 and total >= 10_000 and dt < 10
    report(2, ok, f"{total} episodes, {bad} mismatches, {errors} exceptions, {dt:.1f}s (< 10 s)", capsys)


def test_c03_vi_equals_behavior_oracle(capsys):
    t0 = time.perf_counter()
    errs = {}
    for name in ("plug2", "drawer-can"):
        sc = get_scenario(name)
        vi = synchronous_expectile_vi(sc, tau_e=0.5, gamma=1.0)
        oracle = exact_reach_avoid(sc, "behavior", 1.0)
        errs[name] = max(abs(v - oracle.values[k]) for k, v in vi.values.items())
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-8 and dt < 5
    report(3, ok, f"sup-norm error {errs} (<= 1e-8), {dt:.1f}s (< 5 s)", capsys)


def test_c04_sampled_training_convergence(capsys):
    t0 = time.perf_counter()
    sc = get_scenario("plug2")
    ds = build_dataset(sc, BehaviorPolicy(), 14_200, seed=0)
    model = train(ds, TrainConfig(tau_e=0.5, gamma=1.0), sc).model
    oracle = exact_reach_avoid(sc, "behavior", 1.0)
    keys = [k for k, n in model.visits.items() if n >= 100]
    err = max(abs(model.table[k] - oracle.values[k]) for k in keys)
    dt = time.perf_counter() - t0
    ok = len(ds) >= 50_000 and err <= 0.05 and dt < 60
    report(4, ok, f"{len(ds)} transitions, {len(keys)} keys with >= 100 visits, max |V - oracle| = {err:.4f} "
                  f"(<= 0.05), {dt:.1f}s (< 60 s)", capsys)


def test_c05_discounted_identity(capsys):
    sc = load_scenario(CHAIN3)
    exact = exact_reach_avoid(sc, "optimal", gamma=0.9).root_value("walk")
    vi = synchronous_expectile_vi(sc, tau_e=0.5, gamma=0.9)
    learned = vi.values[exact_reach_avoid(sc, "optimal", gamma=0.9).roots["walk"]]
    ok = abs(exact - 0.81) <= 1e-8 and abs(learned - 0.81) <= 1e-8
    report(5, ok, f"root value oracle {exact:.10f}, expectile VI {learned:.10f} (0.81 +- 1e-8)", capsys)


def test_c06_planner_oracle_agreement(capsys):
    t0 = time.perf_counter()
    mismatched = []
    for name in BUILTIN_SCENARIOS:
        sc = get_scenario(name)
        for ins in sc.instruction_names:
            _, plan = search(sc.initial_node(ins), KernelProposal(sc), OracleValue(sc), SearchConfig(B=100, k=20, M=20))
            edges, _ = argmax_plan(sc, instruction=ins)
            if plan.edges != edges:
                mismatched.append(f"{name}/{ins}")
    sc = get_scenario("plug3")
    edges, p = argmax_plan(sc)
    expected = tuple(Edge.parse(e) for e in (
        "grasp(small)", "insert(small,right)", "grasp(round)", "insert(round,middle)", "grasp(rect)", "insert(rect,left)"))
    dt = time.perf_counter() - t0
    ok = not mismatched and edges == expected and abs(p - 0.96) < 1e-9 and dt < 10
    report(6, ok, f"{len(BUILTIN_SCENARIOS)} scenarios, mismatches {mismatched}; plug3 argmax small->round->rect "
                  f"at {p:.4f}; {dt:.1f}s (< 10 s)", capsys)


# Reference targets keyed by (scenario, target label); a pair is a range.
REFERENCE = {
    ("plug3", "rect-small-round"): (0.0, 0.18),
    ("plug3", "rect-round-small"): (0.0, 0.18),
    ("plug2", "round-small"): 1.00,
    ("plug2", "rect-small"): 0.09,
    ("drawer-box", "push"): 1.00,
    ("drawer-box", "pick"): 0.55,
    ("drawer-box", "leave"): (0.30, 0.35),
    ("drawer-can", "pick"): (0.91, 1.00),
    ("drawer-can", "push"): 0.45,
    ("drawer-can", "leave"): (0.00, 0.05),
    ("cabinet", "push-clock"): 0.95,
    ("cabinet", "pick-clock"): 0.47,
    ("cabinet", "leave"): 0.05,
    ("cabinet", "fold"): 0.90,
}
# The towel's leave target is reported for the towel instruction only.
REFERENCE_BY_INSTRUCTION = {("cabinet", "pack towel", "leave"): 0.15}


def test_c07_calibration(capsys):
    misses, checked, seen = [], 0, set()
    for name in ("plug3", "plug2", "drawer-box", "drawer-can", "cabinet"):
        for row in calibration_check(get_scenario(name)):
            target = REFERENCE_BY_INSTRUCTION.get((name, row["instruction"], row["label"]),
                                                  REFERENCE.get((name, row["label"])))
            if target is None:
                continue
            lo, hi = target if isinstance(target, tuple) else (target, target)
            checked += 1
            seen.add((name, row["label"]))
            if not (lo - 0.01 - 1e-12 <= row["exact"] <= hi + 0.01 + 1e-12) or not row["ok"]:
                misses.append(f"{name}/{row['instruction']}/{row['label']}={row['exact']:.4f}")
    missing = sorted(set(REFERENCE) - seen)
    ok = not misses and not missing
    report(7, ok, f"{checked} target paths within +-0.01; misses {misses}; uncovered {missing}", capsys)


def test_c08_failure_data_ablation(capsys):
    t0 = time.perf_counter()
    cfg = ExperimentConfig.load(CONFIGS / "bench-drawer-can.yaml")
    cfg.methods = ["chain", "full"]
    recs = {r["method"]: r for r in run_bench(cfg)}
    sc = get_scenario("drawer-can")
    policy = BehaviorPolicy.from_config(cfg.policy)
    leave = min(
        sum(p for e, p in policy.probs(sc, sc.initial_node(ins), EMPTY_CONTEXT).items() if e.verb == "grasp")
        for ins in sc.instruction_names
    )
    full, chain = recs["full"], recs["chain"]
    gap = full["success_rate"] - chain["success_rate"]
    dt = time.perf_counter() - t0
    ok = abs(leave - 0.6) < 1e-12 and full["plan_prob"] >= 0.45 and chain["plan_prob"] <= 0.05 and gap >= 0.30 and dt < 120
    report(8, ok, f"leave bias {leave:.2f}; plan prob full {full['plan_prob']:.3f} (>= 0.45) chain {chain['plan_prob']:.3f} (<= 0.05); "
                  f"success over {cfg.n_eval}: full {full['success_rate']:.3f} chain {chain['success_rate']:.3f} "
                  f"(gap {gap:.3f} >= 0.30); {dt:.0f}s (< 120 s)", capsys)


def _ci_non_decreasing(rows) -> bool:
    """Each step K -> K+1 either does not drop or the two 95% CIs overlap."""
    for a, b in zip(rows, rows[1:]):
        if b["success_rate"] < a["success_rate"] and b["ci_high"] < a["ci_low"]:
            return False
    return True


def test_c09_test_time_scaling(capsys):
    cfg = ExperimentConfig.load(CONFIGS / "sweep-drawer-unseen.yaml")
    cfg.ks = [1, 2, 3, 4]
    rows = summarize_sweep(scaling_sweep(cfg))
    ok = cfg.split == "unseen" and len(cfg.seeds) == 5 and cfg.n_eval == 500 and _ci_non_decreasing(rows)
    rates = ", ".join(f"K={r['k']}: {r['success_rate']:.3f} [{r['ci_low']:.3f}, {r['ci_high']:.3f}]" for r in rows)
    report(9, ok, f"{cfg.scenario}, 5 seeds x 500: {rates}", capsys)


def test_c10_replanning_trend(capsys):
    cfg = ExperimentConfig.load(CONFIGS / "replan-drawer.yaml")
    recs = {r["method"]: r for r in replan_ablation(cfg)}
    off, on = recs["replan-off"]["success_rate"], recs["replan-on"]["success_rate"]
    ok = cfg.n_eval == 2000 and on - off >= 0.05
    report(10, ok, f"{cfg.scenario} over {cfg.n_eval}: off {off:.4f}, on {on:.4f} (gain {on - off:+.4f} >= 0.05)", capsys)


def test_c11_search_efficiency(capsys):
    cfg = ExperimentConfig.load(CONFIGS / "compare-plug3.yaml")
    recs = compare_search(cfg)
    sc = get_scenario("plug3")
    best, _ = argmax_plan(sc)
    ok = len({r["seed"] for r in recs}) == 10 and all(
        r["search_expansions_to_plan"] < r["dfs_expansions"] and r["same_plan"]
        and abs(plan_success_prob(sc, [Edge.parse(e) for e in r["search_plan"].split(" -> ")]) - 0.96) < 1e-9
        for r in recs
    ) and all(r["search_plan"] == " -> ".join(e.serialize() for e in best) for r in recs)
    counts = sorted({(r["search_expansions_to_plan"], r["dfs_expansions"]) for r in recs})
    report(11, ok, f"10 seeds; (search expansions to argmax, DFS expansions) = {counts}", capsys)


def test_c12_gradient_check(capsys):
    rng = np.random.default_rng(12)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 12))
        n = int(rng.integers(5, 60))
        X = rng.normal(size=(n, d))
        y = rng.random(n)
        w = rng.normal(size=d)
        tau = float(rng.uniform(0.05, 0.95))
        _, g = LinearValue.loss_and_grad(X, y, w, tau)
        h = 1e-6
        fd = np.array([
            (LinearValue.loss_and_grad(X, y, w + h * e, tau)[0] - LinearValue.loss_and_grad(X, y, w - h * e, tau)[0]) / (2 * h)
            for e in np.eye(d)
        ])
        worst = max(worst, float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-12)))
    ok = worst <= 1e-5
    report(12, ok, f"100 random points, worst relative error {worst:.2e} (<= 1e-5)", capsys)


def test_c13_expectile_monotonicity(capsys):
    rng = np.random.default_rng(13)
    failures = 0
    for _ in range(200):
        n = int(rng.integers(1, 40))
        y = rng.normal(size=n) if rng.random() < 0.5 else rng.integers(0, 2, n).astype(float)
        w = rng.random(n) + 0.01
        fits = [float(kernels.grouped_expectile(y, w, np.zeros(n, dtype=np.int64), 1, t)[0]) for t in (0.3, 0.5, 0.7)]
        failures += not (fits[0] <= fits[1] + 1e-12 and fits[1] <= fits[2] + 1e-12)
    ok = failures == 0
    report(13, ok, f"200 sample sets, tau in (0.3, 0.5, 0.7): {failures} order violations ({kernels.BACKEND} kernels)", capsys)


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_c")]
    failed = 0
    for fn in tests:
        try:
            fn(None)
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
