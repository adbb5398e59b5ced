import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reachplan.demos import BehaviorPolicy, build_dataset
from reachplan.oracle import OracleValue, argmax_plan
from reachplan.proposal import KernelProposal, ProposalModel
from reachplan.scenario import get_scenario
from reachplan.search import (
    NoPlanError,
    Plan,
    SearchConfig,
    SearchError,
    backup,
    chain_rollout,
    dfs_search,
    search,
    tree_dump,
    tree_parse,
)
from reachplan.smdp import EMPTY_CONTEXT, Edge, Node, OutcomeLabel

PLUG3 = get_scenario("plug3")


def _check_statistics(tree):
    for n in tree.nodes:
        kids_n = sum(c.N for c in n.children)
        kids_w = sum(c.W for c in n.children)
        own = 0 if n is tree.root else 1
        assert n.N == own + kids_n
        assert n.W == pytest.approx((n.v or 0.0) * own + kids_w)
        assert 0.0 <= n.Q <= 1.0


@given(B=st.integers(1, 4), k=st.integers(1, 4), M=st.integers(1, 8), alpha=st.floats(0, 1), data=st.data())
@settings(max_examples=40, deadline=None)
def test_tree_invariants(B, k, M, alpha, data):
    keep = data.draw(st.integers(1, k))
    cfg = SearchConfig(B=B, k=k, keep=keep, M=M, alpha=alpha)
    tree, plan = search(PLUG3.initial_node(), KernelProposal(PLUG3), OracleValue(PLUG3), cfg)
    _check_statistics(tree)
    assert tree.expansions == len(tree.nodes) - 1 <= M * B * keep
    for n in tree.nodes:
        edges = [c.edge for c in n.children]
        assert len(edges) == len(set(edges)) <= keep
        assert all(e in PLUG3.admissible_edges(n.node, n.context) for e in edges)
    assert plan.leaf in tree.leaves()
    back = tree_parse(tree_dump(tree))
    assert tree_dump(back) == tree_dump(tree)


def test_search_prefers_safe_path(corridor):
    tree, plan = search(corridor.initial_node(), KernelProposal(corridor), OracleValue(corridor), SearchConfig(M=5))
    assert plan.describe() == "step(a,b) -> step(b,c) -> step(c,d)"
    assert plan.label is OutcomeLabel.GOAL
    assert plan.found_at == plan.leaf.created_at


def test_search_matches_argmax_with_oracle():
    tree, plan = search(PLUG3.initial_node(), KernelProposal(PLUG3), OracleValue(PLUG3), SearchConfig(B=50, k=10, M=20))
    assert plan.edges == argmax_plan(PLUG3)[0]
    _, dplan = dfs_search(PLUG3.initial_node(), KernelProposal(PLUG3), OracleValue(PLUG3), 12)
    assert dplan.edges == plan.edges


def test_path_prob_scoring(corridor):
    ds = build_dataset(corridor, BehaviorPolicy(), 200, seed=0)
    prop = ProposalModel.fit(ds, corridor)
    tree, _ = search(corridor.initial_node(), prop, None, SearchConfig(M=4, scoring="path-prob"))
    for n in tree.leaves():
        expected = 0.0
        if n.label is not OutcomeLabel.FAIL:
            expected = 1.0
            for m in n.path()[1:]:
                expected *= m.prior
        assert n.v == pytest.approx(expected)


def test_chain_stops_at_predicted_failure(corridor):
    plan = chain_rollout(corridor.initial_node(), KernelProposal(corridor), 6)
    # uniform edge scores tie; "jump" sorts first and its likelier outcome is the fall
    assert plan.describe() == "jump(a,d)" and plan.label is OutcomeLabel.FAIL


def test_chain_depth_cap():
    plan = chain_rollout(PLUG3.initial_node(), KernelProposal(PLUG3), 1)
    assert len(plan) == 1 and plan.diagnostic == "depth cap reached"


def test_dfs_expands_everything(corridor):
    tree, plan = dfs_search(corridor.initial_node(), KernelProposal(corridor), OracleValue(corridor), 6)
    assert tree.expansions == 4  # jump, then the three corridor steps
    assert plan.label is OutcomeLabel.GOAL
    with pytest.raises(NoPlanError):
        dfs_search(corridor.initial_node(), KernelProposal(corridor), OracleValue(corridor), 0)


def test_depth_cap_limits_tree():
    tree, _ = search(PLUG3.initial_node(), KernelProposal(PLUG3), OracleValue(PLUG3), SearchConfig(M=20, depth_cap=2))
    assert max(n.depth for n in tree.nodes) <= 2


def test_plan_text_roundtrip():
    _, plan = search(PLUG3.initial_node(), KernelProposal(PLUG3), OracleValue(PLUG3))
    back = Plan.parse(plan.serialize())
    assert back.edges == plan.edges and back.nodes == plan.nodes and back.label == plan.label
    with pytest.raises(SearchError):
        Plan.parse("edge\tgo(a)\n")


def test_errors(corridor):
    for kw in ({"B": 0}, {"k": 2, "keep": 3}, {"alpha": 1.5}, {"scoring": "x"}):
        with pytest.raises(ValueError):
            SearchConfig(**kw)
    goal = Node.make(["at(d)"], instruction="walk")
    with pytest.raises(SearchError):
        search(goal, KernelProposal(corridor), OracleValue(corridor))
    with pytest.raises(SearchError):
        search(corridor.initial_node(), ProposalModel(), None)
    with pytest.raises(ValueError):
        backup(search(corridor.initial_node(), KernelProposal(corridor), OracleValue(corridor))[0].root, 2.0)
    with pytest.raises(SearchError):
        tree_parse('{"parent": 3}\n')
    assert Edge.parse("step(a,b)") in corridor.admissible_edges(corridor.initial_node(), EMPTY_CONTEXT)
