from collections import Counter

import pytest

from reachplan.demos import BehaviorPolicy, build_dataset
from reachplan.proposal import KernelProposal, ProposalError, ProposalModel, condition_key
from reachplan.scenario import get_scenario
from reachplan.smdp import EMPTY_CONTEXT, Edge, Node, context_update


@pytest.fixture
def fitted(corridor):
    ds = build_dataset(corridor, BehaviorPolicy(), 300, seed=1)
    return ds, ProposalModel.fit(ds, corridor, "node+last-edge", alpha=1.0)


def test_edge_probs_are_smoothed_counts(corridor, fitted):
    ds, m = fitted
    root = corridor.initial_node()
    counts = Counter(s.edge for s in ds.samples if s.node == root and not s.context.edges)
    edges = corridor.admissible_edges(root, EMPTY_CONTEXT)
    total = sum(counts.values()) + len(edges)
    expected = {e: (counts[e] + 1) / total for e in edges}
    assert m.edge_probs(root, EMPTY_CONTEXT) == pytest.approx(expected)


def test_topk_order_and_errors(corridor, fitted):
    _, m = fitted
    root = corridor.initial_node()
    top = m.propose_topk(root, EMPTY_CONTEXT, 5)
    assert len(top) == 2
    assert [p for _, p in top] == sorted((p for _, p in top), reverse=True)
    with pytest.raises(ProposalError):
        m.propose_topk(root, EMPTY_CONTEXT, 0)


def test_successor_prediction(corridor, fitted):
    _, m = fitted
    root = corridor.initial_node()
    dist = m.predict_successor(root, EMPTY_CONTEXT, Edge.parse("jump(a,d)"))
    assert sum(p for _, p in dist) == pytest.approx(1.0)
    node, p = m.greedy(root, EMPTY_CONTEXT, Edge.parse("jump(a,d)"))
    assert node.has("failed(fall)") and p > 0.5  # the likelier outcome is the fall
    step, q = m.greedy(root, EMPTY_CONTEXT, Edge.parse("step(a,b)"))
    assert step.has("at(b)") and q == pytest.approx(1.0)


def test_unseen_state_is_uniform(corridor, fitted):
    _, m = fitted
    odd = Node.make(["at(b)"], instruction="walk")
    z = context_update(EMPTY_CONTEXT, Edge.parse("jump(a,d)"), corridor.initial_node())
    assert m.edge_probs(odd, z) == {Edge.parse("step(b,c)"): 1.0}


def test_role_lifting_backoff():
    base = get_scenario("drawer-can")
    unseen = get_scenario("drawer-can:unseen")
    ds = build_dataset(base, BehaviorPolicy(), 300, seed=0)
    m = ProposalModel.fit(ds, base)
    a = m.edge_probs(base.initial_node("pack spam"), EMPTY_CONTEXT)
    b = m.bind(unseen).edge_probs(unseen.initial_node("pack spam"), EMPTY_CONTEXT)
    rename = {"beans": "corn"}
    assert {e.rename(rename): p for e, p in a.items()} == pytest.approx(b)


def test_roundtrip(tmp_path, corridor, fitted):
    _, m = fitted
    p = tmp_path / "prop.tsv"
    m.save(p)
    back = ProposalModel.load(p, corridor)
    assert back.dumps() == m.dumps()
    root = corridor.initial_node()
    assert back.edge_probs(root, EMPTY_CONTEXT) == m.edge_probs(root, EMPTY_CONTEXT)


def test_conditioning_keys():
    n = Node.make(["x"], instruction="i")
    z = context_update(EMPTY_CONTEXT, Edge.parse("go(a)"), n)
    assert condition_key(n, z, "node") == n.serialize()
    assert condition_key(n, z, "node+last-edge").endswith("go(a)")
    with pytest.raises(ProposalError):
        condition_key(n, z, "nope")


def test_errors(corridor, fitted):
    ds, m = fitted
    with pytest.raises(ProposalError):
        ProposalModel(conditioning="nope")
    with pytest.raises(ProposalError):
        ProposalModel(alpha=0.0)
    with pytest.raises(ProposalError):
        ProposalModel.fit(ds.filter_outcome(ds.episodes[0].label.__class__("interior")), corridor)
    with pytest.raises(ProposalError):
        ProposalModel.fit(ds, corridor).bind(None).edge_probs(corridor.initial_node(), EMPTY_CONTEXT)
    with pytest.raises(ProposalError):
        ProposalModel.loads("garbage")


def test_kernel_proposal_matches_kernel(corridor):
    kp = KernelProposal(corridor)
    root = corridor.initial_node()
    e = Edge.parse("jump(a,d)")
    assert dict(kp.predict_successor(root, EMPTY_CONTEXT, e)) == pytest.approx(dict(corridor.kernel(root, EMPTY_CONTEXT, e)))
