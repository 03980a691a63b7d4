import itertools

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from metalign.evaluation import (
    LabeledTriple,
    build_eval_set,
    eval_alignment,
    evaluate,
    report_from_predictions,
    write_items,
)
from metalign.graph import Direction, InterLink, Triple, Vocabulary, gene, metabolite
from metalign.linkpred import LinkPredModel

from conftest import make_graph, random_graph


@pytest.fixture
def graph(rng):
    return random_graph("A", 8, 8, 20, rng)


def test_three_test_triples_give_33_items(graph):
    test = sorted(graph.triples)[:3]
    items = build_eval_set(test, graph, 10, 0)
    assert len(items) == 33
    assert sum(it.label for it in items) == 3


def test_corruptions_never_true_and_within_complement(graph):
    items = build_eval_set(graph.triples, graph, 10, 1)
    complement = {
        Triple(m, d, g)
        for m, d, g in itertools.product(graph.metabolites, Direction, graph.genes)
    } - graph.triples
    for it in items:
        if not it.label:
            assert it.triple in complement
            # exactly one endpoint replaced
            assert (it.triple.metabolite == it.source.metabolite) != (it.triple.gene == it.source.gene)
            assert it.triple.direction == it.source.direction


def test_eval_set_deterministic(graph):
    assert build_eval_set(graph.triples, graph, 10, 4) == build_eval_set(graph.triples, graph, 10, 4)


def _const_model(vocab, value):
    model = LinkPredModel(len(vocab), 2, "transe")
    with torch.no_grad():
        model.vertex_emb.zero_()
        model.relation_emb.fill_(value / 2)
    return model


def test_everything_valid_classifier(graph):
    vocab = Vocabulary([graph])
    items = build_eval_set(sorted(graph.triples)[:5], graph, 10, 0)
    model = _const_model(vocab, 1.0)  # every score is 1.0
    rep, _ = evaluate(model, vocab, {"left": 1.0, "right": 1.0}, items)
    assert rep.precision == pytest.approx(1 / 11)
    assert rep.recall == 1.0


def test_perfect_separation():
    # one-hot matching: m_i and g_i share a vector, the relation is zero, so
    # positives score 0 and every corruption scores 2
    n = 6
    g = make_graph("A", [(f"m{i}", "left" if i % 2 else "right", f"g{i}") for i in range(n)])
    vocab = Vocabulary([g])
    model = LinkPredModel(len(vocab), n, "transe")
    with torch.no_grad():
        model.relation_emb.zero_()
        for i in range(n):
            model.vertex_emb[vocab.index[gene("A", f"g{i}")]] = torch.eye(n, dtype=torch.float64)[i]
            model.vertex_emb[vocab.index[metabolite("A", f"m{i}")]] = torch.eye(n, dtype=torch.float64)[i]
    items = build_eval_set(g.triples, g, 10, 0)
    rep, scores = evaluate(model, vocab, {"left": 1.0, "right": 1.0}, items)
    assert (rep.precision, rep.recall, rep.f1) == (1.0, 1.0, 1.0)
    assert rep.tp == n and rep.fp == 0


def test_empty_eval_set():
    with pytest.raises(ValueError):
        report_from_predictions(np.zeros(0, bool), np.zeros(0, bool), [], [])


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=60))
def test_metric_identities(pairs):
    pred = np.array([p for p, _ in pairs])
    labels = np.array([y for _, y in pairs])
    rep = report_from_predictions(pred, labels, ["left"] * len(pairs), ["A"] * len(pairs))
    for x in (rep.precision, rep.recall, rep.f1):
        assert 0 <= x <= 1
    assert rep.f1 <= min(2 * rep.precision, 2 * rep.recall) + 1e-12
    assert rep.tp + rep.fp + rep.tn + rep.fn == len(pairs)
    if rep.precision + rep.recall > 0:
        assert rep.f1 == pytest.approx(2 * rep.precision * rep.recall / (rep.precision + rep.recall))
    else:
        assert rep.f1 == 0


def test_evaluate_does_not_mutate(graph):
    vocab = Vocabulary([graph])
    items = build_eval_set(graph.triples, graph, 3, 0)
    model = LinkPredModel(len(vocab), 4)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    triples = set(graph.triples)
    r1, s1 = evaluate(model, vocab, {"left": 0.5, "right": 0.5}, items)
    r2, s2 = evaluate(model, vocab, {"left": 0.5, "right": 0.5}, items)
    assert r1 == r2 and np.array_equal(s1, s2)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())
    assert graph.triples == triples


def test_item_csv(tmp_path, graph):
    vocab = Vocabulary([graph])
    items = build_eval_set(sorted(graph.triples)[:2], graph, 2, 0)
    model = LinkPredModel(len(vocab), 4)
    _, scores = evaluate(model, vocab, {"left": 0.5, "right": 0.5}, items)
    write_items(items, scores, {"left": 0.5, "right": 0.5}, tmp_path / "items.csv")
    lines = (tmp_path / "items.csv").read_text().splitlines()
    assert lines[0] == "metabolite,direction,gene,score,label,predicted"
    assert len(lines) == 7


def _aligned(n):
    a = make_graph("A", [], [gene("A", f"g{i}") for i in range(n)])
    b = make_graph("B", [], [gene("B", f"g{i}") for i in range(n)])
    vocab = Vocabulary([a, b])
    links = [InterLink(gene("A", f"g{i}"), gene("B", f"g{i}")) for i in range(n)]
    return vocab, links


def test_hits1_zero_distance_pair():
    vocab, links = _aligned(1)
    emb = torch.tensor([[1.0, 2.0], [1.0, 2.0]], dtype=torch.float64)
    assert eval_alignment(emb, vocab, links) == 1.0


def test_hits1_perfect_embedding():
    vocab, links = _aligned(5)
    base = torch.as_tensor(np.random.default_rng(0).normal(size=(5, 6)))
    assert eval_alignment(torch.cat([base, base]), vocab, links) == 1.0


def test_hits1_random_embeddings_near_chance():
    n = 10
    vocab, links = _aligned(n)
    rng = np.random.default_rng(3)
    rates = [eval_alignment(torch.as_tensor(rng.normal(size=(2 * n, 8))), vocab, links) for _ in range(400)]
    # mean of 4000 Bernoulli(0.1) draws: standard error about 0.005
    assert abs(np.mean(rates) - 1 / n) < 0.02


def test_hits1_empty():
    vocab, _ = _aligned(2)
    with pytest.raises(ValueError):
        eval_alignment(torch.zeros(4, 2), vocab, [])
