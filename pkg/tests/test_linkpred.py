import cmath

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from metalign.graph import Direction, Triple, Vocabulary, gene, metabolite
from metalign.linkpred import (
    LPConfig,
    LinkPredModel,
    MissingEmbedding,
    best_threshold,
    classify,
    load_lp_checkpoint,
    lp_loss,
    predict,
    save_lp_checkpoint,
    score,
    select_thresholds,
    train_lp,
)

from conftest import make_graph


def _one_triple_model(variant, dim=4, seed=0):
    g = make_graph("A", [("m", "left", "g")])
    vocab = Vocabulary([g])
    model = LinkPredModel(len(vocab), dim, variant, seed)
    t = Triple(metabolite("A", "m"), Direction.LEFT, gene("A", "g"))
    return vocab, model, t


def _set(model, vocab, t, m, r, g):
    with torch.no_grad():
        model.vertex_emb[vocab.index[t.metabolite]] = torch.as_tensor(m)
        model.vertex_emb[vocab.index[t.gene]] = torch.as_tensor(g)
        model.relation_emb[0] = torch.as_tensor(r)


def test_transe_translation_identity(rng):
    vocab, model, t = _one_triple_model("transe")
    m, r = rng.normal(size=4), rng.normal(size=4)
    _set(model, vocab, t, m, r, m + r)
    assert score(model, vocab, t) == pytest.approx(0.0, abs=1e-12)


def test_rotate_zero_phase_identity(rng):
    vocab, model, t = _one_triple_model("rotate")
    m = rng.normal(size=4)
    _set(model, vocab, t, m, np.zeros(2), m)
    assert score(model, vocab, t) == 0.0


@pytest.mark.parametrize("variant", ["transe", "rotate", "distmult"])
def test_score_formula_oracle(variant, rng):
    vocab, model, t = _one_triple_model(variant)
    m, g = rng.normal(size=4), rng.normal(size=4)
    r = rng.normal(size=2 if variant == "rotate" else 4)
    _set(model, vocab, t, m, r, g)
    if variant == "transe":
        expected = sum(abs(m[i] + r[i] - g[i]) for i in range(4))
    elif variant == "distmult":
        expected = -sum(m[i] * r[i] * g[i] for i in range(4))
    else:
        expected = 0.0
        for k in range(2):
            z = complex(m[k], m[k + 2]) * cmath.exp(1j * r[k]) - complex(g[k], g[k + 2])
            expected += abs(z)
    assert score(model, vocab, t) == pytest.approx(expected, rel=1e-12)


def test_exactly_two_relations():
    for variant in ("transe", "rotate", "distmult"):
        assert LinkPredModel(3, 4, variant).relation_emb.shape[0] == 2
    with pytest.raises(ValueError):
        LinkPredModel(3, 5, "rotate")
    with pytest.raises(ValueError):
        LinkPredModel(3, 4, "complex")


def test_missing_embedding():
    vocab, model, _ = _one_triple_model("transe")
    with pytest.raises(MissingEmbedding):
        score(model, vocab, Triple(metabolite("A", "zz"), Direction.LEFT, gene("A", "g")))


@pytest.mark.parametrize("variant", ["transe", "rotate"])
@given(seed=st.integers(0, 10_000))
def test_distance_scores_nonnegative(variant, seed):
    model = LinkPredModel(6, 4, variant, seed)
    idx = torch.as_tensor(np.random.default_rng(seed).integers(0, 2, (20, 3)) * [3, 1, 2])
    assert bool(torch.all(model(idx) >= 0))


@given(st.integers(0, 10_000), st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_transe_translation_invariance(seed, shift):
    model = LinkPredModel(2, 4, "transe", seed)
    idx = torch.tensor([[0, 0, 1], [0, 1, 1]])
    before = model(idx)
    with torch.no_grad():
        model.vertex_emb += torch.tensor(shift, dtype=torch.float64)
    torch.testing.assert_close(model(idx), before)


def _loss_of(f_pos, f_neg, beta):
    # TransE on a line: the score of (0, r, j) is |x_j| when r = 0 and x_0 = 0
    model = LinkPredModel(3, 1, "transe")
    with torch.no_grad():
        model.vertex_emb[:] = torch.tensor([[0.0], [f_pos], [f_neg]], dtype=torch.float64)
        model.relation_emb.zero_()
    return lp_loss(model, torch.tensor([[0, 0, 1]]), torch.tensor([[[0, 0, 2]]]), beta).item()


def test_loss_examples():
    assert _loss_of(0.0, 2.0, 1.0) == 0.0
    assert _loss_of(1.0, 0.5, 1.0) == 1.5


def test_loss_errors():
    model = LinkPredModel(3, 2)
    with pytest.raises(ValueError):
        lp_loss(model, torch.zeros(0, 3, dtype=torch.int64), torch.zeros(0, 1, 3, dtype=torch.int64))
    with pytest.raises(ValueError):
        lp_loss(model, torch.tensor([[0, 0, 1]]), torch.tensor([[[0, 0, 2]]]), 0.0)


@given(st.integers(0, 10_000), st.floats(0.1, 3))
def test_hinge_zero_iff_margins_met(seed, beta):
    rng = np.random.default_rng(seed)
    model = LinkPredModel(5, 3, "transe", seed)
    pos = torch.as_tensor(np.stack([rng.integers(0, 5, 4), rng.integers(0, 2, 4), rng.integers(0, 5, 4)], 1))
    neg = torch.as_tensor(np.stack([rng.integers(0, 5, (4, 3)), rng.integers(0, 2, (4, 3)), rng.integers(0, 5, (4, 3))], -1))
    loss = lp_loss(model, pos, neg, beta).item()
    ok = bool(torch.all(model(neg) >= model(pos)[:, None] + beta))
    assert loss >= 0 and (loss == 0) == ok


def test_classify_boundary_inclusive():
    vocab, model, t = _one_triple_model("transe")
    s = score(model, vocab, t)
    assert classify(model, vocab, {"left": s, "right": None}, t) == "valid"
    assert classify(model, vocab, {"left": np.nextafter(s, -np.inf), "right": None}, t) == "invalid"
    assert classify(model, vocab, {"left": None, "right": s}, t) == "invalid"


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(-10, 10), st.floats(0, 5))
def test_classification_monotone_in_tau(scores, tau, grow):
    s = np.array(scores)
    rel = np.zeros(len(s), dtype=np.int64)
    low = predict(s, rel, {"left": tau})
    high = predict(s, rel, {"left": tau + grow})
    assert np.all(high[low])


def test_best_threshold_brute_force(rng):
    for _ in range(30):
        s = np.round(rng.normal(size=25), 1)
        y = rng.random(25) < 0.3
        if not y.any():
            continue

        def f1(c):
            p = s <= c
            tp, fp, fn = (p & y).sum(), (p & ~y).sum(), (~p & y).sum()
            return 2 * tp / (2 * tp + fp + fn)

        cands = sorted(set(s.tolist()))
        best = max(f1(c) for c in cands)
        expected = min(c for c in cands if f1(c) == best)
        assert best_threshold(s, y) == expected


def test_no_positive_labels_gives_none():
    assert best_threshold(np.array([1.0, 2.0]), np.array([False, False])) is None
    tau = select_thresholds(np.array([1.0, 2.0]), np.array([True, False]), np.array([0, 0]))
    assert tau == {"left": 1.0, "right": None}


def _matching_problem():
    # every gene has exactly one metabolite: TransE can fit it exactly
    rows = [(f"m{i}", "left" if i % 2 else "right", f"g{i}") for i in range(8)]
    g = make_graph("A", rows)
    vocab = Vocabulary([g])
    train = vocab.encode(sorted(g.triples))
    from metalign.evaluation import build_eval_set

    items = build_eval_set(g.triples, g, 5, 0)
    valid = vocab.encode([it.triple for it in items])
    labels = np.array([it.label for it in items])
    return vocab, train, valid, labels


def test_separable_set_reaches_perfect_validation_f1():
    vocab, train, valid, labels = _matching_problem()
    res = train_lp(vocab, train, valid, labels, LPConfig(dim=16, lr=0.05, epochs=100, batch_size=8, eval_every=5, seed=0))
    assert res.best_valid_f1 == 1.0


def test_training_deterministic_and_checkpoint_roundtrip(tmp_path):
    vocab, train, valid, labels = _matching_problem()
    cfg = LPConfig(dim=8, lr=0.01, epochs=10, batch_size=4, eval_every=2, seed=7)
    a = train_lp(vocab, train, valid, labels, cfg)
    b = train_lp(vocab, train, valid, labels, cfg)
    assert a.tau == b.tau and a.best_epoch == b.best_epoch and a.trace == b.trace
    save_lp_checkpoint(a, vocab, cfg, tmp_path / "lp.pt")
    model, tau = load_lp_checkpoint(tmp_path / "lp.pt", vocab)
    assert tau == a.tau
    torch.testing.assert_close(model(torch.as_tensor(valid)), a.model(torch.as_tensor(valid)))


def test_default_config_values():
    cfg = LPConfig()
    assert (cfg.lr, cfg.neg_rate, cfg.margin, cfg.dim) == (5e-4, 10, 1.0, 512)
