"""Library routines against plain-loop enumerations on small random instances.

The oracles use only Python lists and loops, never the library's distance or
ranking helpers, so an agreement is an independent check.
"""
import itertools

import numpy as np
import pytest
import torch

from metalign.dangling import DanglingState, update_candidates
from metalign.graph import InterLink, Kind, Triple, Vocabulary, gene, metabolite
from metalign.transfer import infer_inter_links, transfer_cross, transfer_within

from conftest import random_graph

N_INSTANCES = 50


def _instance(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(x) for x in rng.integers(2, 7, 4)]  # <= 12 vertices per graph
    a = random_graph("A", sizes[0], sizes[1], int(rng.integers(1, sizes[0] * sizes[1] + 1)), rng)
    b = random_graph("B", sizes[2], sizes[3], int(rng.integers(1, sizes[2] * sizes[3] + 1)), rng)
    vocab = Vocabulary([a, b])
    dim = int(rng.integers(2, 5))
    if seed % 3 == 0:
        # small integer grid so exact distance ties occur
        emb = rng.integers(0, 3, (len(vocab), dim)).astype(np.float64) + 0.5
    else:
        emb = rng.normal(size=(len(vocab), dim))
    return rng, a, b, vocab, emb


def _dist(x, y):
    sx = sum(abs(v) for v in x) or 1e-12
    sy = sum(abs(v) for v in y) or 1e-12
    return sum(abs(p / sx - q / sy) for p, q in zip(x, y))


def _block(vocab, tag, kind, dead=()):
    # vertices in ascending id order, which is the tie-break order
    return sorted(v for v in vocab.vertices if v.graph_tag == tag and v.kind is kind and v not in dead)


def _nn(v, pool, vec):
    best = None
    for u in pool:
        d = _dist(vec[v], vec[u])
        if best is None or d < best[0]:
            best = (d, u)
    return best


def oracle_infer(vocab, emb, gamma, dead, known):
    vec = {v: list(emb[i]) for i, v in enumerate(vocab.vertices)}
    known = {(l.left, l.right) for l in known}
    out = set()
    for kind in Kind:
        left, right = _block(vocab, "A", kind, dead), _block(vocab, "B", kind, dead)
        if not left or not right:
            continue
        for a in left:
            d, b = _nn(a, right, vec)
            if _nn(b, left, vec)[1] == a and d < gamma and (a, b) not in known:
                out.add(InterLink(a, b))
    return out


def oracle_candidates(vocab, emb, alpha, theta, previous, dead):
    vec = {v: list(emb[i]) for i, v in enumerate(vocab.vertices)}
    out = {}
    for own, other in (("A", "B"), ("B", "A")):
        for kind in Kind:
            mine, theirs = _block(vocab, own, kind, dead), _block(vocab, other, kind, dead)
            if not mine or not theirs:
                continue
            for v in mine:
                if _nn(v, theirs, vec)[0] <= alpha:
                    continue
                ranks = []
                for u in theirs:
                    order = sorted(mine, key=lambda w: (_dist(vec[w], vec[u]), w))
                    ranks.append(order.index(v) + 1)
                if all(r > theta * len(mine) for r in ranks):
                    out[v] = previous.get(v, 0) + 1
    return out


def oracle_cross(inter, triples):
    linked = {}
    for l in inter:
        linked.setdefault(l.left, set()).add(l.right)
        linked.setdefault(l.right, set()).add(l.left)
    metabolites = {t.metabolite for t in triples} | {v for v in linked if v.kind is Kind.METABOLITE}
    genes = {t.gene for t in triples} | {v for v in linked if v.kind is Kind.GENE}
    out = set()
    for m, g, t in itertools.product(metabolites, genes, triples):
        m_ok = m == t.metabolite or m in linked.get(t.metabolite, ())
        g_ok = g == t.gene or g in linked.get(t.gene, ())
        if m_ok and g_ok and (m, g) != (t.metabolite, t.gene):
            out.add(Triple(m, t.direction, g))
    return out - set(triples)


def oracle_within(inter, triples):
    out = set()
    for l1, l2 in itertools.product(inter, repeat=2):
        for flip in (False, True):
            x1, y1 = (l1.right, l1.left) if flip else (l1.left, l1.right)
            x2, y2 = (l2.right, l2.left) if flip else (l2.left, l2.right)
            for t in triples:
                if t.metabolite == x1 and t.gene == x2 and y1.graph_tag == y2.graph_tag:
                    out.add(Triple(y1, t.direction, y2))
    return out - set(triples)


def _random_links(rng, vocab, n):
    links = set()
    for _ in range(n):
        kind = Kind.GENE if rng.random() < 0.5 else Kind.METABOLITE
        left, right = _block(vocab, "A", kind), _block(vocab, "B", kind)
        links.add(InterLink(left[rng.integers(len(left))], right[rng.integers(len(right))]))
    return sorted(links)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_infer_inter_links_matches_oracle(seed):
    rng, a, b, vocab, emb = _instance(seed)
    gamma = float(rng.uniform(0.05, 2.0))
    dead = set(rng.choice(vocab.vertices, int(rng.integers(0, 3)), replace=False).tolist())
    known = _random_links(rng, vocab, 2)
    got = infer_inter_links(torch.as_tensor(emb), vocab, "A", "B", gamma, dead, known)
    assert got == oracle_infer(vocab, emb, gamma, dead, known)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_update_candidates_matches_oracle(seed):
    rng, a, b, vocab, emb = _instance(seed)
    alpha = float(rng.uniform(0.0, 1.0))
    theta = float(rng.uniform(0.05, 0.95))
    dead = frozenset(rng.choice(vocab.vertices, int(rng.integers(0, 3)), replace=False).tolist())
    previous = {v: int(rng.integers(1, 4)) for v in rng.choice(vocab.vertices, 3).tolist() if v not in dead}
    state = DanglingState(alpha=alpha, theta=theta, k=10, candidates=previous, eliminated=dead)
    got = update_candidates(state, torch.as_tensor(emb), vocab, "A", "B").candidates
    assert got == oracle_candidates(vocab, emb, alpha, theta, previous, dead)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_transfer_cross_matches_oracle(seed):
    rng, a, b, vocab, _ = _instance(seed)
    inter = _random_links(rng, vocab, int(rng.integers(0, 7)))
    assert transfer_cross(inter, a.triples, b.triples) == oracle_cross(inter, a.triples | b.triples)


@pytest.mark.parametrize("seed", range(N_INSTANCES))
def test_transfer_within_matches_oracle(seed):
    rng, a, b, vocab, _ = _instance(seed)
    inter = _random_links(rng, vocab, int(rng.integers(0, 7)))
    assert transfer_within(inter, a.triples, b.triples) == oracle_within(inter, a.triples | b.triples)
