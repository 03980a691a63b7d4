"""Dangling-vertex candidates, adjacency down-weighting and elimination.

A vertex ``v`` of one graph is a candidate when, on the scale-free distance,

* its nearest same-kind vertex in the other graph is farther than ``alpha``, and
* for every same-kind vertex ``u`` of the other graph, ``v`` ranks after the
  first ``theta * n`` vertices of its own graph ordered by distance to ``u``
  (ties broken by vertex id), ``n`` being the number of live same-kind
  vertices of ``v``'s graph.

Candidates accumulate tenure one epoch at a time and are eliminated for good
once their tenure reaches ``k``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .distance import normalized_pairwise
from .graph import InterLink, Kind, MetabolicGraph, VertexId, Vocabulary

DEFAULT_ALPHA = 0.7


def linear_schedule(k: int) -> Callable[[int], float]:
    return lambda tenure: max(0.0, 1.0 - tenure / k)


@dataclass(frozen=True)
class DanglingState:
    alpha: float = DEFAULT_ALPHA
    theta: float = 0.8
    k: int = 5
    candidates: dict[VertexId, int] = field(default_factory=dict)
    eliminated: frozenset[VertexId] = frozenset()
    nn_distance: dict[VertexId, float] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        if self.k < 1:
            raise ValueError("tenure limit k must be >= 1")

    def weight(self, tenure: int) -> float:
        return linear_schedule(self.k)(tenure)

    def vertex_weights(self, vocab: Vocabulary) -> np.ndarray:
        w = np.ones(len(vocab))
        for v, tenure in self.candidates.items():
            w[vocab.index[v]] = self.weight(tenure)
        for v in self.eliminated:
            w[vocab.index[v]] = 0.0
        return w


def compute_alpha(
    initial: torch.Tensor,
    vocab: Vocabulary,
    seeds: Sequence[InterLink],
    mode: str = "fixed",
    fixed: float = DEFAULT_ALPHA,
    metric: str = "scale_free",
) -> float:
    """Largest distance between seed endpoints in the initial space, or the
    fixed value when ``mode == "fixed"``.

    ``metric="scale_free"`` (default) matches the distance the candidate test
    compares against; ``"manhattan"`` gives the raw L1 maximum.
    """
    if mode == "fixed":
        return fixed
    if mode != "computed":
        raise ValueError(f"unknown alpha mode {mode!r}")
    if not seeds:
        raise ValueError("computed alpha needs at least one seed link")
    idx = vocab.index
    a = initial[[idx[s.left] for s in seeds]]
    b = initial[[idx[s.right] for s in seeds]]
    if metric == "manhattan":
        d = (a - b).abs().sum(-1)
    elif metric == "scale_free":
        d = torch.diagonal(normalized_pairwise(a, b))
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return float(d.max())


def rank_matrix(dist: torch.Tensor) -> np.ndarray:
    """``R[i, j]`` = 1-based position of row ``i`` when rows are sorted by
    increasing ``dist[:, j]`` (stable, so equal distances keep row order)."""
    order = np.argsort(dist.numpy(), axis=0, kind="stable")
    ranks = np.empty_like(order)
    cols = np.arange(dist.shape[1])
    ranks[order, cols[None, :]] = np.arange(1, dist.shape[0] + 1)[:, None]
    return ranks


def dangling_condition(
    embeddings: torch.Tensor,
    vocab: Vocabulary,
    tag_a: str,
    tag_b: str,
    alpha: float,
    theta: float,
    eliminated: Iterable[VertexId] = (),
) -> dict[VertexId, float]:
    """Vertices currently satisfying both conditions, mapped to their NN distance."""
    dead = {vocab.index[v] for v in eliminated}
    hits: dict[VertexId, float] = {}
    for own, other in ((tag_a, tag_b), (tag_b, tag_a)):
        for kind in (Kind.GENE, Kind.METABOLITE):
            rows = np.array([i for i in vocab.ids(own, kind) if i not in dead], dtype=np.int64)
            cols = np.array([j for j in vocab.ids(other, kind) if j not in dead], dtype=np.int64)
            if len(rows) == 0 or len(cols) == 0:
                continue
            dist = normalized_pairwise(embeddings[rows], embeddings[cols])
            nn_dist = dist.min(dim=1).values.numpy()
            far = nn_dist > alpha
            never_close = rank_matrix(dist).min(axis=1) > theta * len(rows)
            for i in np.flatnonzero(far & never_close):
                hits[vocab.vertices[rows[i]]] = float(nn_dist[i])
    return hits


def update_candidates(
    state: DanglingState, embeddings: torch.Tensor, vocab: Vocabulary, tag_a: str, tag_b: str
) -> DanglingState:
    """One epoch of tenure bookkeeping; eliminated vertices are never re-admitted."""
    hits = dangling_condition(
        embeddings, vocab, tag_a, tag_b, state.alpha, state.theta, state.eliminated
    )
    candidates = {v: state.candidates.get(v, 0) + 1 for v in sorted(hits) if v not in state.eliminated}
    return replace(state, candidates=candidates, nn_distance=hits)


def finalize(state: DanglingState) -> DanglingState:
    done = {v for v, t in state.candidates.items() if t >= state.k}
    if not done:
        return state
    return replace(
        state,
        candidates={v: t for v, t in state.candidates.items() if v not in done},
        eliminated=state.eliminated | done,
    )


def apply_downweights(
    state: DanglingState, graph: MetabolicGraph
) -> dict[VertexId, list[tuple[VertexId, object, float]]]:
    """Adjacency of ``graph`` with each edge weighted by its weaker endpoint."""

    def w(v: VertexId) -> float:
        if v in state.eliminated:
            return 0.0
        if v in state.candidates:
            return state.weight(state.candidates[v])
        return 1.0

    return {
        v: [(u, d, min(w(v), w(u))) for u, d, _ in nbrs] for v, nbrs in graph.adjacency.items()
    }


@dataclass
class DanglingTracker:
    """Runs the per-epoch update/finalize cycle and keeps the report rows."""

    state: DanglingState
    rows: list[tuple] = field(default_factory=list)

    def epoch(self, epoch: int, embeddings: torch.Tensor, vocab: Vocabulary, tag_a: str, tag_b: str):
        before = self.state.eliminated
        self.state = finalize(update_candidates(self.state, embeddings, vocab, tag_a, tag_b))
        for v in sorted(self.state.candidates):
            self.rows.append(
                (epoch, str(v), "candidate", self.state.candidates[v], self.state.nn_distance.get(v, ""))
            )
        for v in sorted(self.state.eliminated - before):
            self.rows.append((epoch, str(v), "eliminated", self.state.k, self.state.nn_distance.get(v, "")))
        return self.state

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "vertex_id", "status", "tenure", "nn_distance"])
            for r in self.rows:
                w.writerow([r[0], r[1], r[2], r[3], repr(r[4]) if isinstance(r[4], float) else r[4]])
