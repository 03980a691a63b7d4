"""Structure encoder for graph alignment.

Both graphs are encoded as one disjoint union by a single parameter set, so
distances between vertices of different graphs are meaningful. Per layer::

    agg  = act(norm_adj @ h @ W)                 (weighted, self loops)
    gate = sigmoid(h @ G.T + b)
    h'   = gate * agg + (1 - gate) * h

followed by one attention readout ``[v0, attend(h_L)]`` projected back to
``dim``, where ``v0`` is the input embedding of the vertex.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .distance import normalized_pairwise
from .features import FeatureMatrix, FusionLayer, uniform_
from .graph import InterLink, Kind, MetabolicGraph, Triple, Vocabulary

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.2


class DivergenceError(RuntimeError):
    pass


# ------------------------------------------------------------------ graph tensors


def undirected_edges(vocab: Vocabulary, triples: Sequence[Triple] | set[Triple]) -> np.ndarray:
    """Unique (metabolite, gene) vertex pairs; both directions of a pair share one edge."""
    pairs = {(vocab.index[t.metabolite], vocab.index[t.gene]) for t in triples}
    return np.array(sorted(pairs), dtype=np.int64).reshape(-1, 2)


def edge_weights(edges: np.ndarray, vertex_weight: np.ndarray) -> torch.Tensor:
    """An edge takes the smaller weight of its two endpoints."""
    w = np.minimum(vertex_weight[edges[:, 0]], vertex_weight[edges[:, 1]])
    return torch.as_tensor(w, dtype=torch.float64)


def _directed(edges: torch.Tensor, weight: torch.Tensor):
    src = torch.cat([edges[:, 0], edges[:, 1]])
    dst = torch.cat([edges[:, 1], edges[:, 0]])
    return src, dst, torch.cat([weight, weight])


# -------------------------------------------------------------------- primitives


def gcn_layer(
    h: torch.Tensor, edges: torch.Tensor, weight: torch.Tensor, layer_weight: torch.Tensor
) -> torch.Tensor:
    """Symmetric-normalised weighted aggregation with self loops, then GELU.

    ``edges`` is ``[E, 2]`` (undirected), ``weight`` is ``[E]`` in [0, 1]. An edge of
    weight 0 contributes nothing, not even to the degree.
    """
    if h.shape[1] != layer_weight.shape[0]:
        raise ValueError(f"embedding dim {h.shape[1]} != layer input dim {layer_weight.shape[0]}")
    hw = h @ layer_weight
    src, dst, w = _directed(edges, weight)
    deg = torch.ones(h.shape[0], dtype=h.dtype).index_add(0, dst, w)
    coef = w / torch.sqrt(deg[src] * deg[dst])
    agg = hw / deg[:, None]
    agg = agg.index_add(0, dst, coef[:, None] * hw[src])
    return F.gelu(agg)


def highway(
    v_in: torch.Tensor, v_agg: torch.Tensor, gate_weight: torch.Tensor, gate_bias: torch.Tensor | None = None
) -> torch.Tensor:
    if v_in.shape != v_agg.shape:
        raise ValueError(f"shape mismatch {tuple(v_in.shape)} vs {tuple(v_agg.shape)}")
    logits = v_in @ gate_weight.T
    if gate_bias is not None:
        logits = logits + gate_bias
    gate = torch.sigmoid(logits)
    return gate * v_agg + (1 - gate) * v_in


def attention_logits(z: torch.Tensor, src: torch.Tensor, dst: torch.Tensor, a_src, a_dst) -> torch.Tensor:
    """Pre-activation attention score for each directed edge ``src -> dst``."""
    return z[dst] @ a_dst + z[src] @ a_src


def gat_aggregate(
    h: torch.Tensor,
    edges: torch.Tensor,
    weight: torch.Tensor,
    att_weight: torch.Tensor,
    a_src: torch.Tensor,
    a_dst: torch.Tensor,
    return_attention: bool = False,
):
    """Attention-weighted neighbour mean (no self loop).

    Coefficients are ``w_ij exp(e_ij) / sum_k w_ik exp(e_ik)``: an edge weight
    of 0 removes the neighbour exactly. Vertices without a surviving neighbour
    aggregate to zero.
    """
    if h.shape[1] != att_weight.shape[1]:
        raise ValueError(f"embedding dim {h.shape[1]} != attention input dim {att_weight.shape[1]}")
    z = h @ att_weight.T
    src, dst, w = _directed(edges, weight)
    e = F.leaky_relu(attention_logits(z, src, dst, a_src, a_dst), LEAKY_SLOPE)
    n = h.shape[0]
    with torch.no_grad():
        shift = torch.full((n,), -math.inf, dtype=h.dtype).scatter_reduce(
            0, dst, torch.where(w > 0, e, torch.full_like(e, -math.inf)), reduce="amax"
        )
        shift = torch.where(torch.isfinite(shift), shift, torch.zeros_like(shift))
    # masked edges get exponent 0 so a huge logit cannot turn 0 * inf into nan
    ex = w * torch.exp(torch.where(w > 0, e - shift[dst], torch.zeros_like(e)))
    denom = torch.zeros(n, dtype=h.dtype).index_add(0, dst, ex)
    alpha = ex / torch.where(denom > 0, denom, torch.ones_like(denom))[dst]
    out = torch.zeros_like(z).index_add(0, dst, alpha[:, None] * z[src])
    if return_attention:
        return out, (src, dst, alpha)
    return out


def alignment_loss(
    out: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor, margin: float
) -> torch.Tensor:
    """Margin ranking loss over Manhattan distances.

    ``positives`` is ``[P, 2]`` vertex indices, ``negatives`` is ``[P, K, 2]``; the
    loss sums ``max(0, d(pos) - d(neg) + margin)`` over all P*K pairs.
    """
    if margin <= 0:
        raise ValueError("margin must be > 0")
    if len(positives) == 0:
        raise ValueError("alignment loss needs at least one positive link")
    d_pos = (out[positives[:, 0]] - out[positives[:, 1]]).abs().sum(-1)
    d_neg = (out[negatives[..., 0]] - out[negatives[..., 1]]).abs().sum(-1)
    return F.relu(d_pos[:, None] - d_neg + margin).sum()


# ------------------------------------------------------------------------- model


class AlignmentEncoder(nn.Module):
    """GCN + highway stack with an attention readout.

    The input block is either a :class:`FusionLayer` over fixed feature
    vectors (its projections are trained) or a free embedding table with the
    ``random_init`` law when no features are used.
    """

    def __init__(
        self,
        n_vertices: int,
        dim: int = 512,
        layers: int = 2,
        features: FeatureMatrix | None = None,
        proj_dim: int = 128,
        seed: int = 0,
    ):
        super().__init__()
        if layers not in (1, 2, 3):
            raise ValueError("layer count must be 1, 2 or 3")
        gen = torch.Generator().manual_seed(seed)
        self.dim = dim
        self.features = features
        if features is not None:
            self.fusion = FusionLayer(
                features.text.shape[1], features.smile_dim, features.seq_dim, proj_dim, dim, gen
            )
            self.embedding = None
        else:
            self.fusion = None
            self.embedding = nn.Parameter(uniform_(torch.empty(n_vertices, dim, dtype=torch.float64), dim, gen))
        self.gcn = nn.ParameterList()
        self.gate_w = nn.ParameterList()
        self.gate_b = nn.ParameterList()
        for _ in range(layers):
            self.gcn.append(nn.Parameter(uniform_(torch.empty(dim, dim, dtype=torch.float64), dim, gen)))
            self.gate_w.append(nn.Parameter(uniform_(torch.empty(dim, dim, dtype=torch.float64), dim, gen)))
            # carry-biased start: the gate initially favours the input
            self.gate_b.append(nn.Parameter(torch.full((dim,), -1.0, dtype=torch.float64)))
        self.att_weight = nn.Parameter(uniform_(torch.empty(dim, dim, dtype=torch.float64), dim, gen))
        self.a_src = nn.Parameter(uniform_(torch.empty(dim, dtype=torch.float64), dim, gen))
        self.a_dst = nn.Parameter(uniform_(torch.empty(dim, dtype=torch.float64), dim, gen))
        self.out_proj = nn.Parameter(uniform_(torch.empty(dim, 2 * dim, dtype=torch.float64), 2 * dim, gen))

    def initial(self) -> torch.Tensor:
        if self.fusion is not None:
            f = self.features
            return self.fusion(f.text, f.modality, f.is_gene)
        return self.embedding

    def forward(self, edges: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
        v0 = self.initial()
        h = v0
        for w, gw, gb in zip(self.gcn, self.gate_w, self.gate_b):
            h = highway(h, gcn_layer(h, edges, weight, w), gw, gb)
        att = gat_aggregate(h, edges, weight, self.att_weight, self.a_src, self.a_dst)
        return torch.cat([v0, att], dim=1) @ self.out_proj.T


# ---------------------------------------------------------------------- training


@dataclass
class AlignConfig:
    dim: int = 512
    layers: int = 2
    lr: float = 4e-4
    margin: float = 5.0
    neg_rate: int = 10
    epochs: int = 50
    proj_dim: int = 128
    seed: int = 0


def sample_link_negatives(
    positives: np.ndarray, vocab: Vocabulary, rate: int, rng: np.random.Generator, known: set | None = None
) -> np.ndarray:
    """``[P, rate, 2]``: each negative swaps one endpoint for another vertex of
    the same graph and kind (side chosen by a fair coin)."""
    lo = np.zeros(len(vocab), dtype=np.int64)
    hi = np.zeros(len(vocab), dtype=np.int64)
    for a, b in vocab.blocks.values():
        lo[a:b], hi[a:b] = a, b
    known = known or set()
    rep = np.repeat(positives, rate, axis=0)
    out = rep.copy()

    def draw(rows):
        side = (rng.random(len(rows)) < 0.5).astype(np.int64)
        cur = rep[rows, side]
        size = hi[cur] - lo[cur]
        side = np.where(size < 2, 1 - side, side)
        cur = rep[rows, side]
        size = hi[cur] - lo[cur]
        r = lo[cur] + (rng.random(len(rows)) * np.maximum(size - 1, 1)).astype(np.int64)
        r = np.where(r >= cur, r + 1, r)
        r = np.where(size < 2, cur, r)
        out[rows] = rep[rows]
        out[rows, side] = r

    rows = np.arange(len(rep))
    draw(rows)
    for _ in range(10):
        bad = np.array([(int(a), int(b)) in known for a, b in out], dtype=bool)
        if not bad.any():
            break
        draw(np.flatnonzero(bad))
    return out.reshape(len(positives), rate, 2)


class AlignmentTrainer:
    """Owns the encoder, its optimiser and the per-vertex adjacency weights.

    The pipeline drives it epoch by epoch so that dangling updates and link
    inference can be interleaved with training.
    """

    def __init__(
        self,
        graph_a: MetabolicGraph,
        graph_b: MetabolicGraph,
        config: AlignConfig,
        features: Mapping | None = None,
        structure: tuple[set[Triple], set[Triple]] | None = None,
    ):
        self.graphs = (graph_a, graph_b)
        self.config = config
        self.vocab = Vocabulary([graph_a, graph_b])
        triples_a, triples_b = structure or (graph_a.triples, graph_b.triples)
        self.edges_np = undirected_edges(self.vocab, set(triples_a) | set(triples_b))
        self.edges = torch.as_tensor(self.edges_np)
        self.vertex_weight = np.ones(len(self.vocab))
        fm = None
        if features is not None:
            table: dict = {}
            for part in features:
                table.update(part)
            fm = FeatureMatrix.stack(self.vocab.vertices, table)
        torch.manual_seed(config.seed)
        self.model = AlignmentEncoder(len(self.vocab), config.dim, config.layers, fm, config.proj_dim, config.seed)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr)
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        with torch.no_grad():
            self.v0 = self.model.initial().detach().clone()
        self.trace: list[dict] = []

    # -- state

    def set_structure(self, triples: set[Triple]) -> None:
        """Replace the adjacency (e.g. after transferred triples were added)."""
        self.edges_np = undirected_edges(self.vocab, triples)
        self.edges = torch.as_tensor(self.edges_np)

    def set_vertex_weights(self, weights: np.ndarray) -> None:
        self.vertex_weight = np.asarray(weights, dtype=np.float64)

    def weights(self) -> torch.Tensor:
        return edge_weights(self.edges_np, self.vertex_weight)

    def embeddings(self) -> torch.Tensor:
        with torch.no_grad():
            return self.model(self.edges, self.weights())

    def link_index(self, links: Sequence[InterLink]) -> np.ndarray:
        idx = self.vocab.index
        return np.array([(idx[l.left], idx[l.right]) for l in sorted(links)], dtype=np.int64).reshape(-1, 2)

    # -- training

    def step(self, links: Sequence[InterLink]) -> dict:
        if not links:
            raise ValueError("alignment needs at least one positive link")
        pos = self.link_index(links)
        known = {(int(a), int(b)) for a, b in pos}
        neg = sample_link_negatives(pos, self.vocab, self.config.neg_rate, self.rng, known)
        self.model.train()
        self.optimizer.zero_grad()
        out = self.model(self.edges, self.weights())
        loss = alignment_loss(out, torch.as_tensor(pos), torch.as_tensor(neg), self.config.margin)
        if not torch.isfinite(loss):
            raise DivergenceError(f"alignment loss is {loss.item()} at epoch {self.epoch}")
        loss.backward()
        self.optimizer.step()
        self.epoch += 1
        with torch.no_grad():
            d = (out[pos[:, 0]] - out[pos[:, 1]]).abs().sum(-1).mean().item()
        row = {"epoch": self.epoch, "loss": loss.item(), "mean_seed_distance": d}
        self.trace.append(row)
        log.debug("align epoch %d loss %.6f seed distance %.6f", self.epoch, row["loss"], d)
        return row

    def train(self, links: Sequence[InterLink], epochs: int | None = None) -> list[dict]:
        return [self.step(links) for _ in range(epochs or self.config.epochs)]

    # -- persistence

    def save_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "rng": self.rng.bit_generator.state,
                "epoch": self.epoch,
                "vertex_weight": self.vertex_weight,
                "config": asdict(self.config),
                "vertices": [str(v) for v in self.vocab.vertices],
            },
            path,
        )

    def load_checkpoint(self, path: str | Path) -> None:
        state = torch.load(path, weights_only=False)
        if state["vertices"] != [str(v) for v in self.vocab.vertices]:
            raise ValueError("checkpoint vertex set does not match the graphs")
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng"]
        self.epoch = state["epoch"]
        self.vertex_weight = state["vertex_weight"]

    def write_trace(self, path: str | Path) -> None:
        write_loss_trace(self.trace, path)


def write_loss_trace(trace: Sequence[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "mean_seed_distance"])
        for row in trace:
            w.writerow([row["epoch"], repr(row["loss"]), repr(row["mean_seed_distance"])])


def train_alignment(
    graph_a: MetabolicGraph,
    graph_b: MetabolicGraph,
    seeds: Sequence[InterLink],
    features: tuple[Mapping, Mapping] | None = None,
    config: AlignConfig | None = None,
) -> AlignmentTrainer:
    """Plain alignment training without dangling handling or link inference."""
    trainer = AlignmentTrainer(graph_a, graph_b, config or AlignConfig(), features)
    trainer.train(seeds)
    return trainer


def bootstrap_seeds(
    v0: torch.Tensor, vocab: Vocabulary, tag_a: str, tag_b: str, threshold: float
) -> list[InterLink]:
    """Mutual nearest neighbours of the initial embeddings closer than ``threshold``."""
    from .transfer import mutual_nearest

    links = []
    for kind in (Kind.GENE, Kind.METABOLITE):
        rows = vocab.ids(tag_a, kind)
        cols = vocab.ids(tag_b, kind)
        if len(rows) == 0 or len(cols) == 0:
            continue
        dist = normalized_pairwise(v0[rows], v0[cols])
        for i, j in mutual_nearest(dist, threshold):
            links.append(InterLink(vocab.vertices[rows[i]], vocab.vertices[cols[j]]))
    return sorted(links)
