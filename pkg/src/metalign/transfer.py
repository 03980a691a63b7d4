"""Inter-link inference and triple transfer between the two graphs.

Two rules turn inter-links into extra training triples:

* ``cross`` swaps endpoints of a triple for their linked counterparts. Each
  endpoint may be swapped or kept, so a triple whose two endpoints are both
  linked yields two cross-graph triples plus the fully translated one.
* ``within`` takes two links ``(a1, b1)``, ``(a2, b2)`` and a triple joining
  ``a1`` and ``a2`` and adds the same-direction triple joining ``b1`` and
  ``b2`` in the other graph.
"""
from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .distance import normalized_pairwise
from .graph import InterLink, Kind, Provenance, Triple, VertexId, Vocabulary

log = logging.getLogger(__name__)


def mutual_nearest(dist: torch.Tensor, threshold: float) -> list[tuple[int, int]]:
    """Index pairs that are each other's nearest neighbour and closer than
    ``threshold``. ``argmin`` returns the first minimum, i.e. the lowest index,
    which is the lowest vertex id because vocabularies are sorted."""
    if dist.numel() == 0:
        return []
    row_nn = torch.argmin(dist, dim=1).numpy()
    col_nn = torch.argmin(dist, dim=0).numpy()
    d = dist.numpy()
    return [
        (i, int(j))
        for i, j in enumerate(row_nn)
        if col_nn[j] == i and d[i, j] < threshold
    ]


def infer_inter_links(
    embeddings: torch.Tensor,
    vocab: Vocabulary,
    tag_a: str,
    tag_b: str,
    gamma_d: float,
    eliminated: Iterable[VertexId] = (),
    known: Iterable[InterLink] = (),
) -> set[InterLink]:
    dead = {vocab.index[v] for v in eliminated}
    known_pairs = {l.pair for l in known}
    out = set()
    for kind in (Kind.GENE, Kind.METABOLITE):
        rows = np.array([i for i in vocab.ids(tag_a, kind) if i not in dead], dtype=np.int64)
        cols = np.array([j for j in vocab.ids(tag_b, kind) if j not in dead], dtype=np.int64)
        if len(rows) == 0 or len(cols) == 0:
            continue
        dist = normalized_pairwise(embeddings[rows], embeddings[cols])
        for i, j in mutual_nearest(dist, gamma_d):
            a, b = vocab.vertices[rows[i]], vocab.vertices[cols[j]]
            if (a, b) not in known_pairs:
                out.add(InterLink(a, b, Provenance.INFERRED))
    return out


def _partners(inter: Iterable[InterLink]) -> dict[VertexId, list[VertexId]]:
    partners: dict[VertexId, set[VertexId]] = defaultdict(set)
    for link in inter:
        partners[link.left].add(link.right)
        partners[link.right].add(link.left)
    return {v: sorted(p) for v, p in partners.items()}


def _check_kinds(t: Triple) -> None:
    if t.metabolite.kind is not Kind.METABOLITE or t.gene.kind is not Kind.GENE:
        raise AssertionError(f"transfer produced a non-bipartite triple {t}")


def cross_evidence(
    inter: Iterable[InterLink], triples_a: Iterable[Triple], triples_b: Iterable[Triple]
) -> dict[Triple, tuple[Triple, tuple[InterLink, ...]]]:
    """Cross-rule emissions mapped to (source triple, links used)."""
    inter = list(inter)
    partners = _partners(inter)
    link_of = {}
    for l in inter:
        link_of[(l.left, l.right)] = link_of[(l.right, l.left)] = l
    existing = set(triples_a) | set(triples_b)
    out: dict[Triple, tuple] = {}
    for t in sorted(existing):
        m_opts = [(t.metabolite, None)] + [(p, link_of[(t.metabolite, p)]) for p in partners.get(t.metabolite, ())]
        g_opts = [(t.gene, None)] + [(p, link_of[(t.gene, p)]) for p in partners.get(t.gene, ())]
        for m, lm in m_opts:
            for g, lg in g_opts:
                if lm is None and lg is None:
                    continue
                new = Triple(m, t.direction, g)
                if new in existing or new in out:
                    continue
                _check_kinds(new)
                out[new] = (t, tuple(l for l in (lm, lg) if l is not None))
    return out


def transfer_cross(
    inter: Iterable[InterLink], triples_a: Iterable[Triple], triples_b: Iterable[Triple]
) -> set[Triple]:
    return set(cross_evidence(inter, triples_a, triples_b))


def within_evidence(
    inter: Iterable[InterLink], triples_a: Iterable[Triple], triples_b: Iterable[Triple]
) -> dict[Triple, tuple[Triple, tuple[InterLink, ...]]]:
    inter = list(inter)
    partners = _partners(inter)
    link_of = {}
    for l in inter:
        link_of[(l.left, l.right)] = link_of[(l.right, l.left)] = l
    existing = set(triples_a) | set(triples_b)
    out: dict[Triple, tuple] = {}
    for t in sorted(existing):
        for m in partners.get(t.metabolite, ()):
            for g in partners.get(t.gene, ()):
                # both counterparts must live in the same (other) graph
                if m.graph_tag != g.graph_tag:
                    continue
                new = Triple(m, t.direction, g)
                if new in existing or new in out:
                    continue
                _check_kinds(new)
                out[new] = (t, (link_of[(t.metabolite, m)], link_of[(t.gene, g)]))
    return out


def transfer_within(
    inter: Iterable[InterLink], triples_a: Iterable[Triple], triples_b: Iterable[Triple]
) -> set[Triple]:
    return set(within_evidence(inter, triples_a, triples_b))


@dataclass
class TransferRecord:
    triple: Triple
    rule: str  # rule-1 (cross) | rule-2 (within)
    source: Triple
    links: tuple[InterLink, ...]
    iteration: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "iteration": self.iteration,
                "rule": self.rule,
                "triple": [str(self.triple.metabolite), self.triple.direction.value, str(self.triple.gene)],
                "source": [str(self.source.metabolite), self.source.direction.value, str(self.source.gene)],
                "links": [[str(l.left), str(l.right), l.provenance.value] for l in self.links],
            },
            sort_keys=True,
        )


@dataclass
class TransferLedger:
    gamma_d: float
    inferred_inter: set[InterLink] = field(default_factory=set)
    records: list[TransferRecord] = field(default_factory=list)
    leaked: set[Triple] = field(default_factory=set)

    @property
    def transferred(self) -> set[Triple]:
        return {r.triple for r in self.records}

    def write_audit(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for r in sorted(self.records, key=lambda r: (r.iteration, r.rule, r.triple)):
                fh.write(r.to_json() + "\n")


def run_transfer(
    inter: Sequence[InterLink],
    triples_a: Iterable[Triple],
    triples_b: Iterable[Triple],
    iteration: int = 0,
) -> list[TransferRecord]:
    """Both rules over the given links, one record per emitted triple.

    The fully translated triple is produced by both rules; it is credited to
    ``within`` so that ``cross`` records only hold cross-graph triples.
    """
    triples_a, triples_b = set(triples_a), set(triples_b)
    within = within_evidence(inter, triples_a, triples_b)
    cross = cross_evidence(inter, triples_a, triples_b)
    records = [TransferRecord(t, "rule-2", *within[t], iteration) for t in sorted(within)]
    records += [TransferRecord(t, "rule-1", *cross[t], iteration) for t in sorted(cross) if t not in within]
    return records


def enrich(
    train_pool: Iterable[Triple], ledger: TransferLedger, held_out: Iterable[Triple]
) -> tuple[set[Triple], set[Triple]]:
    """Training pool plus transferred triples, minus anything held out.

    Returns ``(pool, leaked)`` where ``leaked`` are transferred triples that
    coincide with a test or validation triple and were therefore dropped.
    """
    pool = set(train_pool)
    held = set(held_out)
    extra = ledger.transferred - pool
    leaked = extra & held
    if leaked:
        log.info("leakage guard dropped %d transferred triples", len(leaked))
    ledger.leaked = leaked
    return pool | (extra - held), leaked
