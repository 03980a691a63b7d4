"""Bipartite metabolic graphs: data model, TSV ingestion, validation, splits and
negative sampling.

A graph is a set of ``(metabolite, direction, gene)`` triples where the direction
says whether the metabolite is consumed (``left``) or produced (``right``) by a
reaction the gene's enzyme catalyses.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class GraphError(ValueError):
    """Raised for unreadable or structurally unusable graph input."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class Kind(str, Enum):
    GENE = "gene"
    METABOLITE = "metabolite"


class Direction(str, Enum):
    LEFT = "left"
    RIGHT = "right"


@dataclass(frozen=True, order=True)
class VertexId:
    graph_tag: str
    local_id: str
    kind: Kind

    def __str__(self) -> str:
        return f"{self.graph_tag}:{self.kind.value}:{self.local_id}"


@dataclass(frozen=True, order=True)
class Triple:
    # Kinds are deliberately not enforced here so that malformed triples can be
    # reported by validate_bipartite instead of failing at construction.
    metabolite: VertexId
    direction: Direction
    gene: VertexId

    @property
    def is_cross_graph(self) -> bool:
        return self.metabolite.graph_tag != self.gene.graph_tag

    def as_row(self) -> tuple[str, str, str]:
        return (self.metabolite.local_id, self.direction.value, self.gene.local_id)


def gene(tag: str, local_id: str) -> VertexId:
    return VertexId(tag, local_id, Kind.GENE)


def metabolite(tag: str, local_id: str) -> VertexId:
    return VertexId(tag, local_id, Kind.METABOLITE)


@dataclass(frozen=True)
class MetabolicGraph:
    tag: str
    genes: frozenset[VertexId]
    metabolites: frozenset[VertexId]
    triples: frozenset[Triple]
    _adjacency: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _sorted: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @classmethod
    def from_triples(
        cls, tag: str, triples: Iterable[Triple], extra_vertices: Iterable[VertexId] = ()
    ) -> "MetabolicGraph":
        triples = frozenset(triples)
        genes = {t.gene for t in triples}
        metabolites = {t.metabolite for t in triples}
        for v in extra_vertices:
            (genes if v.kind is Kind.GENE else metabolites).add(v)
        return cls(tag, frozenset(genes), frozenset(metabolites), triples)

    @property
    def vertices(self) -> frozenset[VertexId]:
        return self.genes | self.metabolites

    @property
    def adjacency(self) -> dict[VertexId, list[tuple[VertexId, Direction, float]]]:
        """Symmetric closure of the triples, every entry with weight 1.0."""
        if not self._adjacency:
            adj: dict[VertexId, list] = {v: [] for v in self.vertices}
            for t in sorted(self.triples):
                adj.setdefault(t.metabolite, []).append((t.gene, t.direction, 1.0))
                adj.setdefault(t.gene, []).append((t.metabolite, t.direction, 1.0))
            self._adjacency.update(adj)
        return self._adjacency

    def sorted_genes(self) -> list[VertexId]:
        if "genes" not in self._sorted:
            self._sorted["genes"] = sorted(self.genes)
        return self._sorted["genes"]

    def sorted_metabolites(self) -> list[VertexId]:
        if "metabolites" not in self._sorted:
            self._sorted["metabolites"] = sorted(self.metabolites)
        return self._sorted["metabolites"]

    def restrict(self, triples: Iterable[Triple]) -> "MetabolicGraph":
        """Same vertex sets, different triple set (used for training views)."""
        return MetabolicGraph(self.tag, self.genes, self.metabolites, frozenset(triples))

    def __len__(self) -> int:
        return len(self.triples)


# --------------------------------------------------------------------------- I/O

VERTEX_DIRECTIVE = "#vertex"


def load_graph(path: str | Path, tag: str) -> MetabolicGraph:
    """Read a ``metabolite<TAB>direction<TAB>gene`` file.

    Lines starting with ``#`` are comments, except ``#vertex<TAB>kind<TAB>id``
    directives which declare vertices that have no triples. A declared kind
    takes precedence over column position.
    """
    path = Path(path)
    if not path.exists():
        raise GraphError("MissingInput", f"graph file not found: {path}")
    triples: set[Triple] = set()
    declared: list[VertexId] = []
    n_records = 0
    with path.open(encoding="utf-8") as fh:
        lines = [raw.rstrip("\n").rstrip("\r") for raw in fh]
    # declared kinds override column position so kind errors survive loading
    kinds: dict[str, Kind] = {}
    for line in lines:
        parts = line.split("\t")
        if line.startswith(VERTEX_DIRECTIVE + "\t") and len(parts) == 3 and parts[1] in ("gene", "metabolite"):
            kinds[parts[2]] = Kind(parts[1])
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        if line.startswith(VERTEX_DIRECTIVE + "\t"):
            parts = line.split("\t")
            if len(parts) != 3 or parts[1] not in ("gene", "metabolite") or not parts[2]:
                raise GraphError("MalformedLine", f"{path}:{lineno}: bad vertex directive")
            declared.append(VertexId(tag, parts[2], Kind(parts[1])))
            continue
        if line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0] or not parts[2]:
            raise GraphError(
                "MalformedLine", f"{path}:{lineno}: expected 3 tab-separated fields"
            )
        m, d, g = parts
        try:
            direction = Direction(d.strip().lower())
        except ValueError:
            raise GraphError(
                "BadDirection", f"{path}:{lineno}: direction {d!r} not in {{left, right}}"
            ) from None
        n_records += 1
        m_v = VertexId(tag, m, kinds.get(m, Kind.METABOLITE))
        g_v = VertexId(tag, g, kinds.get(g, Kind.GENE))
        triples.add(Triple(m_v, direction, g_v))
    if not triples:
        raise GraphError("EmptyGraph", f"{path}: no triples")
    if n_records != len(triples):
        log.warning("%s: collapsed %d duplicate records", path, n_records - len(triples))
    return MetabolicGraph.from_triples(tag, triples, declared)


def save_graph(g: MetabolicGraph, path: str | Path, triples: Iterable[Triple] | None = None) -> None:
    """Write ``g`` (or a subset of its triples) in the loader's format.

    Vertices without triples are emitted as ``#vertex`` directives so a round
    trip preserves the vertex sets.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(g.triples if triples is None else triples)
    touched = {t.gene for t in rows} | {t.metabolite for t in rows}
    with path.open("w", encoding="utf-8") as fh:
        fh.write(f"# metabolic graph {g.tag}: metabolite\tdirection\tgene\n")
        for v in sorted(g.vertices - touched):
            fh.write(f"{VERTEX_DIRECTIVE}\t{v.kind.value}\t{v.local_id}\n")
        for t in rows:
            fh.write("\t".join(t.as_row()) + "\n")


def load_triples_into(path: str | Path, g: MetabolicGraph) -> set[Triple]:
    """Load a triple file whose ids must already exist in ``g`` (split files)."""
    sub = load_graph(path, g.tag)
    unknown = (sub.genes | sub.metabolites) - g.vertices
    if unknown:
        raise GraphError("UnknownVertex", f"{path}: {len(unknown)} ids not in graph {g.tag}")
    return set(sub.triples)


# --------------------------------------------------------------------- validation


@dataclass(frozen=True)
class Violation:
    code: str  # WrongKind | MissingVertex | ForeignGraph
    triple: Triple
    detail: str

    def to_json(self) -> str:
        return json.dumps(
            {"code": self.code, "triple": list(self.triple.as_row()), "detail": self.detail},
            sort_keys=True,
        )


def validate_bipartite(g: MetabolicGraph) -> list[Violation]:
    """Report-only structural check; an empty list means the graph is valid."""
    out: list[Violation] = []
    for t in sorted(g.triples):
        if t.metabolite.kind is not Kind.METABOLITE or t.gene.kind is not Kind.GENE:
            out.append(
                Violation(
                    "WrongKind",
                    t,
                    f"endpoint kinds ({t.metabolite.kind.value}, {t.gene.kind.value}); "
                    "expected (metabolite, gene)",
                )
            )
            continue
        if t.metabolite.graph_tag != g.tag or t.gene.graph_tag != g.tag:
            out.append(Violation("ForeignGraph", t, f"endpoint outside graph {g.tag}"))
            continue
        missing = [v for v in (t.metabolite, t.gene) if v not in g.vertices]
        if missing:
            out.append(
                Violation("MissingVertex", t, "unknown vertex " + ", ".join(str(v) for v in missing))
            )
    return out


# -------------------------------------------------------------------------- split


@dataclass(frozen=True)
class DataSplit:
    train: frozenset[Triple]
    test: frozenset[Triple]
    valid: frozenset[Triple]
    seed: int


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer sizes summing to ``n``; ties in the remainder go to the earlier slot."""
    # rounding keeps float noise (7746 * 0.6 = 4647.5999...) from breaking ties
    raw = [round(n * r, 9) for r in ratios]
    sizes = [math.floor(x) for x in raw]
    leftover = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split_triples(
    g: MetabolicGraph, ratios: tuple[float, float, float] = (0.6, 0.3, 0.1), seed: int = 0
) -> DataSplit:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise GraphError("BadRatios", f"ratios {ratios} must be 3 non-negative values summing to 1")
    if len(g.triples) < 3:
        raise GraphError("TooFewTriples", f"need at least 3 triples, got {len(g.triples)}")
    ordered = sorted(g.triples)
    perm = np.random.default_rng(seed).permutation(len(ordered))
    n_train, n_test, _ = largest_remainder(len(ordered), ratios)
    shuffled = [ordered[i] for i in perm]
    return DataSplit(
        train=frozenset(shuffled[:n_train]),
        test=frozenset(shuffled[n_train : n_train + n_test]),
        valid=frozenset(shuffled[n_train + n_test :]),
        seed=seed,
    )


# ---------------------------------------------------------------- negative sampling

MAX_RETRIES = 100


def corrupt_once(
    t: Triple,
    genes: Sequence[VertexId],
    metabolites: Sequence[VertexId],
    rng: np.random.Generator,
) -> Triple:
    """Replace one endpoint (side chosen by a fair coin) with a different vertex."""
    use_gene = rng.random() < 0.5
    pool = genes if use_gene else metabolites
    current = t.gene if use_gene else t.metabolite
    if len(pool) < 2:
        # the other side may still be corruptible
        use_gene = not use_gene
        pool = genes if use_gene else metabolites
        current = t.gene if use_gene else t.metabolite
        if len(pool) < 2:
            raise GraphError("Exhausted", "no alternative vertex on either side")
    while True:
        cand = pool[int(rng.integers(len(pool)))]
        if cand != current:
            break
    if use_gene:
        return Triple(t.metabolite, t.direction, cand)
    return Triple(cand, t.direction, t.gene)


def sample_negatives(
    g: MetabolicGraph,
    t: Triple,
    rate: int,
    rng: np.random.Generator,
    max_retries: int = MAX_RETRIES,
) -> list[Triple]:
    """Draw ``rate`` corruptions of ``t`` that are not triples of ``g``."""
    if rate < 1:
        raise GraphError("BadRate", f"rate must be >= 1, got {rate}")
    if len(g.genes) < 2 and len(g.metabolites) < 2:
        raise GraphError("Exhausted", f"graph {g.tag} has no alternative vertices to corrupt with")
    genes = g.sorted_genes()
    metabolites = g.sorted_metabolites()
    out = []
    for _ in range(rate):
        for _attempt in range(max_retries):
            neg = corrupt_once(t, genes, metabolites, rng)
            if neg not in g.triples:
                out.append(neg)
                break
        else:
            raise GraphError(
                "Exhausted", f"no non-colliding corruption of {t.as_row()} after {max_retries} tries"
            )
    return out


# ----------------------------------------------------------------- index helpers


class Vocabulary:
    """Stable integer ids over the vertices of one or more graphs.

    Vertices are laid out graph by graph, genes before metabolites, each block
    sorted; every (graph, kind) block is therefore a contiguous index range,
    which lets batched corruption draw replacements with a single integer.
    """

    def __init__(self, graphs: Sequence[MetabolicGraph]):
        self.graph_tags = [g.tag for g in graphs]
        self.vertices: list[VertexId] = []
        self.blocks: dict[tuple[str, Kind], tuple[int, int]] = {}
        for g in graphs:
            for kind, members in ((Kind.GENE, g.genes), (Kind.METABOLITE, g.metabolites)):
                lo = len(self.vertices)
                self.vertices.extend(sorted(members))
                self.blocks[(g.tag, kind)] = (lo, len(self.vertices))
        self.index = {v: i for i, v in enumerate(self.vertices)}
        self.kind = np.array([v.kind is Kind.GENE for v in self.vertices], dtype=bool)

    def __len__(self) -> int:
        return len(self.vertices)

    def block_of(self, v: VertexId) -> tuple[int, int]:
        return self.blocks[(v.graph_tag, v.kind)]

    def ids(self, tag: str, kind: Kind) -> np.ndarray:
        lo, hi = self.blocks[(tag, kind)]
        return np.arange(lo, hi)

    def encode(self, triples: Iterable[Triple]) -> np.ndarray:
        """``[n, 3]`` int64 array of (metabolite, direction, gene); direction 0=left."""
        rows = [
            (self.index[t.metabolite], 0 if t.direction is Direction.LEFT else 1, self.index[t.gene])
            for t in triples
        ]
        return np.array(rows, dtype=np.int64).reshape(-1, 3)

    def decode(self, row: Sequence[int]) -> Triple:
        m, d, g = (int(x) for x in row)
        return Triple(self.vertices[m], Direction.LEFT if d == 0 else Direction.RIGHT, self.vertices[g])

    def triple_keys(self, arr: np.ndarray) -> np.ndarray:
        n = len(self.vertices)
        return (arr[:, 0] * 2 + arr[:, 1]) * n + arr[:, 2]


class BatchCorruptor:
    """Vectorised version of :func:`sample_negatives` over encoded triples.

    Same law: fair coin for the side, uniform replacement among the other
    vertices of the same graph and kind, resampling while the corruption is a
    known positive.
    """

    def __init__(self, vocab: Vocabulary, positives: np.ndarray, max_retries: int = MAX_RETRIES):
        self.vocab = vocab
        self.known = np.unique(vocab.triple_keys(positives))
        self.max_retries = max_retries
        lo = np.zeros(len(vocab), dtype=np.int64)
        hi = np.zeros(len(vocab), dtype=np.int64)
        for a, b in vocab.blocks.values():
            lo[a:b], hi[a:b] = a, b
        self.lo, self.hi = lo, hi

    def _draw(self, arr: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = arr.copy()
        side = np.where(rng.random(len(arr)) < 0.5, 2, 0)
        cur = arr[np.arange(len(arr)), side]
        size = self.hi[cur] - self.lo[cur]
        # a block of one vertex cannot be corrupted on that side
        side = np.where(size < 2, 2 - side, side)
        cur = arr[np.arange(len(arr)), side]
        size = self.hi[cur] - self.lo[cur]
        if np.any(size < 2):
            raise GraphError("Exhausted", "triple with no alternative vertex on either side")
        r = self.lo[cur] + (rng.random(len(arr)) * (size - 1)).astype(np.int64)
        r = np.where(r >= cur, r + 1, r)
        out[np.arange(len(arr)), side] = r
        return out

    def corrupt(self, arr: np.ndarray, rate: int, rng: np.random.Generator) -> np.ndarray:
        """``[n * rate, 3]`` negatives, grouped as rate consecutive rows per positive."""
        rep = np.repeat(arr, rate, axis=0)
        out = self._draw(rep, rng)
        for _ in range(self.max_retries):
            bad = np.isin(self.vocab.triple_keys(out), self.known)
            if not bad.any():
                return out
            out[bad] = self._draw(rep[bad], rng)
        raise GraphError("Exhausted", f"{int(bad.sum())} corruptions still collide after retries")



# ---------------------------------------------------------------------- inter-links


class Provenance(str, Enum):
    SEED = "seed"
    INFERRED = "inferred"


@dataclass(frozen=True, order=True)
class InterLink:
    """Equivalence between a vertex of one graph and a vertex of the other."""

    left: VertexId
    right: VertexId
    provenance: Provenance = field(default=Provenance.SEED, compare=False)

    def __post_init__(self):
        if self.left.kind is not self.right.kind:
            raise GraphError("KindMismatch", f"cannot link {self.left} with {self.right}")
        if self.left.graph_tag == self.right.graph_tag:
            raise GraphError("SameGraph", f"link endpoints both in graph {self.left.graph_tag}")

    @property
    def pair(self) -> tuple[VertexId, VertexId]:
        return (self.left, self.right)


def _resolve(g: MetabolicGraph, token: str, kind: Kind | None = None) -> VertexId:
    if ":" in token and token.split(":", 1)[0] in ("gene", "metabolite"):
        k, local = token.split(":", 1)
        v = VertexId(g.tag, local, Kind(k))
        if v not in g.vertices:
            raise GraphError("UnknownVertex", f"{token!r} not in graph {g.tag}")
        return v
    kinds = [kind] if kind is not None else [Kind.GENE, Kind.METABOLITE]
    hits = [VertexId(g.tag, token, k) for k in kinds if VertexId(g.tag, token, k) in g.vertices]
    if not hits:
        raise GraphError("UnknownVertex", f"{token!r} not in graph {g.tag}")
    if len(hits) > 1:
        raise GraphError("AmbiguousId", f"{token!r} is both a gene and a metabolite in {g.tag}")
    return hits[0]


def load_links(
    path: str | Path,
    graph_left: MetabolicGraph,
    graph_right: MetabolicGraph,
    provenance: Provenance = Provenance.SEED,
) -> list[InterLink]:
    """Read ``left_id<TAB>right_id`` lines; ids may carry a ``gene:``/``metabolite:`` prefix."""
    path = Path(path)
    if not path.exists():
        raise GraphError("MissingInput", f"link file not found: {path}")
    links = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphError("MalformedLine", f"{path}:{lineno}: expected 2 tab-separated ids")
            left = _resolve(graph_left, parts[0])
            right = _resolve(graph_right, parts[1], left.kind)
            links.add(InterLink(left, right, provenance))
    return sorted(links)


def save_links(links: Iterable[InterLink], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# left_id\tright_id\n")
        for link in sorted(links):
            fh.write(
                f"{link.left.kind.value}:{link.left.local_id}\t"
                f"{link.right.kind.value}:{link.right.local_id}\n"
            )
