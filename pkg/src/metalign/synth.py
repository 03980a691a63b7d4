"""Paired synthetic metabolic graphs with planted ground truth.

Graph A is a random bipartite graph with planted modules (pathway-like groups
that are denser inside than across) and log-normal vertex popularity. Graph B
is a renamed copy of A's shared part with a fraction of triples hidden, plus
vertices that exist only in B and attach to random B vertices. Features of a
vertex are fixed random projections of a latent vector plus per-graph noise;
aligned vertices share the latent, dangling vertices draw theirs from a
shifted distribution so they sit away from everything the other graph has.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .features import FeatureBundle, write_features
from .graph import (
    Direction,
    InterLink,
    Kind,
    MetabolicGraph,
    Triple,
    VertexId,
    gene,
    metabolite,
    save_graph,
    save_links,
)


class SynthError(ValueError):
    pass


@dataclass
class SynthSpec:
    n_genes: int = 150
    n_metabolites: int = 150
    edge_density: float = 0.04
    p_hide_intra: float = 0.3
    p_hide_inter: float = 0.5
    p_dangling: float = 0.1
    feature_noise: float = 0.1
    seed: int = 0
    n_modules: int = 10
    module_affinity: float = 0.9  # expected share of edges inside a module
    popularity_sigma: float = 0.5
    latent_dim: int = 32
    text_dim: int = 32
    smile_dim: int = 24
    seq_dim: int = 40
    # real vertices share a common latent offset (pretrained embeddings are
    # anisotropic); danglings sit around a different offset, outside that cone
    domain_shift: float = 2.0
    dangling_shift: float = 2.0
    dangling_degree: float | None = None  # default: mean degree of the kind in A
    # absolute overrides, used for organism-scale shapes
    b_only_genes: int | None = None
    b_only_metabolites: int | None = None
    a_only_genes: int = 0
    a_only_metabolites: int = 0
    n_seeds: int | None = None
    tag_a: str = "A"
    tag_b: str = "B"

    def __post_init__(self):
        for name in ("edge_density", "p_hide_intra", "p_hide_inter", "p_dangling", "module_affinity"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise SynthError(f"{name}={v} must lie in [0, 1]")
        if self.n_genes < 2 or self.n_metabolites < 2:
            raise SynthError("need at least 2 genes and 2 metabolites")
        if self.feature_noise < 0:
            raise SynthError("feature_noise must be >= 0")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "SynthSpec":
        data = yaml.safe_load(Path(path).read_text()) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SynthError(f"unknown synth spec keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


@dataclass
class GroundTruth:
    true_inter: dict[VertexId, VertexId]
    planted_danglings: set[VertexId]
    hidden_triples: dict[str, set[Triple]] = field(default_factory=dict)
    seeds: list[InterLink] = field(default_factory=list)

    @property
    def heldout(self) -> list[InterLink]:
        seeded = {l.left for l in self.seeds}
        return sorted(InterLink(a, b) for a, b in self.true_inter.items() if a not in seeded)

    def to_json(self) -> str:
        return json.dumps(
            {
                "true_inter": sorted([[str(a), str(b)] for a, b in self.true_inter.items()]),
                "planted_danglings": sorted(str(v) for v in self.planted_danglings),
                "hidden_triples": {
                    tag: sorted([str(t.metabolite), t.direction.value, str(t.gene)] for t in ts)
                    for tag, ts in sorted(self.hidden_triples.items())
                },
                "seeds": sorted([[str(l.left), str(l.right)] for l in self.seeds]),
            },
            indent=1,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "GroundTruth":
        data = json.loads(text)

        def vid(s: str) -> VertexId:
            tag, kind, local = s.split(":", 2)
            return VertexId(tag, local, Kind(kind))

        def trip(row) -> Triple:
            return Triple(vid(row[0]), Direction(row[1]), vid(row[2]))

        return cls(
            true_inter={vid(a): vid(b) for a, b in data["true_inter"]},
            planted_danglings={vid(s) for s in data["planted_danglings"]},
            hidden_triples={tag: {trip(r) for r in rows} for tag, rows in data["hidden_triples"].items()},
            seeds=[InterLink(vid(a), vid(b)) for a, b in data["seeds"]],
        )


@dataclass
class SynthInstance:
    spec: SynthSpec
    graph_a: MetabolicGraph
    graph_b: MetabolicGraph
    features_a: dict[VertexId, FeatureBundle]
    features_b: dict[VertexId, FeatureBundle]
    seeds: list[InterLink]
    truth: GroundTruth

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {k: out / name for k, name in SYNTH_FILES.items()}
        save_graph(self.graph_a, paths["graph_a"])
        save_graph(self.graph_b, paths["graph_b"])
        write_features(paths["features_a"], self.features_a)
        write_features(paths["features_b"], self.features_b)
        save_links(self.seeds, paths["seeds"])
        paths["truth"].write_text(self.truth.to_json() + "\n")
        paths["spec"].write_text(yaml.safe_dump(asdict(self.spec), sort_keys=True))
        return paths


SYNTH_FILES = {
    "graph_a": "graph_a.tsv",
    "graph_b": "graph_b.tsv",
    "features_a": "features_a.bin",
    "features_b": "features_b.bin",
    "seeds": "seeds.tsv",
    "truth": "truth.json",
    "spec": "spec.yaml",
}


def _top_k_weighted(rng: np.random.Generator, weights: np.ndarray, k: int) -> np.ndarray:
    """``k`` distinct indices drawn without replacement proportionally to
    ``weights`` (Gumbel top-k)."""
    keys = np.log(weights) - np.log(-np.log(rng.random(len(weights))))
    return np.sort(np.argpartition(-keys, k - 1)[:k]) if k else np.zeros(0, dtype=np.int64)


def _dangling_counts(spec: SynthSpec) -> tuple[int, int]:
    total = math.ceil(spec.p_dangling * (spec.n_genes + spec.n_metabolites) - 1e-9)
    n_g = int(round(total * spec.n_genes / (spec.n_genes + spec.n_metabolites)))
    n_g = spec.b_only_genes if spec.b_only_genes is not None else n_g
    n_m = spec.b_only_metabolites if spec.b_only_metabolites is not None else total - n_g
    return n_g, n_m


def generate(spec: SynthSpec) -> SynthInstance:
    rng = np.random.default_rng(spec.seed)
    ta, tb = spec.tag_a, spec.tag_b
    n_g, n_m = spec.n_genes, spec.n_metabolites
    width = len(str(max(n_g, n_m)))

    # --- graph A: planted modules with popularity
    gmod = rng.integers(spec.n_modules, size=n_g)
    mmod = rng.integers(spec.n_modules, size=n_m)
    gpop = rng.lognormal(0.0, spec.popularity_sigma, size=n_g)
    mpop = rng.lognormal(0.0, spec.popularity_sigma, size=n_m)
    same = mmod[:, None] == gmod[None, :]
    in_share = same.mean()
    # per-pair weight so that about module_affinity of the mass sits inside modules
    w_in = spec.module_affinity / max(in_share, 1e-12)
    w_out = (1 - spec.module_affinity) / max(1 - in_share, 1e-12)
    w = np.where(same, w_in, w_out) * mpop[:, None] * gpop[None, :]
    n_edges = int(round(spec.edge_density * n_m * n_g))
    if n_edges < 1:
        raise SynthError("edge density and sizes give an empty graph")
    flat = _top_k_weighted(rng, w.ravel() + 1e-300, n_edges)
    mi, gi = np.divmod(flat, n_g)
    dirs = rng.random(n_edges) < 0.5

    a_genes = [gene(ta, f"G{i:0{width}d}") for i in range(n_g)]
    a_mets = [metabolite(ta, f"M{i:0{width}d}") for i in range(n_m)]
    triples_a = {
        Triple(a_mets[m], Direction.LEFT if d else Direction.RIGHT, a_genes[g]) for m, g, d in zip(mi, gi, dirs)
    }
    graph_a = MetabolicGraph.from_triples(ta, triples_a, a_genes + a_mets)

    # --- correspondence: A-only vertices have no counterpart
    a_only = set()
    if spec.a_only_genes:
        a_only |= {a_genes[i] for i in rng.choice(n_g, spec.a_only_genes, replace=False)}
    if spec.a_only_metabolites:
        a_only |= {a_mets[i] for i in rng.choice(n_m, spec.a_only_metabolites, replace=False)}
    shared_g = [v for v in a_genes if v not in a_only]
    shared_m = [v for v in a_mets if v not in a_only]
    bg_only, bm_only = _dangling_counts(spec)
    nbg, nbm = len(shared_g) + bg_only, len(shared_m) + bm_only
    wb = len(str(max(nbg, nbm)))
    # shuffled names so vertex order carries no alignment signal
    gnames = rng.permutation(nbg)
    mnames = rng.permutation(nbm)
    true_inter = {}
    for i, v in enumerate(shared_g):
        true_inter[v] = gene(tb, f"g_{gnames[i]:0{wb}d}")
    for i, v in enumerate(shared_m):
        true_inter[v] = metabolite(tb, f"m_{mnames[i]:0{wb}d}")
    b_dang_g = [gene(tb, f"g_{gnames[len(shared_g) + i]:0{wb}d}") for i in range(bg_only)]
    b_dang_m = [metabolite(tb, f"m_{mnames[len(shared_m) + i]:0{wb}d}") for i in range(bm_only)]

    # --- graph B: renamed shared part, some triples hidden, danglings attached at random
    renamed = sorted(
        Triple(true_inter[t.metabolite], t.direction, true_inter[t.gene])
        for t in triples_a
        if t.metabolite in true_inter and t.gene in true_inter
    )
    n_hide = int(round(spec.p_hide_intra * len(renamed)))
    hide_idx = set(rng.choice(len(renamed), n_hide, replace=False).tolist()) if n_hide else set()
    hidden = {renamed[i] for i in hide_idx}
    triples_b = {t for i, t in enumerate(renamed) if i not in hide_idx}
    b_genes = sorted(true_inter[v] for v in shared_g) + b_dang_g
    b_mets = sorted(true_inter[v] for v in shared_m) + b_dang_m
    deg_g = spec.dangling_degree or len(triples_a) / n_g
    deg_m = spec.dangling_degree or len(triples_a) / n_m
    for v, pool, deg in [(v, b_mets, deg_g) for v in b_dang_g] + [(v, b_genes, deg_m) for v in b_dang_m]:
        k = max(1, min(len(pool), int(rng.poisson(deg))))
        others = [pool[i] for i in rng.choice(len(pool), k, replace=False)]
        for u in others:
            d = Direction.LEFT if rng.random() < 0.5 else Direction.RIGHT
            triples_b.add(Triple(u, d, v) if v.kind is Kind.GENE else Triple(v, d, u))
    graph_b = MetabolicGraph.from_triples(tb, triples_b, b_genes + b_mets)
    if not triples_b:
        raise SynthError("graph B came out empty")

    # --- seeds
    pairs = sorted(true_inter.items())
    n_seeds = spec.n_seeds if spec.n_seeds is not None else int(round((1 - spec.p_hide_inter) * len(pairs)))
    seed_idx = np.sort(rng.choice(len(pairs), min(n_seeds, len(pairs)), replace=False))
    seeds = [InterLink(*pairs[i]) for i in seed_idx]

    # --- features
    L = spec.latent_dim
    proj = {
        "surface": rng.normal(0, 1 / math.sqrt(L), (spec.text_dim, L)),
        "description": rng.normal(0, 1 / math.sqrt(L), (spec.text_dim, L)),
        Kind.METABOLITE: rng.normal(0, 1 / math.sqrt(L), (spec.smile_dim, L)),
        Kind.GENE: rng.normal(0, 1 / math.sqrt(L), (spec.seq_dim, L)),
    }
    domain = rng.normal(0, 1, L)
    foreign = rng.normal(0, 1, L)
    latent: dict[VertexId, np.ndarray] = {}
    for v in a_genes + a_mets:
        z = rng.normal(0, 1, L)
        z = z + (spec.dangling_shift * foreign if v in a_only else spec.domain_shift * domain)
        latent[v] = z
        if v in true_inter:
            latent[true_inter[v]] = z
    for v in b_dang_g + b_dang_m:
        latent[v] = rng.normal(0, 1, L) + spec.dangling_shift * foreign

    def bundle(v: VertexId) -> FeatureBundle:
        z = latent[v]
        noisy = lambda p: p @ z + spec.feature_noise * rng.normal(0, 1, p.shape[0])
        return FeatureBundle(noisy(proj["surface"]), noisy(proj["description"]), noisy(proj[v.kind]))

    features_a = {v: bundle(v) for v in sorted(graph_a.vertices)}
    features_b = {v: bundle(v) for v in sorted(graph_b.vertices)}

    truth = GroundTruth(
        true_inter=true_inter,
        planted_danglings=set(a_only) | set(b_dang_g) | set(b_dang_m),
        hidden_triples={tb: hidden},
        seeds=seeds,
    )
    return SynthInstance(spec, graph_a, graph_b, features_a, features_b, seeds, truth)


def score_recovery(
    truth: GroundTruth,
    inferred: set[InterLink] | list[InterLink],
    eliminated: set[VertexId] | frozenset[VertexId],
    transferred: set[Triple],
) -> dict:
    """Precision/recall of inferred links, eliminated danglings and hidden triples."""
    known = {l.left for l in truth.seeds}
    target = {(a, b) for a, b in truth.true_inter.items() if a not in known}
    got = {l.pair for l in inferred}
    for v in eliminated:
        if v not in truth.true_inter and v not in truth.true_inter.values() and v not in truth.planted_danglings:
            raise SynthError(f"eliminated vertex {v} is unknown to the ground truth")
    hidden = set().union(*truth.hidden_triples.values()) if truth.hidden_triples else set()

    def pr(found: set, true: set) -> dict:
        tp = len(found & true)
        return {
            "precision": tp / len(found) if found else 0.0,
            "recall": tp / len(true) if true else 0.0,
            "found": len(found),
            "true": len(true),
            "correct": tp,
        }

    return {
        "inter_links": pr(got, target),
        "danglings": pr(set(eliminated), set(truth.planted_danglings)),
        # transferred triples outside the hidden set are not necessarily wrong
        # (they may be true but unrecorded), so only recall is meaningful here
        "hidden_triples": {"recall": pr(set(transferred), hidden)["recall"], "true": len(hidden)},
    }
