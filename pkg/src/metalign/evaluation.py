"""Triple-classification metrics and alignment hits@1."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .distance import normalized_pairwise
from .graph import InterLink, MetabolicGraph, Triple, Vocabulary, sample_negatives
from .linkpred import LinkPredModel, Thresholds, f1_from_counts, predict, score_array


@dataclass(frozen=True)
class LabeledTriple:
    triple: Triple
    label: bool
    source: Triple  # the test triple this item was derived from


def build_eval_set(
    test: Iterable[Triple], graph: MetabolicGraph, rate: int = 10, seed: int = 0
) -> list[LabeledTriple]:
    """Each test triple followed by ``rate`` corruptions absent from ``graph``.

    ``graph`` must hold every known triple (all splits), so no true triple is
    ever labelled invalid.
    """
    rng = np.random.default_rng(seed)
    items = []
    for t in sorted(test):
        items.append(LabeledTriple(t, True, t))
        items.extend(LabeledTriple(n, False, t) for n in sample_negatives(graph, t, rate, rng))
    return items


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def metrics(self) -> dict:
        p, r, f = f1_from_counts(self.tp, self.fp, self.fn)
        return {"precision": p, "recall": r, "f1": f, **asdict(self)}


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    per_relation: dict = field(default_factory=dict)
    per_graph: dict = field(default_factory=dict)
    alignment_hits1: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _counts(pred: np.ndarray, labels: np.ndarray) -> Counts:
    return Counts(
        tp=int((pred & labels).sum()),
        fp=int((pred & ~labels).sum()),
        tn=int((~pred & ~labels).sum()),
        fn=int((~pred & labels).sum()),
    )


def report_from_predictions(
    pred: np.ndarray, labels: np.ndarray, relations: Sequence[str], graphs: Sequence[str]
) -> EvalReport:
    if len(labels) == 0:
        raise ValueError("empty evaluation set")
    total = _counts(pred, labels).metrics()
    relations = np.asarray(relations)
    graphs = np.asarray(graphs)
    per_rel = {r: _counts(pred[relations == r], labels[relations == r]).metrics() for r in sorted(set(relations))}
    per_graph = {g: _counts(pred[graphs == g], labels[graphs == g]).metrics() for g in sorted(set(graphs))}
    return EvalReport(per_relation=per_rel, per_graph=per_graph, **total)


def evaluate(
    model: LinkPredModel, vocab: Vocabulary, tau: Thresholds, items: Sequence[LabeledTriple]
) -> tuple[EvalReport, np.ndarray]:
    """Confusion-matrix metrics; also returns the raw scores in item order."""
    if not items:
        raise ValueError("empty evaluation set")
    idx = vocab.encode([it.triple for it in items])
    scores = score_array(model, idx)
    labels = np.array([it.label for it in items], dtype=bool)
    pred = predict(scores, idx[:, 1], tau)
    rep = report_from_predictions(
        pred,
        labels,
        [it.triple.direction.value for it in items],
        [it.source.metabolite.graph_tag for it in items],
    )
    return rep, scores


def write_items(items: Sequence[LabeledTriple], scores: np.ndarray, tau: Thresholds, path: str | Path) -> None:
    """Per-item CSV: metabolite,direction,gene,score,label,predicted."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rel = np.array([0 if it.triple.direction.value == "left" else 1 for it in items])
    pred = predict(np.asarray(scores), rel, tau)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metabolite", "direction", "gene", "score", "label", "predicted"])
        for it, s, p in zip(items, scores, pred):
            w.writerow(
                [
                    str(it.triple.metabolite),
                    it.triple.direction.value,
                    str(it.triple.gene),
                    repr(float(s)),
                    "valid" if it.label else "invalid",
                    "valid" if p else "invalid",
                ]
            )


def eval_alignment(
    embeddings: torch.Tensor, vocab: Vocabulary, heldout: Iterable[InterLink]
) -> float:
    """Fraction of held-out links whose left end's nearest same-kind vertex in
    the right graph is exactly the right end."""
    heldout = sorted(heldout)
    if not heldout:
        raise ValueError("empty held-out link set")
    hits = 0
    cache: dict = {}
    for link in heldout:
        key = (link.right.graph_tag, link.right.kind)
        if key not in cache:
            cache[key] = vocab.ids(*key)
        cols = cache[key]
        d = normalized_pairwise(embeddings[[vocab.index[link.left]]], embeddings[cols])[0]
        hits += int(cols[int(torch.argmin(d))] == vocab.index[link.right])
    return hits / len(heldout)
