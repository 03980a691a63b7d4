"""End-to-end run: alignment with dangling elimination and triple transfer,
then link prediction on the enriched pool, then evaluation.

Schedule: ``outer_iterations`` rounds of ``epochs_per_iteration`` alignment
epochs (dangling bookkeeping after every epoch), each round closed by link
inference and transfer. Link prediction trains once, on the final pool.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import yaml

from . import __version__
from .dangling import DanglingState, DanglingTracker, compute_alpha
from .distance import l1_normalize
from .encoder import AlignConfig, AlignmentTrainer, bootstrap_seeds
from .evaluation import LabeledTriple, build_eval_set, eval_alignment, evaluate, write_items
from .features import load_features
from .graph import (
    Direction,
    GraphError,
    InterLink,
    Kind,
    MetabolicGraph,
    Triple,
    VertexId,
    Vocabulary,
    load_graph,
    load_links,
    save_links,
    split_triples,
)
from .linkpred import LPConfig, LPResult, load_lp_checkpoint, save_lp_checkpoint, train_lp, write_lp_trace
from .synth import GroundTruth, score_recovery
from .transfer import TransferLedger, enrich, infer_inter_links, run_transfer

log = logging.getLogger(__name__)

PATH_FIELDS = ("graph_a", "graph_b", "features_a", "features_b", "seeds", "truth")
ENV_PREFIX = "METALIGN_"


class ConfigError(ValueError):
    code = "ConfigDependency"


class MissingCheckpoint(FileNotFoundError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    # component switches; kt off requires mm and de off
    kt: bool = True
    mm: bool = True
    de: bool = True
    # alignment
    margin: float = 5.0
    gamma_d: float = 0.4
    alpha_mode: str = "fixed"
    alpha: float = 0.7
    theta: float = 0.8
    k: int = 5
    align_dim: int = 512
    align_layers: int = 2
    align_lr: float = 4e-4
    align_neg_rate: int = 10
    proj_dim: int = 128
    outer_iterations: int = 5
    epochs_per_iteration: int = 10
    seed_mode: str = "file"  # file | bootstrap
    # link prediction
    variant: str = "transe"
    beta: float = 1.0
    lp_dim: int = 512
    lp_lr: float = 5e-4
    lp_neg_rate: int = 10
    lp_epochs: int = 100
    lp_batch_size: int = 512
    lp_eval_every: int = 5
    lp_warm_start: bool = False
    # data
    split: tuple[float, float, float] = (0.6, 0.3, 0.1)
    eval_rate: int = 10
    seed: int = 0
    tag_a: str = "A"
    tag_b: str = "B"
    graph_a: str | None = None
    graph_b: str | None = None
    features_a: str | None = None
    features_b: str | None = None
    seeds: str | None = None
    truth: str | None = None

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        if not self.kt and (self.mm or self.de):
            raise ConfigError("mm and de depend on kt: with kt off both must be off")
        if self.seed_mode not in ("file", "bootstrap"):
            raise ValueError(f"seed_mode must be file or bootstrap, got {self.seed_mode!r}")
        if self.alpha_mode not in ("fixed", "computed"):
            raise ValueError(f"alpha_mode must be fixed or computed, got {self.alpha_mode!r}")
        if self.gamma_d < 0:
            raise ValueError("gamma_d must be >= 0")
        if self.lp_warm_start and self.lp_dim != self.align_dim:
            raise ValueError("lp_warm_start needs lp_dim == align_dim")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "preset" in data:
            raise ValueError("use the preset() helper rather than a preset key")
        if base_dir is not None:
            for k in PATH_FIELDS:
                if data.get(k) and not Path(data[k]).is_absolute():
                    data[k] = str(Path(base_dir) / data[k])
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path, **overrides) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise GraphError("MissingInput", f"config file not found: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data, base_dir=path.parent).with_env()

    def with_env(self) -> "RunConfig":
        """Environment overrides, paths only (``METALIGN_GRAPH_A`` etc.)."""
        env = {k: os.environ[ENV_PREFIX + k.upper()] for k in PATH_FIELDS if ENV_PREFIX + k.upper() in os.environ}
        return replace(self, **env) if env else self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    def align_config(self, seed: int) -> AlignConfig:
        return AlignConfig(
            dim=self.align_dim,
            layers=self.align_layers,
            lr=self.align_lr,
            margin=self.margin,
            neg_rate=self.align_neg_rate,
            epochs=self.outer_iterations * self.epochs_per_iteration,
            proj_dim=self.proj_dim,
            seed=seed,
        )

    def lp_config(self, seed: int) -> LPConfig:
        return LPConfig(
            variant=self.variant,
            dim=self.lp_dim,
            lr=self.lp_lr,
            margin=self.beta,
            neg_rate=self.lp_neg_rate,
            epochs=self.lp_epochs,
            batch_size=self.lp_batch_size,
            eval_every=self.lp_eval_every,
            seed=seed,
        )


PRESETS = {
    "full": dict(kt=True, mm=True, de=True),
    "no-de": dict(kt=True, mm=True, de=False),
    "no-mm": dict(kt=True, mm=False, de=True),
    "no-mm-de": dict(kt=True, mm=False, de=False),
    "baseline": dict(kt=False, mm=False, de=False),
}


def preset(config: RunConfig, name: str) -> RunConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return replace(config, **PRESETS[name])


def stage_seeds(master: int) -> dict[str, int]:
    """Independent per-stage seeds, so switching a stage off leaves the others' draws unchanged."""
    names = ("split", "align", "lp", "eval")
    children = np.random.SeedSequence(master).spawn(len(names))
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


# ------------------------------------------------------------------ tagged triple files


def write_tagged(triples: Iterable[Triple], path: str | Path) -> None:
    """Triples with fully qualified ids (``tag:kind:id``); cross-graph triples allowed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for t in sorted(triples):
            fh.write(f"{t.metabolite}\t{t.direction.value}\t{t.gene}\n")


def _parse_vid(s: str) -> VertexId:
    tag, kind, local = s.split(":", 2)
    return VertexId(tag, local, Kind(kind))


def read_tagged(path: str | Path) -> set[Triple]:
    path = Path(path)
    if not path.exists():
        raise GraphError("MissingInput", f"triple file not found: {path}")
    out = set()
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            m, d, g = line.split("\t")
            out.add(Triple(_parse_vid(m), Direction(d), _parse_vid(g)))
    return out


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ------------------------------------------------------------------------- stages


@dataclass
class Inputs:
    graph_a: MetabolicGraph
    graph_b: MetabolicGraph
    features: tuple[dict, dict] | None
    seeds: list[InterLink]
    truth: GroundTruth | None

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary([self.graph_a, self.graph_b])


def load_inputs(config: RunConfig) -> Inputs:
    for k in ("graph_a", "graph_b"):
        if not getattr(config, k):
            raise GraphError("MissingInput", f"config.{k} is not set")
    ga = load_graph(config.graph_a, config.tag_a)
    gb = load_graph(config.graph_b, config.tag_b)
    features = None
    if config.mm:
        if not (config.features_a and config.features_b):
            raise GraphError("MissingInput", "mm is on but feature files are not set")
        features = (load_features(config.features_a, ga), load_features(config.features_b, gb))
    seeds: list[InterLink] = []
    if config.kt and config.seed_mode == "file":
        if not config.seeds:
            raise GraphError("MissingInput", "seed_mode=file but config.seeds is not set")
        seeds = load_links(config.seeds, ga, gb)
    truth = GroundTruth.from_json(Path(config.truth).read_text()) if config.truth else None
    return Inputs(ga, gb, features, seeds, truth)


@dataclass
class Splits:
    train: dict[str, frozenset[Triple]]
    test: dict[str, frozenset[Triple]]
    valid: dict[str, frozenset[Triple]]

    def all(self, part: str) -> set[Triple]:
        return set().union(*getattr(self, part).values())

    def write(self, out: Path) -> None:
        for part in ("train", "test", "valid"):
            for tag, ts in getattr(self, part).items():
                write_tagged(ts, out / "splits" / f"{tag}_{part}.tsv")

    @classmethod
    def read(cls, out: Path, tags: tuple[str, str]) -> "Splits":
        parts = {
            part: {tag: frozenset(read_tagged(out / "splits" / f"{tag}_{part}.tsv")) for tag in tags}
            for part in ("train", "test", "valid")
        }
        return cls(**parts)


def make_splits(inputs: Inputs, config: RunConfig, seed: int) -> Splits:
    sa = split_triples(inputs.graph_a, config.split, seed)
    sb = split_triples(inputs.graph_b, config.split, seed + 1)
    ta, tb = config.tag_a, config.tag_b
    return Splits({ta: sa.train, tb: sb.train}, {ta: sa.test, tb: sb.test}, {ta: sa.valid, tb: sb.valid})


@dataclass
class AlignOutcome:
    trainer: AlignmentTrainer
    tracker: DanglingTracker | None
    ledger: TransferLedger
    seeds: list[InterLink]
    active_links: set[InterLink]
    pool: set[Triple]
    per_iteration: list[dict] = field(default_factory=list)


def _link_distances(emb: torch.Tensor, vocab: Vocabulary, links: Iterable[InterLink]) -> dict[InterLink, float]:
    links = sorted(links)
    if not links:
        return {}
    a = emb[[vocab.index[l.left] for l in links]]
    b = emb[[vocab.index[l.right] for l in links]]
    d = (l1_normalize(a) - l1_normalize(b)).abs().sum(-1)
    return {l: float(x) for l, x in zip(links, d)}


def stage_align(inputs: Inputs, splits: Splits, config: RunConfig, seed: int) -> AlignOutcome:
    """Alignment, dangling elimination, link inference and transfer."""
    ta, tb = config.tag_a, config.tag_b
    train = splits.all("train")
    held = splits.all("test") | splits.all("valid")
    trainer = AlignmentTrainer(
        inputs.graph_a,
        inputs.graph_b,
        config.align_config(seed),
        inputs.features,
        structure=(splits.train[ta], splits.train[tb]),
    )
    vocab = trainer.vocab
    if config.seed_mode == "bootstrap":
        seeds = bootstrap_seeds(trainer.v0, vocab, ta, tb, config.gamma_d)
    else:
        seeds = list(inputs.seeds)
    if not seeds:
        raise ValueError("no seed links: alignment has no supervision")
    alpha = compute_alpha(trainer.v0, vocab, seeds, config.alpha_mode, config.alpha)
    tracker = DanglingTracker(DanglingState(alpha=alpha, theta=config.theta, k=config.k)) if config.de else None
    ledger = TransferLedger(config.gamma_d)
    gated: set[InterLink] = set()
    inferred: set[InterLink] = set()
    pool = set(train)
    rows = []
    for it in range(1, config.outer_iterations + 1):
        positives = sorted(set(seeds) | inferred)
        for _ in range(config.epochs_per_iteration):
            trainer.step(positives)
            if tracker is not None:
                state = tracker.epoch(trainer.epoch, trainer.embeddings(), vocab, ta, tb)
                trainer.set_vertex_weights(state.vertex_weights(vocab))
        emb = trainer.embeddings()
        dead = tracker.state.eliminated if tracker is not None else frozenset()
        inferred = {l for l in inferred if l.left not in dead and l.right not in dead}
        inferred |= infer_inter_links(emb, vocab, ta, tb, config.gamma_d, dead, known=seeds)
        # seeds bridge graphs only once the encoder places them within gamma_d
        gated |= {l for l, d in _link_distances(emb, vocab, seeds).items() if d < config.gamma_d}
        active = gated | inferred
        seen = ledger.transferred
        for r in run_transfer(sorted(active), splits.train[ta], splits.train[tb], it):
            if r.triple not in seen:
                ledger.records.append(r)
                seen.add(r.triple)
        pool, leaked = enrich(train, ledger, held)
        # within-graph transfers feed back into the alignment adjacency
        trainer.set_structure({t for t in pool if not t.is_cross_graph})
        rows.append(
            {
                "iteration": it,
                "epoch": trainer.epoch,
                "gated_seeds": len(gated),
                "inferred_links": len(inferred),
                "transferred": len(ledger.records),
                "leaked": len(leaked),
                "eliminated": len(dead),
            }
        )
        log.info("iteration %d: %s", it, rows[-1])
    ledger.inferred_inter = inferred
    return AlignOutcome(trainer, tracker, ledger, seeds, gated | inferred, pool, rows)


def labeled_set(triples_by_graph: dict[str, frozenset[Triple]], graphs: dict[str, MetabolicGraph], rate: int, seed: int):
    items: list[LabeledTriple] = []
    for i, tag in enumerate(sorted(triples_by_graph)):
        items.extend(build_eval_set(triples_by_graph[tag], graphs[tag], rate, seed + i))
    return items


def stage_lp(
    vocab: Vocabulary,
    pool: set[Triple],
    valid_items: list[LabeledTriple],
    config: RunConfig,
    seed: int,
    init: torch.Tensor | None = None,
) -> LPResult:
    train_idx = vocab.encode(sorted(pool))
    valid_idx = vocab.encode([it.triple for it in valid_items])
    labels = np.array([it.label for it in valid_items], dtype=bool)
    return train_lp(vocab, train_idx, valid_idx, labels, config.lp_config(seed), init)


# ---------------------------------------------------------------------------- run


def dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(config: RunConfig, out: Path, command: str = "pipeline") -> None:
    inputs = {}
    for k in PATH_FIELDS:
        p = getattr(config, k)
        if p and Path(p).exists():
            inputs[k] = {"path": Path(p).name, "sha256": sha256_file(p)}
    dump_json({"command": command, "version": __version__, "config": config.to_dict(), "inputs": inputs}, out / "manifest.json")


def _guarded(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as exc:
        raise StageError(stage, exc) from exc


def _prepare(config: RunConfig, out: Path, command: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / "checkpoints").mkdir(exist_ok=True)
    write_manifest(config, out, command)
    torch.set_num_threads(1)  # thread count can change float summation order
    inputs = _guarded("load", load_inputs, config)
    splits = _guarded("split", make_splits, inputs, config, stage_seeds(config.seed)["split"])
    splits.write(out)
    return inputs, splits


def run_alignment(config: RunConfig, inputs: Inputs, splits: Splits, out: Path, report: dict):
    """Alignment stage with its artifacts; fills ``report`` and returns
    ``(pool, final embeddings)``."""
    vocab = inputs.vocab
    res = _guarded("align", stage_align, inputs, splits, config, stage_seeds(config.seed)["align"])
    res.trainer.write_trace(out / "align_loss.csv")
    res.trainer.save_checkpoint(out / "checkpoints" / "align.pt")
    res.ledger.write_audit(out / "transfer_audit.jsonl")
    save_links(res.ledger.inferred_inter, out / "inferred_links.tsv")
    eliminated = res.tracker.state.eliminated if res.tracker else frozenset()
    if res.tracker:
        res.tracker.write(out / "dangling.csv")
    emb = res.trainer.embeddings()
    align_rep = {
        "epochs": res.trainer.epoch,
        "final_loss": res.trainer.trace[-1]["loss"],
        "seeds": len(res.seeds),
        "active_links": len(res.active_links),
        "inferred_links": len(res.ledger.inferred_inter),
        "eliminated": len(eliminated),
        "iterations": res.per_iteration,
    }
    by_rule = {r: sum(1 for x in res.ledger.records if x.rule == r) for r in ("rule-1", "rule-2")}
    report["transfer"] = {
        "gamma_d": config.gamma_d,
        "records": len(res.ledger.records),
        "by_rule": by_rule,
        "leaked": len(res.ledger.leaked),
        "pool_size": len(res.pool),
    }
    if inputs.truth is not None:
        heldout = [l for l in inputs.truth.heldout if l.left in vocab.index and l.right in vocab.index]
        if heldout:
            align_rep["hits1"] = eval_alignment(emb, vocab, heldout)
        report["recovery"] = score_recovery(
            inputs.truth, res.ledger.inferred_inter, eliminated, res.ledger.transferred
        )
    report["alignment"] = align_rep
    write_tagged(res.pool, out / "pool.tsv")
    return res.pool, emb


def align_only(config: RunConfig, out_dir: str | Path) -> dict:
    """Alignment, dangling elimination and transfer; writes the enriched pool."""
    if not config.kt:
        raise ConfigError("align needs kt on")
    out = Path(out_dir)
    inputs, splits = _prepare(config, out, "align")
    report: dict = {"flags": {"kt": config.kt, "mm": config.mm, "de": config.de}, "seed": config.seed}
    run_alignment(config, inputs, splits, out, report)
    dump_json(report, out / "align_report.json")
    return report


def run(config: RunConfig, out_dir: str | Path) -> dict:
    """Execute every enabled stage; returns the report that is also written to
    ``out_dir/report.json``."""
    out = Path(out_dir)
    inputs, splits = _prepare(config, out, "pipeline")
    seeds = stage_seeds(config.seed)
    graphs = {config.tag_a: inputs.graph_a, config.tag_b: inputs.graph_b}
    vocab = inputs.vocab
    report: dict = {"flags": {"kt": config.kt, "mm": config.mm, "de": config.de}, "seed": config.seed}
    init = None
    if config.kt:
        pool, emb = run_alignment(config, inputs, splits, out, report)
        if config.lp_warm_start:
            init = emb
    else:
        pool = splits.all("train")
        write_tagged(pool, out / "pool.tsv")

    valid_items = _guarded("eval-set", labeled_set, splits.valid, graphs, config.eval_rate, seeds["eval"])
    lp = _guarded("linkpred", stage_lp, vocab, pool, valid_items, config, seeds["lp"], init)
    write_lp_trace(lp.trace, out / "lp_trace.csv")
    save_lp_checkpoint(lp, vocab, config.lp_config(seeds["lp"]), out / "checkpoints" / "lp.pt")
    report["linkpred"] = {
        "variant": config.variant,
        "best_epoch": lp.best_epoch,
        "best_valid_f1": lp.best_valid_f1,
        "tau": lp.tau,
        "train_pool": len(pool),
    }
    report["eval"] = _guarded(
        "eval", evaluate_run, out, vocab, graphs, splits, lp.model, lp.tau, config, seeds["eval"]
    )
    dump_json(report, out / "report.json")
    return report


def evaluate_run(out: Path, vocab, graphs, splits: Splits, model, tau, config: RunConfig, seed: int) -> dict:
    # disjoint seed offsets from the validation set
    items = labeled_set(splits.test, graphs, config.eval_rate, seed + 1000)
    rep, scores = evaluate(model, vocab, tau, items)
    write_items(items, scores, tau, out / "eval_items.csv")
    return rep.to_dict()


def eval_from_checkpoint(config: RunConfig, run_dir: str | Path, checkpoint: str | Path | None = None) -> dict:
    """Re-evaluate a finished run's link predictor; identical to the run's own eval."""
    out = Path(run_dir)
    ckpt = Path(checkpoint) if checkpoint else out / "checkpoints" / "lp.pt"
    if not ckpt.exists():
        raise MissingCheckpoint(f"no link prediction checkpoint at {ckpt}")
    torch.set_num_threads(1)
    inputs = load_inputs(replace(config, mm=False, de=False, kt=False))
    graphs = {config.tag_a: inputs.graph_a, config.tag_b: inputs.graph_b}
    splits = Splits.read(out, (config.tag_a, config.tag_b))
    model, tau = load_lp_checkpoint(ckpt, inputs.vocab)
    return evaluate_run(out, inputs.vocab, graphs, splits, model, tau, config, stage_seeds(config.seed)["eval"])


def train_lp_from_run(config: RunConfig, run_dir: str | Path) -> LPResult:
    """Retrain link prediction from a run directory's saved pool and splits."""
    out = Path(run_dir)
    torch.set_num_threads(1)
    inputs = load_inputs(replace(config, mm=False, de=False, kt=False))
    graphs = {config.tag_a: inputs.graph_a, config.tag_b: inputs.graph_b}
    splits = Splits.read(out, (config.tag_a, config.tag_b))
    pool = read_tagged(out / "pool.tsv")
    seeds = stage_seeds(config.seed)
    valid_items = labeled_set(splits.valid, graphs, config.eval_rate, seeds["eval"])
    lp = stage_lp(inputs.vocab, pool, valid_items, config, seeds["lp"])
    write_lp_trace(lp.trace, out / "lp_trace.csv")
    save_lp_checkpoint(lp, inputs.vocab, config.lp_config(seeds["lp"]), out / "checkpoints" / "lp.pt")
    return lp
