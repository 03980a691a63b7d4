"""Command-line interface.

Errors are reported on stderr as one JSON object
``{"error": <code>, "message": ..., "stage": ...}`` and mapped to exit codes:

== ==============================================
0  success
1  validation found violations
2  missing input file or checkpoint
3  bad configuration (dependency, unknown key, bad value)
4  malformed input data
5  a stage failed at run time (e.g. divergence)
64 command-line usage error (unknown flag, bad value)
== ==============================================
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import fields, replace
from pathlib import Path
from typing import Sequence

from .features import FeatureError
from .graph import GraphError, load_graph, load_links, save_graph, split_triples, validate_bipartite
from .pipeline import (
    PATH_FIELDS,
    ConfigError,
    MissingCheckpoint,
    PRESETS,
    RunConfig,
    StageError,
    align_only,
    eval_from_checkpoint,
    preset,
    run,
    train_lp_from_run,
    write_manifest,
    write_tagged,
    dump_json,
)
from .synth import SYNTH_FILES, SynthError, SynthSpec, generate
from .transfer import TransferLedger, run_transfer

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_STAGE = 5
EXIT_USAGE = 64

MISSING_CODES = {"MissingInput", "MissingCheckpoint"}
HELP_NAMES = {
    "kt": "knowledge transfer: alignment, link inference and triple transfer",
    "mm": "fused text and structure/sequence features as alignment input",
    "de": "dangling-vertex down-weighting and elimination",
    "margin": "alignment margin gamma",
    "gamma_d": "inter-link distance threshold",
    "alpha": "dangling nearest-neighbour distance threshold",
    "theta": "dangling rank fraction",
    "k": "epochs as candidate before elimination",
    "beta": "link prediction margin",
    "lp_neg_rate": "corruptions per positive triple",
    "align_neg_rate": "corrupted links per positive link",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    """One flag per RunConfig field; flags left unset fall back to the config file."""
    defaults = RunConfig()
    g = p.add_argument_group("run configuration (flags override --config)")
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        default = getattr(defaults, f.name)
        desc = HELP_NAMES.get(f.name, f.name.replace("_", " "))
        help_ = f"{desc} (default: {default})"
        if isinstance(default, bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=help_)
        elif f.name == "split":
            g.add_argument(flag, dest=f.name, type=float, nargs=3, default=None, help=help_)
        else:
            kind = type(default) if default is not None else str
            g.add_argument(flag, dest=f.name, type=kind, default=None, help=help_)


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", type=Path, default=None, help="YAML run configuration (default: none)")
    p.add_argument("--seed", type=int, default=None, help="master seed for every RNG (default: 0)")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None, help="ablation preset (default: none)")
    p.add_argument("--data", type=Path, default=None,
                   help="directory written by synth; fills every input path not set otherwise (default: none)")
    if out:
        p.add_argument("--out", type=Path, default=None, help="run directory (default: runs/<timestamp>-<seed>)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metalign", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--log-level", default="WARNING", help="logging level (default: WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate", help="check a graph file for bipartite violations")
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--tag", default="A", help="graph tag (default: A)")

    p = sub.add_parser("split", help="split a graph's triples into train/test/valid files")
    p.add_argument("--graph", type=Path, required=True)
    p.add_argument("--tag", default="A", help="graph tag (default: A)")
    p.add_argument("--ratios", type=float, nargs=3, default=(0.6, 0.3, 0.1), help="train test valid (default: 0.6 0.3 0.1)")
    p.add_argument("--seed", type=int, default=0, help="split seed (default: 0)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("synth", help="generate a synthetic graph pair with ground truth")
    p.add_argument("--spec", type=Path, default=None, help="YAML synth spec (default: built-in standard benchmark)")
    p.add_argument("--seed", type=int, default=None, help="generator seed (default: spec value, 0)")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("transfer", help="apply both transfer rules over a link file")
    p.add_argument("--graph-a", type=Path, required=True)
    p.add_argument("--graph-b", type=Path, required=True)
    p.add_argument("--links", type=Path, required=True)
    p.add_argument("--tag-a", default="A", help="(default: A)")
    p.add_argument("--tag-b", default="B", help="(default: B)")
    p.add_argument("--out", type=Path, required=True)

    for name, text in (
        ("align", "alignment, dangling elimination and transfer"),
        ("pipeline", "full run: alignment, transfer, link prediction, evaluation"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        _add_run_flags(p)

    p = sub.add_parser("train-lp", help="train link prediction on a run directory's enriched pool")
    _common(p, out=False)
    p.add_argument("--run", type=Path, required=True, help="run directory from align or pipeline")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate a trained link predictor")
    _common(p, out=False)
    p.add_argument("--run", type=Path, required=True, help="run directory holding splits/")
    p.add_argument("--checkpoint", type=Path, default=None, help="(default: <run>/checkpoints/lp.pt)")
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="pipeline over a grid of one or two parameters")
    _common(p)
    p.add_argument("--grid", action="append", default=None, metavar="NAME=V1,V2,...",
                   help="parameter grid; repeatable (default: align_layers=1,2,3 and align_lr=1e-4,4e-4,1e-1)")
    _add_run_flags(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    names = {f.name for f in fields(RunConfig)}
    overrides = {k: v for k, v in vars(args).items() if k in names and k != "seed" and v is not None}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if args.config is not None:
        if not args.config.exists():
            raise GraphError("MissingInput", f"config file not found: {args.config}")
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig().with_env()
    if args.preset:
        cfg = preset(cfg, args.preset)
    if getattr(args, "data", None) is not None:
        for k in PATH_FIELDS:
            if k not in overrides:
                overrides[k] = str(args.data / SYNTH_FILES[k])
    # one replace call so the kt/mm/de check sees the final combination
    return replace(cfg, **overrides) if overrides else cfg


def _default_out(seed: int) -> Path:
    return Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{seed}"


def _cmd_validate(args) -> int:
    g = load_graph(args.graph, args.tag)
    violations = validate_bipartite(g)
    for v in violations:
        print(v.to_json())
    return EXIT_VIOLATIONS if violations else EXIT_OK


def _cmd_split(args) -> int:
    g = load_graph(args.graph, args.tag)
    s = split_triples(g, tuple(args.ratios), args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    for part in ("train", "test", "valid"):
        save_graph(g, args.out / f"{part}.tsv", getattr(s, part))
    print(json.dumps({"train": len(s.train), "test": len(s.test), "valid": len(s.valid)}, sort_keys=True))
    return EXIT_OK


def _cmd_synth(args) -> int:
    if args.spec is not None and not args.spec.exists():
        raise GraphError("MissingInput", f"spec file not found: {args.spec}")
    spec = SynthSpec.from_file(args.spec, seed=args.seed) if args.spec else SynthSpec(seed=args.seed or 0)
    inst = generate(spec)
    inst.write(args.out)
    print(
        json.dumps(
            {
                "graph_a": {"vertices": len(inst.graph_a.vertices), "triples": len(inst.graph_a.triples)},
                "graph_b": {"vertices": len(inst.graph_b.vertices), "triples": len(inst.graph_b.triples)},
                "seeds": len(inst.seeds),
                "danglings": len(inst.truth.planted_danglings),
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def _cmd_transfer(args) -> int:
    ga = load_graph(args.graph_a, args.tag_a)
    gb = load_graph(args.graph_b, args.tag_b)
    links = load_links(args.links, ga, gb)
    ledger = TransferLedger(gamma_d=float("nan"), records=run_transfer(links, ga.triples, gb.triples))
    args.out.mkdir(parents=True, exist_ok=True)
    ledger.write_audit(args.out / "transfer_audit.jsonl")
    write_tagged(ledger.transferred, args.out / "transferred.tsv")
    print(json.dumps({"transferred": len(ledger.records)}))
    return EXIT_OK


def _cmd_align(args) -> int:
    cfg = resolve_config(args)
    out = args.out or _default_out(cfg.seed)
    rep = align_only(cfg, out)
    print(json.dumps({"out": str(out), "transfer": rep["transfer"]}, sort_keys=True))
    return EXIT_OK


def _cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    out = args.out or _default_out(cfg.seed)
    rep = run(cfg, out)
    print(json.dumps({"out": str(out), "f1": rep["eval"]["f1"]}, sort_keys=True))
    return EXIT_OK


def _cmd_train_lp(args) -> int:
    cfg = resolve_config(args)
    lp = train_lp_from_run(cfg, args.run)
    print(json.dumps({"best_epoch": lp.best_epoch, "best_valid_f1": lp.best_valid_f1}, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = resolve_config(args)
    rep = eval_from_checkpoint(cfg, args.run, args.checkpoint)
    dump_json(rep, args.run / "eval_report.json")
    print(json.dumps({k: rep[k] for k in ("precision", "recall", "f1")}, sort_keys=True))
    return EXIT_OK


def _parse_grid(items: Sequence[str] | None) -> dict[str, list]:
    if not items:
        return {"align_layers": [1, 2, 3], "align_lr": [1e-4, 4e-4, 1e-1]}
    types = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    grid = {}
    for item in items:
        name, _, values = item.partition("=")
        if name not in types or not values:
            raise UsageError(f"bad grid entry {item!r}")
        grid[name] = [types[name](v) for v in values.split(",")]
    return grid


def _cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    grid = _parse_grid(args.grid)
    out = args.out or _default_out(cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(cfg, out, "sweep")
    names = sorted(grid)
    combos = [[]]
    for n in names:
        combos = [c + [v] for c in combos for v in grid[n]]
    rows = []
    for combo in combos:
        setting = dict(zip(names, combo))
        label = "-".join(f"{k}={v}" for k, v in setting.items())
        rep = run(replace(cfg, **setting), out / label)
        rows.append({**setting, "precision": rep["eval"]["precision"], "recall": rep["eval"]["recall"], "f1": rep["eval"]["f1"]})
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=names + ["precision", "recall", "f1"])
        w.writeheader()
        w.writerows(rows)
    print(json.dumps({"out": str(out), "runs": len(rows)}))
    return EXIT_OK


COMMANDS = {
    "validate": _cmd_validate,
    "split": _cmd_split,
    "synth": _cmd_synth,
    "transfer": _cmd_transfer,
    "align": _cmd_align,
    "pipeline": _cmd_pipeline,
    "train-lp": _cmd_train_lp,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
}


def _fail(code: str, message: str, exit_code: int, stage: str | None = None) -> int:
    err = {"error": code, "message": message}
    if stage:
        err["stage"] = stage
    print(json.dumps(err, sort_keys=True), file=sys.stderr)
    return exit_code


def _classify(exc: BaseException, stage: str | None = None) -> int:
    if isinstance(exc, MissingCheckpoint):
        return _fail("MissingCheckpoint", str(exc), EXIT_MISSING, stage)
    if isinstance(exc, (GraphError, FeatureError)):
        code = exc.code
        return _fail(code, str(exc), EXIT_MISSING if code in MISSING_CODES else EXIT_DATA, stage)
    if isinstance(exc, FileNotFoundError):
        return _fail("MissingInput", str(exc), EXIT_MISSING, stage)
    if isinstance(exc, ConfigError):
        return _fail(exc.code, str(exc), EXIT_CONFIG, stage)
    if isinstance(exc, (SynthError, ValueError, TypeError)) and stage is None:
        return _fail("BadConfig", str(exc), EXIT_CONFIG)
    return _fail(type(exc).__name__, str(exc), EXIT_STAGE, stage)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("Usage", str(exc), EXIT_USAGE)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail("Usage", str(exc), EXIT_USAGE)
    except StageError as exc:
        return _classify(exc.cause, exc.stage)
    except Exception as exc:
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
