"""Five-seed ablation table on the standard synthetic benchmark.

    python scripts/ablation.py --out runs/ablation [--seeds 0 1 2 3 4]
"""
import argparse
import json
import statistics
import time
from pathlib import Path

from metalign.pipeline import PRESETS, RunConfig, preset, run
from metalign.synth import SynthSpec, generate

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    ap.add_argument("--presets", nargs="+", default=["full", "no-de", "no-mm-de", "baseline"], choices=sorted(PRESETS))
    args = ap.parse_args()

    f1 = {p: [] for p in args.presets}
    for seed in args.seeds:
        data = generate(SynthSpec.from_file(CONFIGS / "std_synth.yaml", seed=seed)).write(args.out / f"data{seed}")
        paths = {k: str(v) for k, v in data.items() if k in RunConfig.__dataclass_fields__}
        row = []
        for name in args.presets:
            t0 = time.perf_counter()
            rep = run(preset(RunConfig.load(CONFIGS / "bench.yaml", seed=seed, **paths), name), args.out / f"{name}{seed}")
            f1[name].append(rep["eval"]["f1"])
            row.append(f"{name}={rep['eval']['f1']:.4f} ({time.perf_counter() - t0:.0f}s)")
        print(seed, " ".join(row), flush=True)
    summary = {
        p: {"mean": statistics.fmean(v), "se": statistics.stdev(v) / len(v) ** 0.5 if len(v) > 1 else 0.0, "f1": v}
        for p, v in f1.items()
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for p, s in summary.items():
        print(f"{p:10s} {s['mean']:.4f} ± {s['se']:.4f}")


if __name__ == "__main__":
    main()
