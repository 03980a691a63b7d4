import os
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from metalign.graph import Direction, MetabolicGraph, Triple, gene, metabolite

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

torch.set_num_threads(1)

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def make_graph(tag, rows, extra=()):
    """``rows`` are (metabolite_id, "left"|"right", gene_id)."""
    triples = {Triple(metabolite(tag, m), Direction(d), gene(tag, g)) for m, d, g in rows}
    return MetabolicGraph.from_triples(tag, triples, list(extra))


def random_graph(tag, n_m, n_g, n_edges, rng):
    pairs = rng.choice(n_m * n_g, size=min(n_edges, n_m * n_g), replace=False)
    rows = [(f"m{p // n_g}", "left" if rng.random() < 0.5 else "right", f"g{p % n_g}") for p in pairs]
    extra = [metabolite(tag, f"m{i}") for i in range(n_m)] + [gene(tag, f"g{i}") for i in range(n_g)]
    return make_graph(tag, rows, extra)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def toy_pair():
    a = make_graph("A", [("m1", "left", "g1"), ("m2", "right", "g1"), ("m2", "left", "g2"), ("m3", "left", "g3")])
    b = make_graph("B", [("x1", "left", "h1"), ("x2", "right", "h1"), ("x3", "left", "h3")])
    return a, b


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            lines.extend(v for k, v in getattr(rep, "user_properties", []) if k == "verdict")
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(set(lines)):
            terminalreporter.write_line(line)
