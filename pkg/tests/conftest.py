from __future__ import annotations

import numpy as np
import pytest

from mglan.dataio import SyntheticSpec, generate_synthetic
from mglan.hetgraph import build_graph


@pytest.fixture
def toy_graph():
    # u0 spreads t0 early and t1 late; u1 only t0; u2 only t1; t2 is isolated
    edges = [("u0", "t0", 0.0), ("u0", "t1", 59.0), ("u1", "t0", 3.0), ("u2", "t1", -2.0)]
    return build_graph(edges, tweets=["t0", "t1", "t2"])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_events():
    return generate_synthetic(SyntheticSpec(events_per_class=4, users=60, seed=3))


def random_bipartite(rng: np.random.Generator, max_nodes: int = 50, p: float = 0.3):
    """Random user/tweet graph with at most ``max_nodes`` nodes and random delays."""
    n_u = int(rng.integers(1, max_nodes // 2 + 1))
    n_t = int(rng.integers(1, max_nodes - n_u + 1))
    edges = [
        (f"u{u}", f"t{t}", float(rng.choice([0.0, rng.uniform(-5, 2000)])))
        for u in range(n_u)
        for t in range(n_t)
        if rng.random() < p
    ]
    return build_graph(edges, users=[f"u{u}" for u in range(n_u)], tweets=[f"t{t}" for t in range(n_t)])


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
