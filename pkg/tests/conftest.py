import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mobalign import graphbuild

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_graph(rng, n_nodes, p=0.5, max_weight=5, ids=None):
    """Random symmetric weighted graph with integer weights."""
    ids = np.sort(rng.choice(10_000, n_nodes, replace=False)).astype(np.uint64) if ids is None else ids
    iu, ju = np.triu_indices(n_nodes, 1)
    keep = rng.random(len(iu)) < p
    w = rng.integers(1, max_weight + 1, keep.sum()).astype(float)
    return graphbuild.graph_from_edges(ids, iu[keep], ju[keep], w)


def two_cliques(size=10):
    src, dst = [], []
    for base in (0, size):
        for i in range(size):
            for j in range(i + 1, size):
                src.append(base + i)
                dst.append(base + j)
    src.append(size - 1)
    dst.append(size)
    ids = np.arange(2 * size, dtype=np.uint64)
    return graphbuild.graph_from_edges(ids, np.array(src), np.array(dst), np.ones(len(src)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# (criterion, passed, detail) rows appended by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"C{crit:<2d} {'PASS' if ok else 'FAIL'}  {detail}")
