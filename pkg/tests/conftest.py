import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from hinembed.graph import Coverage, RelationType, Schema, graph_from_triples

settings.register_profile("default", max_examples=50, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def follow_schema():
    return Schema(("user",), (RelationType("follows", "user", "user", Coverage.HIGH),))


@pytest.fixture
def two_type_schema():
    return Schema(
        ("user", "item"),
        (
            RelationType("follows", "user", "user", Coverage.HIGH),
            RelationType("engages", "user", "item", Coverage.HIGH),
            RelationType("clicks", "user", "item", Coverage.LOW),
        ),
    )


def random_graph(schema, n_edges, seed, sizes=None):
    """Edges drawn uniformly within each relation's type pair; every entity is touched first."""
    rng = np.random.default_rng(seed)
    sizes = sizes or {t: 6 for t in schema.entity_types}
    triples = []
    for r in schema.relations:
        for i in range(sizes[r.source_type]):
            triples.append((f"{r.source_type}{i}", r.name, f"{r.target_type}{rng.integers(sizes[r.target_type])}"))
        for i in range(sizes[r.target_type]):
            triples.append((f"{r.source_type}{rng.integers(sizes[r.source_type])}", r.name, f"{r.target_type}{i}"))
    for _ in range(n_edges):
        r = schema.relations[rng.integers(len(schema.relations))]
        triples.append((f"{r.source_type}{rng.integers(sizes[r.source_type])}", r.name,
                        f"{r.target_type}{rng.integers(sizes[r.target_type])}"))
    return graph_from_triples(schema, triples)


# -- acceptance summary -----------------------------------------------------

_ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if report.when != "call":
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        status = "PASS" if report.passed else "FAIL"
        _ACCEPTANCE[props["criterion"]] = f"criterion {props['criterion']:>2} {status}  {props.get('detail', '')}"


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
