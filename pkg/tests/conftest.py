import contextlib

import pytest

from aqora.cbo import CboConfig
from aqora.env import bind_queries
from aqora.relstore import as_mapping, generate_dataset
from aqora.stagesim import SimConfig
from aqora.workload import WorkloadSpec, generate_workload

from gen import star_schema


@pytest.fixture(scope="session")
def small_world():
    """A star schema, a 4-table workload over it, and bound simulated queries."""
    schema = star_schema(20_000, 1.0)
    rels = as_mapping(generate_dataset(schema, 5))
    spec = WorkloadSpec(n_templates=2, template_tables=4, queries_per_template=6, n_test=4, seed=5,
                        selectivity=(0.05, 1.0), filters_per_query=(1, 2))
    wl = generate_workload(spec, schema)
    sim, cbo = SimConfig(seed=5), CboConfig()
    return {"schema": schema, "relations": rels, "workload": wl, "sim": sim, "cbo": cbo,
            "train": bind_queries(wl.train, rels, sim, cbo, 5), "test": bind_queries(wl.test, rels, sim, cbo, 5)}


ACCEPTANCE: dict[int, str] = {}


class _Verdict:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def acceptance():
    """Context manager that records a PASS/FAIL line for one acceptance criterion."""
    @contextlib.contextmanager
    def record(number, title):
        v = _Verdict()
        try:
            yield v
        except BaseException as exc:
            why = f"{type(exc).__name__}: {exc}".splitlines()[0][:200]
            ACCEPTANCE[number] = f"FAIL  AC{number} {title} | {v.detail} | {why}"
            raise
        ACCEPTANCE[number] = f"PASS  AC{number} {title} | {v.detail}"
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
