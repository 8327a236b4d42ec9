import numpy as np
import pytest

from deepbnd import pipeline

CRITERIA = {}


def record(number: int, ok: bool, detail: str = "") -> None:
    """Remember the outcome of an acceptance criterion for the summary."""
    CRITERIA[number] = (bool(ok), detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_config(**over):
    base = {"datasets": {"train": {"n": 6, "seed": 1}, "validation": {"n": 3, "seed": 2},
                         "test": {"n": 3, "seed": 3}},
            "geometry": {"divisions": 4},
            "n_rb": 2, "sweep": [1, 2],
            "train": {"epochs": 5, "hidden": [6], "batch_size": 4}}
    return pipeline.load_config(None, pipeline._merge(base, over))


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Desk-scale offline run plus the online report (4x4 lattice, 256 snapshots)."""
    cfg = pipeline.default_config()
    ws = tmp_path_factory.mktemp("desk")
    pipeline.run_offline(cfg, ws)
    reports = pipeline.run_online(cfg, ws)
    return {"cfg": cfg, "ws": ws, "reports": reports, "dbm": pipeline.load_bundle(ws)}


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    cfg = tiny_config()
    ws = tmp_path_factory.mktemp("tiny")
    pipeline.run_offline(cfg, ws)
    return {"cfg": cfg, "ws": ws}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
