import json
from pathlib import Path

import pytest

from t2imt.er import CanonMap, load_canon_map

FIXTURES = Path(__file__).parent / "fixtures"
SEEDS50 = FIXTURES / "seeds50.jsonl"

TINY_REGISTRY = {
    "entities": ["dog", "cat", "bed", "person", "umbrella"],
    "relations": ["with", "on", "holding"],
}


@pytest.fixture(scope="session")
def canon():
    return load_canon_map()


@pytest.fixture(scope="session")
def tiny_canon():
    return CanonMap.from_dict(TINY_REGISTRY)


@pytest.fixture
def write_config(tmp_path):
    """Write a campaign config next to a copy of the 50-seed corpus; returns its path."""

    def _write(seeds=None, **overrides):
        seeds_file = tmp_path / "seeds.jsonl"
        if seeds is None:
            seeds_file.write_text(SEEDS50.read_text(encoding="utf-8"), encoding="utf-8")
        else:
            seeds_file.write_text("".join(json.dumps(s) + "\n" for s in seeds), encoding="utf-8")
        cfg = {
            "seeds": "seeds.jsonl",
            "output_dir": "run",
            "generators": [{"id": "sim", "kind": "simulator"}],
            "detector": {"kind": "sidecar"},
            "rng_seed": 11,
            "max_workers": 4,
        }
        cfg.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg), encoding="utf-8")
        return path

    return _write


# --- acceptance criteria summary -------------------------------------------------

_CRITERIA: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and rep.passed):
        return
    number, title = marker.args
    ok = rep.passed and _CRITERIA.get(number, (title, True))[1]
    _CRITERIA[number] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}")
