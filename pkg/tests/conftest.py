from __future__ import annotations

import pytest

from fedfabric.clock import VirtualClock
from fedfabric.stores import StoreRegistry
from fedfabric.stores.local import FileSystemStore, InMemoryStore, WideAreaStore
from fedfabric.stores.model import NetworkModel

INSTANT = NetworkModel()

# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def instant_stores(tmp_path):
    """One store of each kind, in-process and without injected latency."""
    clock = VirtualClock()
    stores = {
        "kv": InMemoryStore("kv", INSTANT, clock=clock),
        "fs": FileSystemStore("fs", tmp_path / "fs", INSTANT, clock=clock),
        "wan": WideAreaStore("wan", tmp_path / "wan", INSTANT, clock=clock, staging_model=INSTANT),
    }
    return StoreRegistry(stores)
