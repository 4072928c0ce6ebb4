from __future__ import annotations

import json
import sys
from pathlib import Path

import pytest

from wst.stubserver import StubConfig, StubServer, StubService

import toybandit


@pytest.fixture
def toy_files(tmp_path: Path) -> tuple[Path, Path]:
    return toybandit.write_files(tmp_path)


@pytest.fixture
def stub_factory():
    """Start stub servers on ephemeral ports; all are stopped at teardown."""
    servers: list[StubServer] = []

    def start(script: dict | Path, **kw) -> StubServer:
        if isinstance(script, dict):
            from wst.backends import parse_script

            service = StubService(parse_script(script), StubConfig(**kw))
        else:
            service = StubService.from_config(StubConfig(script_path=str(script), **kw))
        server = StubServer(service).start()
        servers.append(server)
        return server

    yield start
    for s in servers:
        s.stop()


def read_jsonl(path: Path) -> list[dict]:
    return [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
