from __future__ import annotations

import shutil
from importlib import resources
from pathlib import Path

import pytest

from mmkg.gateway import Gateway, MockBackend, MockRule

_acceptance: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    entry = _acceptance.setdefault(number, {"title": title, "ok": True, "seen": False})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["seen"] = True
        if report.outcome != "passed":
            entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        entry = _acceptance[number]
        status = "PASS" if entry["ok"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}: {status}  {entry['title']}")


@pytest.fixture
def make_gateway(tmp_path):
    """Factory for a mock-backed gateway with optional scripted rules."""

    def factory(rules=(), seed=0, **kwargs):
        rules = [r if isinstance(r, MockRule) else MockRule(**r) for r in rules]
        kwargs.setdefault("sleep", lambda s: None)
        return Gateway(MockBackend(seed=seed, rules=rules), **kwargs)

    return factory


@pytest.fixture
def demo_workspace(tmp_path) -> Path:
    dest = tmp_path / "demo"
    with resources.as_file(resources.files("mmkg") / "demo") as src:
        shutil.copytree(src, dest, ignore=shutil.ignore_patterns("__init__.py", "__pycache__"))
    return dest


@pytest.fixture
def png(tmp_path):
    """Write a small distinct PNG and return its path."""
    from PIL import Image

    counter = iter(range(1, 10_000))

    def factory(name: str = "", color=None) -> Path:
        i = next(counter)
        path = tmp_path / (name or f"img_{i}.png")
        Image.new("RGB", (4, 4), color or (i * 37 % 256, i * 91 % 256, i * 13 % 256)).save(path)
        return path

    return factory
