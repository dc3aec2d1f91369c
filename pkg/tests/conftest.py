from __future__ import annotations

import socket

import pytest


class NetworkForbidden(AssertionError):
    pass


def _blocked(*args, **kwargs):
    raise NetworkForbidden("tests must not open network connections")


@pytest.fixture(autouse=True)
def no_network(monkeypatch):
    """Every test runs with outbound sockets disabled."""
    monkeypatch.setattr(socket.socket, "connect", _blocked)
    monkeypatch.setattr(socket.socket, "connect_ex", _blocked)
    monkeypatch.setattr(socket, "create_connection", _blocked)
    monkeypatch.setattr(socket, "getaddrinfo", _blocked)


@pytest.fixture(autouse=True)
def isolated_dirs(monkeypatch, tmp_path):
    """Keep CLI caches and run outputs inside the test's temp directory."""
    monkeypatch.setenv("VQAGENT_CACHE_DIR", str(tmp_path / "cache"))
    monkeypatch.setenv("VQAGENT_OUTPUT_DIR", str(tmp_path / "runs"))
    monkeypatch.delenv("VQAGENT_TEMPLATE_DIR", raising=False)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    """Expose each phase's report on the item so fixtures can see the outcome."""
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
