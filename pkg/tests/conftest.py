"""Shared pytest configuration: the slow marker for end-to-end acceptance runs."""

import pytest


def pytest_addoption(parser: pytest.Parser) -> None:
    """Register --runslow."""
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run slow end-to-end fits")


def pytest_configure(config: pytest.Config) -> None:
    """Declare the slow marker."""
    config.addinivalue_line("markers", "slow: end-to-end fit, skipped without --runslow")


def pytest_collection_modifyitems(config: pytest.Config, items: list[pytest.Item]) -> None:
    """Skip slow tests unless --runslow is given."""
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)
