import os

import pytest


def pytest_collection_modifyitems(config, items):
    if os.environ.get("YOSO_FULL_ACCEPTANCE") == "1":
        return
    skip = pytest.mark.skip(reason="set YOSO_FULL_ACCEPTANCE=1 for long runs")
    for item in items:
        if "slow" in item.keywords and "mnist" not in item.keywords:
            item.add_marker(skip)
