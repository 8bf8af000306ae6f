import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from basin_forge import tm_core


@pytest.fixture(scope="session")
def erase():
    return tm_core.machine_erase()


@pytest.fixture(scope="session")
def loop():
    return tm_core.machine_loop()


@pytest.fixture(scope="session")
def inc():
    return tm_core.machine_inc()


@pytest.fixture(scope="session")
def all_machines(erase, loop, inc):
    return {"erase": erase, "loop": loop, "inc": inc}
