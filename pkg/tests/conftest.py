import os
from importlib import resources

import pytest


@pytest.fixture
def tmp_cwd(tmp_path):
    """Run the test from a scratch working directory.

    Shipped configs write checkpoints to relative paths, so anything that
    runs them should not execute from the repository root.
    """
    old = os.getcwd()
    os.chdir(tmp_path)
    try:
        yield tmp_path
    finally:
        os.chdir(old)


def shipped_config(name: str) -> str:
    return (resources.files("kdkit") / "configs" / f"{name}.yaml").read_text()


@pytest.fixture
def shipped():
    return shipped_config
