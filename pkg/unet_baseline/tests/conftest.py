import subprocess
import sys

import pytest


def run_atlas_cli(*args):
    """Drive the atlas pipeline through its public CLI."""
    proc = subprocess.run(
        [sys.executable, "-m", "atlasseg.cli", *map(str, args)],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise AssertionError(f"atlasseg {' '.join(map(str, args))} failed:\n{proc.stderr}")
    return proc


@pytest.fixture(scope="session")
def phantom_pool(tmp_path_factory):
    """Eight labeled 64x64 bundles, normalized, produced by the atlas CLI."""
    root = tmp_path_factory.mktemp("pool")
    run_atlas_cli(
        "phantom", "--seed", 31, "--resolution", 64, "--bank-size", 8, "--test-size", 2,
        "--deform-mag", 5, "--out", root / "raw",
    )
    run_atlas_cli("preprocess", "--in", root / "raw" / "bank", "--out", root / "bank")
    run_atlas_cli("preprocess", "--in", root / "raw" / "test", "--out", root / "test")
    return root
