from __future__ import annotations

import warnings

import pytest
import torch

from cpga import dataset as D

torch.set_num_threads(1)

SMALL = D.BuildSettings(grid_resolution=24, out_px=16, depth=16, seed=0)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Two geometries at coarse resolution: 216 records with 16^3 stacks."""
    root = tmp_path_factory.mktemp("small_ds")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return D.build_dataset(root, SMALL, config_hash="test", geometries=["primitive", "gyroid"])


# acceptance verdicts, printed once at the end of the run
VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} | {detail}"
    VERDICTS.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
