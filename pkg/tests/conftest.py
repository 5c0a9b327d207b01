from pathlib import Path

import numpy as np
import pytest

import lrbench
from lrbench.tinyvit import TinyViTConfig

DATA = Path(lrbench.__file__).parent / "data"


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# depth-2, dim-8 model used wherever the full toy config would be slow
SMALL = TinyViTConfig(input_res=16, patch_size=8, dim=8, depth=2, heads=2, embed_dim_out=8)


@pytest.fixture
def small_cfg() -> TinyViTConfig:
    return SMALL


_VERDICTS: dict[int, str] = {}


def record_verdict(number: int, title: str, ok: bool, detail: str) -> str:
    line = f"[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    _VERDICTS[number] = line
    return line


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[n])
