from __future__ import annotations

import numpy as np
import pytest

from headshare.store import ModelConfig
from headshare.toy import make_toy_store

TINY = ModelConfig(
    num_layers=2,
    heads_per_layer=2,
    embed_dim=8,
    head_dim_q=3,
    head_dim_k=3,
    head_dim_v=2,
    ffn_dim=6,
    vocab_size=10,
    max_seq_len=16,
)


@pytest.fixture
def tiny_cfg() -> ModelConfig:
    return TINY


@pytest.fixture
def tiny_store(tiny_cfg):
    return make_toy_store(tiny_cfg, seed=3)


def random_cfg(rng: np.random.Generator, max_layers: int = 4, max_heads: int = 4) -> ModelConfig:
    layers = int(rng.integers(2, max_layers + 1))
    heads = int(rng.integers(1, max_heads + 1))
    dq = int(rng.integers(1, 4))
    return ModelConfig(
        num_layers=layers,
        heads_per_layer=heads,
        embed_dim=heads * dq + int(rng.integers(0, 3)),
        head_dim_q=dq,
        head_dim_k=dq,
        head_dim_v=int(rng.integers(1, 4)),
        ffn_dim=int(rng.integers(2, 8)),
        vocab_size=int(rng.integers(2, 12)),
        max_seq_len=16,
    )


# ---- acceptance reporting: one pass/fail line per criterion in the terminal summary

_CRITERIA: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    def record(key: str, passed: bool, detail: str = "") -> None:
        _CRITERIA[key] = (bool(passed), detail)
        assert passed, f"{key}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_CRITERIA, key=lambda k: int(k.split()[0][2:])):
        ok, detail = _CRITERIA[key]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {key}  {detail}")
