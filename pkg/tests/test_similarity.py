from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from headshare.errors import LengthMismatch, SameHead, ShapeMismatch, ZeroVector
from headshare.similarity import MatchFunction, attention_map_similarity, cosine, match_score
from headshare.store import HeadRef, head_slices, with_head_slices
from headshare.toy import make_toy_store

ALL_MATCH = list(MatchFunction)


def oracle_cosine(u, v) -> float:
    """Plain-Python dot/norm over lists."""
    dot = math.fsum(a * b for a, b in zip(u, v))
    nu = math.sqrt(math.fsum(a * a for a in u))
    nv = math.sqrt(math.fsum(b * b for b in v))
    return dot / (nu * nv)


def oracle_vector(store, cfg, h: HeadRef, names) -> list[float]:
    """Concatenate per-head columns row by row with explicit index arithmetic."""
    widths = {"wq": cfg.head_dim_q, "wk": cfg.head_dim_k, "wv": cfg.head_dim_v}
    out = []
    for r in range(cfg.embed_dim):
        for n in names:
            w = widths[n]
            fused = store[f"layer.{h.layer}.attn.{n}"]
            out.extend(float(fused[r, h.head * w + c]) for c in range(w))
    return out


@pytest.mark.parametrize(
    "u,v,expected",
    [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 2], [2, 4], 1.0), ([3, 4], [4, 3], 24 / 25)],
)
def test_cosine_examples(u, v, expected):
    assert cosine(np.array(u, float), np.array(v, float)) == pytest.approx(expected, abs=1e-15)


def test_cosine_errors():
    with pytest.raises(LengthMismatch):
        cosine(np.ones(2), np.ones(3))
    with pytest.raises(ZeroVector):
        cosine(np.zeros(2), np.ones(2))


def test_attention_map_examples():
    uniform = np.full((2, 2), 0.5)
    ident = np.eye(2)
    assert attention_map_similarity(uniform, ident) == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert attention_map_similarity(ident, ident) == 1.0
    with pytest.raises(ShapeMismatch):
        attention_map_similarity(np.eye(2), np.eye(3))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_cosine_self_is_exactly_one(xs):
    u = np.array(xs)
    if np.linalg.norm(u) < 1e-30:
        return
    assert cosine(u, u) == 1.0


@given(
    st.lists(st.floats(-100, 100), min_size=2, max_size=20).flatmap(
        lambda a: st.tuples(st.just(a), st.lists(st.floats(-100, 100), min_size=len(a), max_size=len(a)))
    )
)
def test_cosine_bounded_and_symmetric(pair):
    u, v = map(np.array, pair)
    if min(np.linalg.norm(u), np.linalg.norm(v)) < 1e-30:
        return
    c = cosine(u, v)
    assert -1 - 1e-12 <= c <= 1 + 1e-12
    assert c == cosine(v, u)


def test_identical_heads_score_one_all_variants(tiny_cfg, tiny_store):
    i, j = HeadRef(0, 1), HeadRef(1, 0)
    store = with_head_slices(tiny_store, tiny_cfg, j, head_slices(tiny_store, tiny_cfg, i))
    for f in ALL_MATCH:
        ms = match_score(store, tiny_cfg, i, j, f)
        assert ms.score == 1.0
        if f is MatchFunction.QKV_SEPARATE:
            assert ms.per_matrix == {"q": 1.0, "k": 1.0, "v": 1.0}


def test_scaled_head_scores_one(tiny_cfg, tiny_store):
    i, j = HeadRef(0, 0), HeadRef(1, 1)
    s = head_slices(tiny_store, tiny_cfg, i)
    scaled = type(s)(wq=2 * s.wq, wk=2 * s.wk, wv=s.wv, wo=s.wo)
    store = with_head_slices(tiny_store, tiny_cfg, j, scaled)
    assert match_score(store, tiny_cfg, i, j, MatchFunction.QK_CONCAT).score == 1.0


def test_same_head_rejected(tiny_cfg, tiny_store):
    with pytest.raises(SameHead):
        match_score(tiny_store, tiny_cfg, HeadRef(0, 0), HeadRef(0, 0))


@pytest.mark.parametrize("seed", range(4))
def test_match_score_vs_vector_oracle(seed, tiny_cfg):
    store = make_toy_store(tiny_cfg, seed=seed)
    names = {
        MatchFunction.QK_CONCAT: ("wq", "wk"),
        MatchFunction.Q_ONLY: ("wq",),
        MatchFunction.K_ONLY: ("wk",),
        MatchFunction.V_ONLY: ("wv",),
        MatchFunction.QKV_CONCAT: ("wq", "wk", "wv"),
    }
    heads = list(tiny_cfg.heads())
    for a, i in enumerate(heads):
        for j in heads[a + 1 :]:
            for f, parts in names.items():
                expected = oracle_cosine(oracle_vector(store, tiny_cfg, i, parts), oracle_vector(store, tiny_cfg, j, parts))
                assert match_score(store, tiny_cfg, i, j, f).score == pytest.approx(expected, abs=1e-12)
            sep = match_score(store, tiny_cfg, i, j, MatchFunction.QKV_SEPARATE).per_matrix
            for k in "qkv":
                expected = oracle_cosine(
                    oracle_vector(store, tiny_cfg, i, ("w" + k,)), oracle_vector(store, tiny_cfg, j, ("w" + k,))
                )
                assert sep[k] == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 10_000), c=st.floats(1e-3, 1e3), f=st.sampled_from(ALL_MATCH))
def test_symmetry_scale_invariance_bounds(tiny_cfg, seed, c, f):
    store = make_toy_store(tiny_cfg, seed=seed)
    i, j = HeadRef(0, 0), HeadRef(1, 1)
    a = match_score(store, tiny_cfg, i, j, f)
    b = match_score(store, tiny_cfg, j, i, f)
    assert a.score == b.score
    assert -1 - 1e-12 <= a.score <= 1 + 1e-12
    s = head_slices(store, tiny_cfg, i)
    scaled = with_head_slices(store, tiny_cfg, i, type(s)(wq=c * s.wq, wk=c * s.wk, wv=c * s.wv, wo=s.wo))
    assert match_score(scaled, tiny_cfg, i, j, f).score == pytest.approx(a.score, abs=1e-12)


@settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(0, 10_000))
def test_separate_q_equals_q_only(tiny_cfg, seed):
    store = make_toy_store(tiny_cfg, seed=seed)
    i, j = HeadRef(0, 1), HeadRef(1, 0)
    sep = match_score(store, tiny_cfg, i, j, MatchFunction.QKV_SEPARATE)
    assert sep.per_matrix["q"] == match_score(store, tiny_cfg, i, j, MatchFunction.Q_ONLY).score
