from __future__ import annotations

import numpy as np
import pytest

from headshare.analysis import (
    attention_candidate_buffer,
    head_similarity_matrix,
    layer_similarity_matrix,
    matched_degree,
    traces_for,
)
from headshare.engine import forward
from headshare.errors import AlphaOutOfRange
from headshare.store import HeadRef
from headshare.toy import TOY_CONFIG, make_corpus, make_toy_store

R = HeadRef
PLANTED = [(R(0, 1), R(1, 0)), (R(0, 3), R(2, 2)), (R(1, 2), R(2, 1))]


def _cos(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _planted_store(seed):
    return make_toy_store(TOY_CONFIG, seed, qk_scale=2.0, residual_scale=0.1, planted=PLANTED)


def _inputs(seed, n=8, length=12):
    return make_corpus(TOY_CONFIG, seed + 100, num_sequences=n, length=length)


def enumerate_top_k(cfg, score, k):
    """Best earlier-layer partner per head, then the k highest; ties favor lower indices."""
    heads = list(cfg.heads())
    best = []
    for i, h in enumerate(heads):
        if h.layer == 0:
            continue
        scored = [(score(heads[j], h), -j) for j in range(len(heads)) if heads[j].layer < h.layer]
        s, neg_j = max(scored)
        best.append((s, -i, heads[-neg_j], h))
    best.sort(key=lambda t: (-t[0], -t[1]))
    return {(keep, rep) for _, _, keep, rep in best[:k]}


@pytest.mark.parametrize("seed", range(3))
def test_planted_duplicates_fully_overlap(seed):
    rep = matched_degree(_planted_store(seed), TOY_CONFIG, _inputs(seed), alpha=3 / 12)
    assert rep.k == 3
    assert set(rep.set_weight) == set(rep.set_attn) == {(k, r) for k, r in PLANTED}
    assert rep.overlap_ratio == 1.0
    assert rep.degree_per_sample == 3 / 8


def test_single_planted_pair_at_k_one():
    store = make_toy_store(TOY_CONFIG, 9, qk_scale=2.0, residual_scale=0.1, planted=[(R(0, 2), R(2, 3))])
    rep = matched_degree(store, TOY_CONFIG, _inputs(9), alpha=1 / 12)
    assert rep.k == 1 and rep.intersection == 1
    assert rep.set_weight == rep.set_attn == [(R(0, 2), R(2, 3))]


@pytest.mark.parametrize("seed", range(4))
def test_both_rankings_match_enumeration(seed):
    cfg = TOY_CONFIG
    store = make_toy_store(cfg, seed)
    inputs = _inputs(seed, n=4, length=10)
    rep = matched_degree(store, cfg, inputs, alpha=4 / 12)

    def weight_score(a, b):
        va = np.hstack([store[f"layer.{a.layer}.attn.{m}"][:, a.head * 4 : (a.head + 1) * 4] for m in ("wq", "wk")])
        vb = np.hstack([store[f"layer.{b.layer}.attn.{m}"][:, b.head * 4 : (b.head + 1) * 4] for m in ("wq", "wk")])
        return _cos(va, vb)

    maps = [forward(store, cfg, x).attention for x in inputs]

    def attn_score(a, b):
        return float(np.mean([_cos(m[a.layer, a.head], m[b.layer, b.head]) for m in maps]))

    assert rep.k == 4
    assert set(rep.set_weight) == enumerate_top_k(cfg, weight_score, 4)
    assert set(rep.set_attn) == enumerate_top_k(cfg, attn_score, 4)
    assert rep.intersection == len(set(rep.set_weight) & set(rep.set_attn))
    assert rep.overlap_ratio == rep.intersection / 4


def test_head_similarity_matrix_properties():
    store = make_toy_store(TOY_CONFIG, 2)
    sim = head_similarity_matrix(traces_for(store, TOY_CONFIG, _inputs(2, n=3)), TOY_CONFIG)
    assert sim.shape == (12, 12)
    np.testing.assert_array_equal(sim, sim.T)
    np.testing.assert_array_equal(np.diag(sim), np.ones(12))
    assert np.all(sim <= 1.0) and np.all(sim > 0.0)  # maps are nonnegative


def test_layer_similarity_matrix_vs_oracle():
    cfg = TOY_CONFIG
    store = make_toy_store(cfg, 5)
    inputs = _inputs(5, n=3, length=9)
    m = layer_similarity_matrix(store, cfg, inputs)
    maps = [forward(store, cfg, x).attention for x in inputs]
    oracle = np.eye(cfg.num_layers)
    for p in range(cfg.num_layers):
        for q in range(cfg.num_layers):
            if p != q:
                oracle[p, q] = np.mean([_cos(a[p, h], a[q, h]) for a in maps for h in range(cfg.heads_per_layer)])
    np.testing.assert_allclose(m, oracle, rtol=1e-12)
    np.testing.assert_array_equal(m, m.T)
    np.testing.assert_array_equal(np.diag(m), np.ones(cfg.num_layers))


def test_attention_buffer_prefers_lowest_index_on_ties():
    sim = np.full((12, 12), 0.5)
    buf = attention_candidate_buffer(sim, TOY_CONFIG)
    assert len(buf.entries) == 8
    assert all(c.best == R(0, 0) for c in buf.entries)


@pytest.mark.parametrize("scale", [0.5, 3.0])
def test_overlap_invariant_to_weight_rescaling(scale):
    # Scaling q and k by s changes the maps, but cosine rankings of weights stay put.
    store = _planted_store(1)
    scaled = store.replace({n: store[n] * scale for n in store if n.endswith(("wq", "wk"))})
    a = matched_degree(store, TOY_CONFIG, _inputs(1), alpha=3 / 12)
    b = matched_degree(scaled, TOY_CONFIG, _inputs(1), alpha=3 / 12)
    assert a.set_weight == b.set_weight
    assert a.overlap_ratio == b.overlap_ratio == 1.0


def test_deterministic_and_thread_independent():
    store = make_toy_store(TOY_CONFIG, 4)
    inputs = _inputs(4, n=5)
    reps = [matched_degree(store, TOY_CONFIG, inputs, alpha=0.3, threads=t) for t in (1, 3, 1)]
    assert reps[0] == reps[1] == reps[2]


def test_ratio_selecting_nothing_rejected():
    with pytest.raises(AlphaOutOfRange):
        matched_degree(make_toy_store(TOY_CONFIG, 0), TOY_CONFIG, _inputs(0, n=2), alpha=0.0)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        traces_for(make_toy_store(TOY_CONFIG, 0), TOY_CONFIG, [])
