"""Attention-map similarity analyses and weight-vs-map agreement (matched degree)."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from ._parallel import pmap
from .engine import ForwardTrace, forward
from .errors import AlphaOutOfRange
from .sharing import Candidate, CandidateBuffer, build_candidate_buffer, count_for_ratio, select_top_n
from .similarity import DEFAULT_MATCH, MatchFunction, attention_map_similarity
from .store import HeadRef, ModelConfig, TensorStore

HeadPair = tuple[HeadRef, HeadRef]  # (keep, replace)


@dataclass(frozen=True)
class DegreeReport:
    k: int
    set_weight: list[HeadPair]
    set_attn: list[HeadPair]
    intersection: int
    overlap_ratio: float
    num_samples: int

    @property
    def degree_per_sample(self) -> float:
        """Matched heads divided by sample count, the quotient as literally defined."""
        return self.intersection / self.num_samples


def traces_for(
    store: TensorStore, cfg: ModelConfig, inputs: Sequence[Sequence[int]], threads: int | None = None
) -> list[ForwardTrace]:
    if not inputs:
        raise ValueError("need at least one input sequence")
    return pmap(lambda x: forward(store, cfg, x), inputs, threads)


def head_similarity_matrix(traces: Sequence[ForwardTrace], cfg: ModelConfig) -> np.ndarray:
    """M x M mean attention-map cosine over inputs, heads in (layer, head) order."""
    heads = list(cfg.heads())
    M = len(heads)
    acc = np.zeros((M, M))
    for t in traces:
        for a in range(M):
            acc[a, a] += 1.0
            for b in range(a + 1, M):
                s = attention_map_similarity(t.attention_map(heads[a]), t.attention_map(heads[b]))
                acc[a, b] += s
                acc[b, a] += s
    return acc / len(traces)


def layer_similarity_matrix(
    store: TensorStore, cfg: ModelConfig, inputs: Sequence[Sequence[int]], *, threads: int | None = None
) -> np.ndarray:
    """L x L: mean over inputs and head index of the cosine between layers' maps."""
    traces = traces_for(store, cfg, inputs, threads)
    n = cfg.num_layers
    out = np.eye(n)
    for p in range(n):
        for q in range(p + 1, n):
            vals = [
                attention_map_similarity(t.attention[p, h], t.attention[q, h])
                for t in traces
                for h in range(cfg.heads_per_layer)
            ]
            out[p, q] = out[q, p] = float(np.mean(vals))
    return out


def attention_candidate_buffer(sim: np.ndarray, cfg: ModelConfig) -> CandidateBuffer:
    """Same search as the weight-based buffer, scored by mean attention-map similarity."""
    heads = list(cfg.heads())
    H = cfg.heads_per_layer
    entries = []
    for idx in range(H, len(heads)):
        best, best_score = 0, sim[idx, 0]
        for j in range(1, heads[idx].layer * H):
            if sim[idx, j] > best_score:
                best, best_score = j, sim[idx, j]
        entries.append(Candidate(heads[idx], heads[best], float(best_score)))
    return CandidateBuffer(tuple(entries), None)


def matched_degree(
    store: TensorStore,
    cfg: ModelConfig,
    inputs: Sequence[Sequence[int]],
    alpha: float,
    f: MatchFunction | str = DEFAULT_MATCH,
    *,
    threads: int | None = None,
) -> DegreeReport:
    """Overlap of the top-k head pairs ranked by weight similarity and by attention maps."""
    k = count_for_ratio(alpha, cfg.total_heads)
    if k < 1:
        raise AlphaOutOfRange(f"ratio {alpha} selects no head pairs")
    weight_plan = select_top_n(build_candidate_buffer(store, cfg, f, threads=threads), cfg, alpha)
    sim = head_similarity_matrix(traces_for(store, cfg, inputs, threads), cfg)
    attn_plan = select_top_n(attention_candidate_buffer(sim, cfg), cfg, alpha)
    set_a = [(p.keep, p.replace) for p in weight_plan.pairs]
    set_b = [(p.keep, p.replace) for p in attn_plan.pairs]
    inter = len(set(set_a) & set(set_b))
    k = len(set_a)
    return DegreeReport(
        k=k,
        set_weight=set_a,
        set_attn=set_b,
        intersection=inter,
        overlap_ratio=inter / k,
        num_samples=len(inputs),
    )
