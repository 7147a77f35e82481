"""DirectShare: match heads against earlier layers, pick the top-N pairs, tie them."""

from __future__ import annotations

import json
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from os import PathLike
from typing import Any

import numpy as np

from .errors import AlphaOutOfRange, PlanConfigMismatch, TooFewLayers
from ._parallel import pmap
from .similarity import DEFAULT_MATCH, MatchFunction, cosine, score_slices
from .store import (
    ATTN_NAMES,
    FFN_NAMES,
    HeadRef,
    ModelConfig,
    TensorStore,
    head_slices,
)


@dataclass(frozen=True)
class Candidate:
    this: HeadRef
    best: HeadRef
    score: float


@dataclass(frozen=True)
class CandidateBuffer:
    """Best earlier-layer match for every head outside the first layer, in head order."""

    entries: tuple[Candidate, ...]
    match_function: MatchFunction | None = DEFAULT_MATCH  # None when scored from attention maps

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


@dataclass(frozen=True)
class SharePair:
    keep: HeadRef
    replace: HeadRef
    score: float | None = None


@dataclass(frozen=True)
class FfnPair:
    keep: int
    replace: int
    score: float | None = None


@dataclass
class SharePlan:
    pairs: list[SharePair] = field(default_factory=list)
    ratio: float = 0.0
    match_function: MatchFunction = DEFAULT_MATCH
    ffn_layers: list[FfnPair] = field(default_factory=list)
    ffn_ratio: float = 0.0

    def validate(self, cfg: ModelConfig) -> None:
        seen: set[HeadRef] = set()
        for p in self.pairs:
            for h in (p.keep, p.replace):
                if not (0 <= h.layer < cfg.num_layers and 0 <= h.head < cfg.heads_per_layer):
                    raise PlanConfigMismatch(f"head {h} outside model config")
            if p.keep.layer >= p.replace.layer:
                raise PlanConfigMismatch(f"keep {p.keep} is not in an earlier layer than {p.replace}")
            if p.replace in seen:
                raise PlanConfigMismatch(f"head {p.replace} replaced twice")
            seen.add(p.replace)
        replaced_layers: set[int] = set()
        for fp in self.ffn_layers:
            if not (0 <= fp.keep < fp.replace < cfg.num_layers):
                raise PlanConfigMismatch(f"ffn pair {fp.keep}->{fp.replace} invalid")
            if fp.replace in replaced_layers:
                raise PlanConfigMismatch(f"ffn layer {fp.replace} replaced twice")
            replaced_layers.add(fp.replace)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ratio": self.ratio,
            "match_function": MatchFunction(self.match_function).value,
            "pairs": [
                {"keep": p.keep.as_list(), "replace": p.replace.as_list(), "score": p.score}
                for p in self.pairs
            ],
            "ffn_ratio": self.ffn_ratio,
            "ffn_layers": [{"keep": f.keep, "replace": f.replace, "score": f.score} for f in self.ffn_layers],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SharePlan:
        return cls(
            pairs=[
                SharePair(HeadRef.parse(p["keep"]), HeadRef.parse(p["replace"]), p.get("score"))
                for p in d.get("pairs", [])
            ],
            ratio=float(d.get("ratio", 0.0)),
            match_function=MatchFunction.parse(d.get("match_function", DEFAULT_MATCH.value)),
            ffn_layers=[
                FfnPair(int(f["keep"]), int(f["replace"]), f.get("score")) for f in d.get("ffn_layers", [])
            ],
            ffn_ratio=float(d.get("ffn_ratio", 0.0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path: str | PathLike) -> SharePlan:
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def count_for_ratio(alpha: float, total: int) -> int:
    """round(alpha * total), halves rounded up."""
    if not (0.0 <= alpha <= 1.0) or math.isnan(alpha):
        raise AlphaOutOfRange(f"sharing ratio must be in [0, 1], got {alpha}")
    return int(math.floor(alpha * total + 0.5))


def _argmax(candidates: range, score: Callable[[int], float]) -> tuple[int, float]:
    # strict > keeps the first (smallest) index among equal scores
    best, best_score = candidates[0], score(candidates[0])
    for j in candidates[1:]:
        s = score(j)
        if s > best_score:
            best, best_score = j, s
    return best, best_score


def build_candidate_buffer(
    store: TensorStore,
    cfg: ModelConfig,
    f: MatchFunction | str = DEFAULT_MATCH,
    *,
    threads: int | None = None,
) -> CandidateBuffer:
    f = MatchFunction.parse(f)
    if cfg.num_layers < 2:
        raise TooFewLayers(f"need at least 2 layers, got {cfg.num_layers}")
    heads = list(cfg.heads())
    slices = [head_slices(store, cfg, h) for h in heads]
    H = cfg.heads_per_layer

    def score(a: int, b: int) -> float:
        return score_slices(slices[a], slices[b], f)[0]

    def best_for(idx: int) -> Candidate:
        j, s = _argmax(range(heads[idx].layer * H), lambda other: score(idx, other))
        return Candidate(heads[idx], heads[j], s)

    entries = pmap(best_for, range(H, len(heads)), threads)
    return CandidateBuffer(tuple(entries), f)


def select_top_n(buf: CandidateBuffer, cfg: ModelConfig, alpha: float) -> SharePlan:
    n = min(count_for_ratio(alpha, cfg.total_heads), len(buf))
    # descending score, ties by ascending `this`
    chosen = sorted(buf.entries, key=lambda e: (-e.score, e.this))[:n]
    pairs = [SharePair(keep=e.best, replace=e.this, score=e.score) for e in chosen]
    return SharePlan(pairs=pairs, ratio=float(alpha), match_function=buf.match_function)


def apply_share_plan(store: TensorStore, cfg: ModelConfig, plan: SharePlan) -> TensorStore:
    """Copy each keep-head's q/k/v/o slices (and planned FFN layers) over the replaced ones.

    Pairs are applied in ascending ``replace`` order on a working copy, so a chain
    keep -> replace -> replace' propagates the earliest source.
    """
    plan.validate(cfg)
    if not plan.pairs and not plan.ffn_layers:
        return store
    dq, dk, dv = cfg.head_dim_q, cfg.head_dim_k, cfg.head_dim_v
    work: dict[str, np.ndarray] = {}

    def tensor(name: str) -> np.ndarray:
        if name not in work:
            work[name] = store[name].copy()
        return work[name]

    if plan.pairs:
        store.check_against(cfg, [f"layer.{i}.attn.{n}" for i in range(cfg.num_layers) for n in ATTN_NAMES])
    for p in sorted(plan.pairs, key=lambda p: p.replace):
        src, dst = p.keep, p.replace
        for name, width, by_row in (("wq", dq, False), ("wk", dk, False), ("wv", dv, False), ("wo", dv, True)):
            s = slice(src.head * width, (src.head + 1) * width)
            d = slice(dst.head * width, (dst.head + 1) * width)
            a = tensor(f"layer.{src.layer}.attn.{name}")
            b = tensor(f"layer.{dst.layer}.attn.{name}")
            if by_row:
                b[d, :] = a[s, :]
            else:
                b[:, d] = a[:, s]

    for fp in sorted(plan.ffn_layers, key=lambda p: p.replace):
        for name in FFN_NAMES:
            tensor(f"layer.{fp.replace}.ffn.{name}")[...] = tensor(f"layer.{fp.keep}.ffn.{name}")
    return store.replace(work)


def _ffn_vector(store: TensorStore, cfg: ModelConfig, layer: int) -> np.ndarray:
    names = [f"layer.{layer}.ffn.{n}" for n in FFN_NAMES]
    store.check_against(cfg, names)
    gate, up, down = (np.asarray(store[n], dtype=np.float64) for n in names)
    return np.hstack([gate, up, down.T]).ravel()


def ffn_match(store: TensorStore, cfg: ModelConfig, layer_i: int, layer_j: int) -> float:
    for layer in (layer_i, layer_j):
        if not 0 <= layer < cfg.num_layers:
            raise PlanConfigMismatch(f"layer {layer} outside model config")
    if layer_i == layer_j:
        raise PlanConfigMismatch("ffn_match needs two distinct layers")
    return cosine(_ffn_vector(store, cfg, layer_i), _ffn_vector(store, cfg, layer_j))


def select_ffn_layers(store: TensorStore, cfg: ModelConfig, alpha: float) -> list[FfnPair]:
    """Whole-layer FFN sharing: each layer's best earlier match, top round(alpha * L) kept."""
    n = count_for_ratio(alpha, cfg.num_layers)
    if n == 0:
        return []
    if cfg.num_layers < 2:
        raise TooFewLayers(f"need at least 2 layers, got {cfg.num_layers}")
    vecs = [_ffn_vector(store, cfg, i) for i in range(cfg.num_layers)]
    cands = []
    for i in range(1, cfg.num_layers):
        j, s = _argmax(range(i), lambda other: cosine(vecs[i], vecs[other]))
        cands.append(FfnPair(keep=j, replace=i, score=s))
    cands.sort(key=lambda c: (-c.score, c.replace))
    return cands[: min(n, len(cands))]


def direct_share(
    store: TensorStore,
    cfg: ModelConfig,
    alpha: float,
    f: MatchFunction | str = DEFAULT_MATCH,
    *,
    ffn_alpha: float = 0.0,
    threads: int | None = None,
) -> tuple[SharePlan, TensorStore]:
    """Full pipeline: candidate buffer, top-N selection, optional FFN layers, tying."""
    count_for_ratio(alpha, cfg.total_heads)
    buf = build_candidate_buffer(store, cfg, f, threads=threads)
    plan = select_top_n(buf, cfg, alpha)
    if ffn_alpha:
        plan.ffn_layers = select_ffn_layers(store, cfg, ffn_alpha)
        plan.ffn_ratio = float(ffn_alpha)
    return plan, apply_share_plan(store, cfg, plan)
