"""Cosine similarity between attention maps and between head weight matrices."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, SameHead, ShapeMismatch, ZeroVector
from .store import HeadRef, HeadSlices, ModelConfig, TensorStore, head_slices

_ZERO_NORM = 1e-30


class MatchFunction(str, enum.Enum):
    """Which of a head's projection matrices enter the matching score.

    Values double as CLI flag spellings.
    """

    QK_CONCAT = "qk"
    Q_ONLY = "q"
    K_ONLY = "k"
    V_ONLY = "v"
    QKV_CONCAT = "qkv"
    QKV_SEPARATE = "separate"

    @classmethod
    def parse(cls, value: str | MatchFunction) -> MatchFunction:
        return cls(value)


DEFAULT_MATCH = MatchFunction.QK_CONCAT

_CONCAT_PARTS = {
    MatchFunction.QK_CONCAT: ("wq", "wk"),
    MatchFunction.Q_ONLY: ("wq",),
    MatchFunction.K_ONLY: ("wk",),
    MatchFunction.V_ONLY: ("wv",),
    MatchFunction.QKV_CONCAT: ("wq", "wk", "wv"),
}


@dataclass(frozen=True)
class MatchScore:
    """Score for a head pair.

    For ``QKV_SEPARATE`` ``per_matrix`` holds the q/k/v cosines and ``score`` is
    their mean, used wherever a single ranking key is needed.
    """

    pair: tuple[HeadRef, HeadRef]
    score: float
    per_matrix: dict[str, float] | None = None


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.size != v.size or u.size == 0:
        raise LengthMismatch(f"lengths {u.size} and {v.size}")
    uu = float(np.dot(u, u))
    vv = float(np.dot(v, v))
    if math.sqrt(uu) < _ZERO_NORM or math.sqrt(vv) < _ZERO_NORM:
        raise ZeroVector("cosine of a zero-norm vector is undefined")
    # sqrt(uu * vv) keeps cos(u, u) == 1.0 exactly; sqrt(uu) * sqrt(uu) need not.
    c = float(np.dot(u, v)) / math.sqrt(uu * vv)
    return min(1.0, max(-1.0, c))


def attention_map_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"attention maps {a.shape} vs {b.shape}")
    return cosine(a.reshape(-1), b.reshape(-1))


def match_vector(slices: HeadSlices, parts: tuple[str, ...]) -> np.ndarray:
    """Row-major flattening of the column-wise concatenation of ``parts``."""
    mats = [np.asarray(getattr(slices, p), dtype=np.float64) for p in parts]
    return np.hstack(mats).ravel()


def score_slices(a: HeadSlices, b: HeadSlices, f: MatchFunction) -> tuple[float, dict[str, float] | None]:
    if f is MatchFunction.QKV_SEPARATE:
        per = {k: cosine(getattr(a, "w" + k), getattr(b, "w" + k)) for k in ("q", "k", "v")}
        return math.fsum(per.values()) / 3.0, per
    parts = _CONCAT_PARTS[f]
    return cosine(match_vector(a, parts), match_vector(b, parts)), None


def match_score(
    store: TensorStore,
    cfg: ModelConfig,
    i: HeadRef,
    j: HeadRef,
    f: MatchFunction = DEFAULT_MATCH,
) -> MatchScore:
    f = MatchFunction.parse(f)
    if i == j:
        raise SameHead(str(i))
    score, per = score_slices(head_slices(store, cfg, i), head_slices(store, cfg, j), f)
    return MatchScore((i, j), score, per)
