"""Seeded toy checkpoints and token corpora for desk-scale experiments."""

from __future__ import annotations

from collections.abc import Iterable, Sequence
from os import PathLike

import numpy as np

from .store import HeadRef, ModelConfig, TensorStore, expected_shapes, head_slices, store_from_arrays, with_head_slices

TOY_CONFIG = ModelConfig(
    num_layers=3,
    heads_per_layer=4,
    embed_dim=16,
    head_dim_q=4,
    head_dim_k=4,
    head_dim_v=4,
    ffn_dim=32,
    vocab_size=32,
    max_seq_len=64,
)


def make_toy_store(
    cfg: ModelConfig = TOY_CONFIG,
    seed: int = 0,
    *,
    qk_scale: float = 1.0,
    residual_scale: float = 0.5,
    planted: Iterable[tuple[HeadRef, HeadRef]] = (),
) -> TensorStore:
    """Random engine weights drawn from ``default_rng(seed)`` in canonical tensor order.

    ``qk_scale`` sharpens attention; ``residual_scale`` shrinks what each block
    writes back into the residual stream. ``planted`` copies the first head of
    each pair over the second after drawing.
    """
    rng = np.random.default_rng(seed)
    gain = {"wq": qk_scale, "wk": qk_scale, "wv": residual_scale, "wo": residual_scale, "down": residual_scale}
    arrays = {}
    for name, shape in expected_shapes(cfg).items():
        kind = name.rsplit(".", 1)[-1]
        std = 1.0 if kind == "tok" else gain.get(kind, 1.0) / np.sqrt(shape[0])
        arrays[name] = rng.normal(0.0, std, size=shape)
    store = store_from_arrays(arrays, cfg)
    for keep, replace in planted:
        store = with_head_slices(store, cfg, replace, head_slices(store, cfg, keep))
    return store


def make_corpus(
    cfg: ModelConfig, seed: int = 0, *, num_sequences: int = 32, length: int = 16
) -> list[list[int]]:
    """Token sequences from a seeded random bigram chain, so there is structure to learn."""
    rng = np.random.default_rng(seed)
    V = cfg.vocab_size
    logits = rng.normal(0.0, 2.0, size=(V, V))
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    cdf = np.cumsum(probs, axis=1)
    corpus = []
    for _ in range(num_sequences):
        seq = [int(rng.integers(V))]
        for _ in range(length - 1):
            nxt = int(np.searchsorted(cdf[seq[-1]], rng.random(), side="right"))
            seq.append(min(nxt, V - 1))
        corpus.append(seq)
    return corpus


def write_ids(path: str | PathLike, sequences: Sequence[Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in sequences:
            f.write(" ".join(str(int(t)) for t in seq) + "\n")


def read_ids(path: str | PathLike) -> list[list[int]]:
    with open(path, encoding="utf-8") as f:
        return [[int(t) for t in line.split()] for line in f if line.strip()]
