"""Toy decoder-only transformer in float64 numpy with a hand-written backward pass.

Per layer: causal multi-head attention with a residual connection, then a
SiLU-gated feed-forward block with a residual connection. No normalization and
no positional encoding. Weights follow the ``x @ W`` convention of the
checkpoint layout (``wq`` is ``D x (H*d_q)``, ``wo`` is ``(H*d_v) x D``).
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from ._parallel import pmap
from .errors import LengthMismatch, MissingTensor, ShapeMismatch, TokenOutOfRange
from .store import HeadRef, ModelConfig, TensorStore, expected_shapes

Params = Mapping[str, np.ndarray]


@dataclass
class ForwardTrace:
    logits: np.ndarray  # L x vocab
    attention: np.ndarray  # layers x heads x L x L
    layer_inputs: list[np.ndarray]  # residual stream entering each layer
    _cache: list[dict[str, np.ndarray]] = field(default_factory=list, repr=False)

    def attention_map(self, h: HeadRef) -> np.ndarray:
        return self.attention[h.layer, h.head]

    @property
    def attention_maps(self) -> dict[HeadRef, np.ndarray]:
        n_layers, n_heads = self.attention.shape[:2]
        return {HeadRef(l, h): self.attention[l, h] for l in range(n_layers) for h in range(n_heads)}


def _ids(x: Sequence[int] | np.ndarray, cfg: ModelConfig) -> np.ndarray:
    ids = np.asarray(x, dtype=np.int64).ravel()
    if ids.size < 1 or ids.size > cfg.max_seq_len:
        raise TokenOutOfRange(f"sequence length {ids.size} outside [1, {cfg.max_seq_len}]")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise TokenOutOfRange(f"token id outside [0, {cfg.vocab_size})")
    return ids


def _weights(params: Params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    shapes = expected_shapes(cfg)
    out = {}
    for name, shape in shapes.items():
        if name not in params:
            raise MissingTensor(name)
        w = np.asarray(params[name], dtype=np.float64)
        if w.shape != shape:
            raise ShapeMismatch(f"{name}: {list(w.shape)} != {list(shape)}")
        out[name] = w
    return out


def causal_softmax(scores: np.ndarray) -> np.ndarray:
    """Row softmax over the causal prefix; entries above the diagonal are exactly 0."""
    L = scores.shape[-1]
    masked = np.where(np.tri(L, dtype=bool), scores, -np.inf)
    masked = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(masked)
    return e / e.sum(axis=-1, keepdims=True)


def head_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray) -> np.ndarray:
    """Attention map of one head for layer input ``x`` (L x D)."""
    q = x @ np.ascontiguousarray(wq, dtype=np.float64)
    k = x @ np.ascontiguousarray(wk, dtype=np.float64)
    return causal_softmax((q @ k.T) / np.sqrt(wk.shape[1]))


def silu(z: np.ndarray) -> np.ndarray:
    return z / (1.0 + np.exp(-z))


def forward(params: Params, cfg: ModelConfig, x: Sequence[int] | np.ndarray) -> ForwardTrace:
    ids = _ids(x, cfg)
    W = _weights(params, cfg)
    L, H = ids.size, cfg.heads_per_layer
    dq, dv = cfg.head_dim_q, cfg.head_dim_v

    h = W["embed.tok"][ids]
    attention = np.zeros((cfg.num_layers, H, L, L))
    layer_inputs, cache = [], []
    for i in range(cfg.num_layers):
        p = f"layer.{i}."
        wq, wk, wv, wo = (W[p + "attn." + n] for n in ("wq", "wk", "wv", "wo"))
        layer_inputs.append(h)
        qs, ks, vs, outs = [], [], [], []
        for j in range(H):
            q = h @ np.ascontiguousarray(wq[:, j * dq : (j + 1) * dq])
            k = h @ np.ascontiguousarray(wk[:, j * dq : (j + 1) * dq])
            v = h @ np.ascontiguousarray(wv[:, j * dv : (j + 1) * dv])
            a = causal_softmax((q @ k.T) / np.sqrt(dq))
            attention[i, j] = a
            qs.append(q)
            ks.append(k)
            vs.append(v)
            outs.append(a @ v)
        o = np.hstack(outs)
        h1 = h + o @ wo
        g = h1 @ W[p + "ffn.gate"]
        u = h1 @ W[p + "ffn.up"]
        act = silu(g) * u
        h2 = h1 + act @ W[p + "ffn.down"]
        cache.append({"x": h, "q": qs, "k": ks, "v": vs, "o": o, "x1": h1, "g": g, "u": u, "act": act})
        h = h2
    logits = h @ W["head.out"]
    cache.append({"x": h})
    return ForwardTrace(logits=logits, attention=attention, layer_inputs=layer_inputs, _cache=cache)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(trace: ForwardTrace | np.ndarray, targets: Sequence[int] | np.ndarray) -> float:
    """Mean over positions of -log p(target)."""
    logits = trace.logits if isinstance(trace, ForwardTrace) else np.asarray(trace, dtype=np.float64)
    t = np.asarray(targets, dtype=np.int64).ravel()
    if t.size != logits.shape[0]:
        raise LengthMismatch(f"{t.size} targets for {logits.shape[0]} positions")
    if t.size and (t.min() < 0 or t.max() >= logits.shape[1]):
        raise TokenOutOfRange("target id outside vocabulary")
    lp = log_softmax(logits)
    return float(-lp[np.arange(t.size), t].mean())


def loss_and_grads(
    params: Params, cfg: ModelConfig, x: Sequence[int] | np.ndarray, targets: Sequence[int] | np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy of one sequence and its gradient for every engine tensor."""
    trace = forward(params, cfg, x)
    loss = cross_entropy(trace, targets)
    W = _weights(params, cfg)
    ids = np.asarray(x, dtype=np.int64).ravel()
    t = np.asarray(targets, dtype=np.int64).ravel()
    L, H = ids.size, cfg.heads_per_layer
    dq, dv = cfg.head_dim_q, cfg.head_dim_v
    scale = 1.0 / np.sqrt(dq)
    grads: dict[str, np.ndarray] = {}

    dlogits = np.exp(log_softmax(trace.logits))
    dlogits[np.arange(L), t] -= 1.0
    dlogits /= L
    xf = trace._cache[-1]["x"]
    grads["head.out"] = xf.T @ dlogits
    dh = dlogits @ W["head.out"].T

    for i in reversed(range(cfg.num_layers)):
        p = f"layer.{i}."
        c = trace._cache[i]
        # feed-forward block
        wg, wu, wd = W[p + "ffn.gate"], W[p + "ffn.up"], W[p + "ffn.down"]
        grads[p + "ffn.down"] = c["act"].T @ dh
        dact = dh @ wd.T
        sg = 1.0 / (1.0 + np.exp(-c["g"]))
        dg = dact * c["u"] * sg * (1.0 + c["g"] * (1.0 - sg))
        du = dact * c["g"] * sg
        grads[p + "ffn.gate"] = c["x1"].T @ dg
        grads[p + "ffn.up"] = c["x1"].T @ du
        dx1 = dh + dg @ wg.T + du @ wu.T
        # attention block
        wq, wk, wv, wo = (W[p + "attn." + n] for n in ("wq", "wk", "wv", "wo"))
        grads[p + "attn.wo"] = c["o"].T @ dx1
        do = dx1 @ wo.T
        x = c["x"]
        gq, gk, gv = np.zeros_like(wq), np.zeros_like(wk), np.zeros_like(wv)
        dx = dx1.copy()
        for j in range(H):
            a = trace.attention[i, j]
            q, k, v = c["q"][j], c["k"][j], c["v"][j]
            do_j = do[:, j * dv : (j + 1) * dv]
            da = do_j @ v.T
            dvh = a.T @ do_j
            ds = a * (da - (da * a).sum(axis=1, keepdims=True)) * scale
            dqh = ds @ k
            dkh = ds.T @ q
            sq, sv = slice(j * dq, (j + 1) * dq), slice(j * dv, (j + 1) * dv)
            gq[:, sq] = x.T @ dqh
            gk[:, sq] = x.T @ dkh
            gv[:, sv] = x.T @ dvh
            dx += dqh @ wq[:, sq].T + dkh @ wk[:, sq].T + dvh @ wv[:, sv].T
        grads[p + "attn.wq"], grads[p + "attn.wk"], grads[p + "attn.wv"] = gq, gk, gv
        dh = dx

    demb = np.zeros_like(W["embed.tok"])
    np.add.at(demb, ids, dh)
    grads["embed.tok"] = demb
    return loss, {name: grads[name] for name in expected_shapes(cfg)}


def batch_loss_and_grads(
    params: Params,
    cfg: ModelConfig,
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
    *,
    reduction: str = "mean",
    threads: int | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and gradients over ``(inputs, targets)`` pairs, reduced in batch order."""
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    results = pmap(lambda xt: loss_and_grads(params, cfg, xt[0], xt[1]), batch, threads)
    loss = 0.0
    total = {name: np.zeros_like(g) for name, g in results[0][1].items()}
    for l, g in results:
        loss += l
        for name in total:
            total[name] += g[name]
    if reduction == "mean":
        n = len(results)
        loss /= n
        for name in total:
            total[name] /= n
    return loss, total


def backward(
    store: Params, cfg: ModelConfig, x: Sequence[int] | np.ndarray, targets: Sequence[int] | np.ndarray
) -> TensorStore:
    """Gradient of :func:`cross_entropy` w.r.t. every engine tensor, as a store."""
    _, grads = loss_and_grads(store, cfg, x, targets)
    meta = store.metadata if isinstance(store, TensorStore) else {"config": cfg.to_dict()}
    return TensorStore(grads, meta)


def next_token_pairs(sequences: Sequence[Sequence[int]]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Turn raw id sequences into (inputs, shifted targets) training pairs."""
    pairs = []
    for seq in sequences:
        s = np.asarray(seq, dtype=np.int64)
        if s.size >= 2:
            pairs.append((s[:-1], s[1:]))
    return pairs
