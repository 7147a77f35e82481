"""PostShare: post-train with a head weight-similarity penalty, then tie as DirectShare does.

The penalty for a plan of head pairs is the mean over pairs of the summed
Frobenius distances between the two heads' q, k and v matrices. Output
projection slices are tied later but are only penalized with
``include_output=True``.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .engine import batch_loss_and_grads, next_token_pairs
from .errors import EmptyPlan, NonFiniteLoss
from .sharing import SharePlan
from .store import ModelConfig, TensorStore

_GRAD_GUARD = 1e-12
_PENALIZED = (("wq", "head_dim_q"), ("wk", "head_dim_k"), ("wv", "head_dim_v"))
_OUTPUT = ("wo", "head_dim_v")


@dataclass(frozen=True)
class PostShareConfig:
    gamma: float = 0.5
    learning_rate: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    steps: int = 1
    checkpoint_every: int = 0  # 0 disables checkpoints
    batch_size: int = 8
    seed: int = 0
    squared: bool = False  # penalize squared distances instead (ablation)
    include_output: bool = False  # also pull the tied wo row blocks together

    def __post_init__(self) -> None:
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class LossParts:
    total: float
    task: float
    reg: float


@dataclass(frozen=True)
class StepLog:
    step: int
    task: float
    reg: float
    total: float


@dataclass
class TrainState:
    weights: TensorStore
    m: TensorStore
    v: TensorStore
    step: int = 0
    history: list[StepLog] = field(default_factory=list)

    @classmethod
    def initial(cls, weights: TensorStore) -> TrainState:
        zeros = {n: np.zeros(a.shape, dtype=np.float64) for n, a in weights.items()}
        return cls(weights, TensorStore(zeros, weights.metadata), TensorStore(zeros, weights.metadata))


def _pair_blocks(cfg: ModelConfig, plan: SharePlan, include_output: bool):
    """Yield (tensor of i, index of i, tensor of j, index of j) per pair and penalized matrix."""
    mats = _PENALIZED + ((_OUTPUT,) if include_output else ())
    for p in plan.pairs:
        for mat, dim_attr in mats:
            d = getattr(cfg, dim_attr)
            idx = []
            for h in (p.keep, p.replace):
                block = slice(h.head * d, (h.head + 1) * d)
                idx.append((block, slice(None)) if mat == "wo" else (slice(None), block))
            yield f"layer.{p.keep.layer}.attn.{mat}", idx[0], f"layer.{p.replace.layer}.attn.{mat}", idx[1]


def _weight_similarity(
    params: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    plan: SharePlan,
    squared: bool,
    include_output: bool,
    with_grad: bool,
) -> tuple[float, dict[str, np.ndarray]]:
    if not plan.pairs:
        raise EmptyPlan("weight similarity loss needs at least one pair")
    plan.validate(cfg)
    n = len(plan.pairs)
    terms = []
    grads: dict[str, np.ndarray] = {}
    for name_i, idx_i, name_j, idx_j in _pair_blocks(cfg, plan, include_output):
        diff = np.asarray(params[name_i], dtype=np.float64)[idx_i] - np.asarray(params[name_j], dtype=np.float64)[idx_j]
        sq = float(np.sum(diff * diff))
        norm = math.sqrt(sq)
        terms.append(sq if squared else norm)
        if not with_grad:
            continue
        if squared:
            g = 2.0 * diff / n
        elif norm < _GRAD_GUARD:
            continue
        else:
            g = diff / (norm * n)
        for name, idx, sign in ((name_i, idx_i, 1.0), (name_j, idx_j, -1.0)):
            if name not in grads:
                grads[name] = np.zeros(np.shape(params[name]), dtype=np.float64)
            grads[name][idx] += sign * g
    return math.fsum(terms) / n, grads


def weight_similarity_loss(
    store: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    plan: SharePlan,
    *,
    squared: bool = False,
    include_output: bool = False,
) -> float:
    return _weight_similarity(store, cfg, plan, squared, include_output, with_grad=False)[0]


def weight_similarity_grad(
    store: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    plan: SharePlan,
    *,
    squared: bool = False,
    include_output: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Penalty value and its gradient, keyed by the attention tensors it touches.

    Pairs whose difference norm is below 1e-12 contribute zero gradient in the
    unsquared form.
    """
    return _weight_similarity(store, cfg, plan, squared, include_output, with_grad=True)


def combined_loss(
    store: Mapping[str, np.ndarray],
    cfg: ModelConfig,
    plan: SharePlan,
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
    gamma: float = 0.5,
    *,
    squared: bool = False,
    include_output: bool = False,
    threads: int | None = None,
) -> LossParts:
    task, _ = batch_loss_and_grads(store, cfg, batch, threads=threads)
    reg = weight_similarity_loss(store, cfg, plan, squared=squared, include_output=include_output)
    return LossParts(total=task + gamma * reg, task=task, reg=reg)


def postshare_train(
    state: TrainState,
    cfg: ModelConfig,
    plan: SharePlan,
    corpus: Sequence[Sequence[int]],
    pscfg: PostShareConfig,
    *,
    on_checkpoint: Callable[[int, TensorStore], None] | None = None,
    threads: int | None = None,
) -> TrainState:
    """Run ``pscfg.steps`` Adam updates on task loss + gamma * penalty.

    Batches are drawn without replacement per step from ``default_rng(pscfg.seed)``.
    """
    if not plan.pairs:
        raise EmptyPlan("PostShare needs a non-empty plan")
    return _train(state, cfg, plan, corpus, pscfg, on_checkpoint, threads)


def task_train(
    state: TrainState,
    cfg: ModelConfig,
    corpus: Sequence[Sequence[int]],
    pscfg: PostShareConfig,
    *,
    threads: int | None = None,
) -> TrainState:
    """Plain next-token training with the same optimizer and batching; gamma is ignored."""
    return _train(state, cfg, None, corpus, pscfg, None, threads)


def _train(state, cfg, plan, corpus, pscfg, on_checkpoint, threads) -> TrainState:
    pairs = next_token_pairs(corpus)
    if not pairs:
        raise ValueError("corpus has no sequence of length >= 2")
    rng = np.random.default_rng(pscfg.seed)
    w = {n: np.array(a, dtype=np.float64) for n, a in state.weights.items()}
    m = {n: np.array(a, dtype=np.float64) for n, a in state.m.items()}
    v = {n: np.array(a, dtype=np.float64) for n, a in state.v.items()}
    step = state.step
    history = list(state.history)
    b1, b2 = pscfg.beta1, pscfg.beta2
    bs = min(pscfg.batch_size, len(pairs))
    penalty = {"squared": pscfg.squared, "include_output": pscfg.include_output}

    for _ in range(pscfg.steps):
        idx = rng.choice(len(pairs), size=bs, replace=False)
        task, grads = batch_loss_and_grads(w, cfg, [pairs[i] for i in idx], threads=threads)
        gamma = pscfg.gamma if plan is not None else 0.0
        if plan is None:
            reg = 0.0
        elif gamma:
            reg, reg_grads = weight_similarity_grad(w, cfg, plan, **penalty)
            for name, g in reg_grads.items():
                grads[name] = grads[name] + gamma * g
        else:
            reg = weight_similarity_loss(w, cfg, plan, **penalty)
        total = task + gamma * reg
        if not math.isfinite(total):
            raise NonFiniteLoss(step + 1, f"non-finite loss {total} at step {step + 1}")
        step += 1
        history.append(StepLog(step, task, reg, total))

        bc1 = 1.0 - b1**step
        bc2 = 1.0 - b2**step
        for name, g in grads.items():
            m[name] *= b1
            m[name] += (1.0 - b1) * g
            v[name] *= b2
            v[name] += (1.0 - b2) * (g * g)
            if pscfg.learning_rate:
                w[name] -= pscfg.learning_rate * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + pscfg.eps)

        if on_checkpoint is not None and pscfg.checkpoint_every and step % pscfg.checkpoint_every == 0:
            on_checkpoint(step, state.weights.replace(w))

    return TrainState(
        weights=state.weights.replace(w),
        m=state.m.replace(m),
        v=state.v.replace(v),
        step=step,
        history=history,
    )
