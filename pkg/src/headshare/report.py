"""Analytic parameter accounting for a share plan.

GPU memory in megabytes depends on the runtime allocator and is not modeled;
only parameter counts and ratios are reported.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

from .errors import PlanConfigMismatch
from .sharing import FfnPair, SharePair, SharePlan, count_for_ratio
from .store import HeadRef, ModelConfig

MEMORY_NOTE = "parameter counts only; allocator-dependent GPU memory is not modeled"

LLAMA2_7B = ModelConfig(
    num_layers=32,
    heads_per_layer=32,
    embed_dim=4096,
    head_dim_q=128,
    head_dim_k=128,
    head_dim_v=128,
    ffn_dim=11008,
    vocab_size=32000,
    max_seq_len=4096,
)
LLAMA2_13B = ModelConfig(
    num_layers=40,
    heads_per_layer=40,
    embed_dim=5120,
    head_dim_q=128,
    head_dim_k=128,
    head_dim_v=128,
    ffn_dim=13824,
    vocab_size=32000,
    max_seq_len=4096,
)
# (config, reported total parameter count)
PRESETS = {
    "llama2-7b": (LLAMA2_7B, 6_740_000_000),
    "llama2-13b": (LLAMA2_13B, 13_020_000_000),
}


@dataclass(frozen=True)
class MemoryReport:
    total_params: int
    shared_params_saved: int
    effective_params: int
    ratio_vs_base: float
    mha_saved: int
    ffn_saved: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_block"] = {"mha_saved": d.pop("mha_saved"), "ffn_saved": d.pop("ffn_saved")}
        d["note"] = MEMORY_NOTE
        return d


def head_params(cfg: ModelConfig) -> int:
    """Parameters owned by one head: q, k, v columns plus its output-projection rows."""
    D = cfg.embed_dim
    return D * cfg.head_dim_q + D * cfg.head_dim_k + D * cfg.head_dim_v + cfg.head_dim_v * D


def ffn_layer_params(cfg: ModelConfig) -> int:
    return 3 * cfg.embed_dim * cfg.ffn_dim


def block_params(cfg: ModelConfig) -> int:
    """All MHA + FFN parameters of the model (no embeddings, no output head)."""
    return cfg.num_layers * (cfg.heads_per_layer * head_params(cfg) + ffn_layer_params(cfg))


def engine_params(cfg: ModelConfig) -> int:
    return block_params(cfg) + 2 * cfg.vocab_size * cfg.embed_dim


def memory_report(cfg: ModelConfig, plan: SharePlan, base_total: int | None = None) -> MemoryReport:
    plan.validate(cfg)
    base = engine_params(cfg) if base_total is None else int(base_total)
    if base < block_params(cfg):
        raise PlanConfigMismatch(f"base_total {base} is below the model's MHA+FFN parameters {block_params(cfg)}")
    mha = len(plan.pairs) * head_params(cfg)
    ffn = len(plan.ffn_layers) * ffn_layer_params(cfg)
    saved = mha + ffn
    effective = base - saved
    return MemoryReport(
        total_params=base,
        shared_params_saved=saved,
        effective_params=effective,
        ratio_vs_base=effective / base,
        mha_saved=mha,
        ffn_saved=ffn,
    )


def nominal_plan(cfg: ModelConfig, alpha: float, ffn_alpha: float = 0.0) -> SharePlan:
    """A structurally valid plan of the sizes DirectShare would pick, for checkpoint-free accounting.

    Which heads are paired does not affect parameter counts, so replaced heads are
    simply taken in order from the second layer on, each keeping head (0, 0).
    """
    n = min(count_for_ratio(alpha, cfg.total_heads), cfg.total_heads - cfg.heads_per_layer)
    replaced = [h for h in cfg.heads() if h.layer > 0][:n]
    pairs = [SharePair(HeadRef(0, 0), h) for h in replaced]
    n_ffn = min(count_for_ratio(ffn_alpha, cfg.num_layers), cfg.num_layers - 1)
    ffn = [FfnPair(0, layer) for layer in range(1, n_ffn + 1)]
    return SharePlan(pairs=pairs, ratio=alpha, ffn_layers=ffn, ffn_ratio=ffn_alpha)


def format_report(r: MemoryReport) -> str:
    rows = [
        ("total params", f"{r.total_params:,}"),
        ("MHA saved", f"{r.mha_saved:,}"),
        ("FFN saved", f"{r.ffn_saved:,}"),
        ("effective params", f"{r.effective_params:,}"),
        ("ratio vs base", f"{100 * r.ratio_vs_base:.2f}%"),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [f"{k:<{width}}  {v}" for k, v in rows]
    lines.append(f"note: {MEMORY_NOTE}")
    return "\n".join(lines)
