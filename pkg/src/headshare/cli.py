"""Command-line entry point: ``headshare <command> [options]``.

Every run writes a JSON manifest beside its outputs. Failures print a single
``error: <Name>: <message>`` line to stderr and exit 1 (domain errors) or
2 (usage errors).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from ._parallel import THREADS_ENV, set_threads
from .analysis import head_similarity_matrix, layer_similarity_matrix, matched_degree, traces_for
from .engine import forward
from .errors import HeadShareError
from .postshare import PostShareConfig, TrainState, postshare_train
from .report import PRESETS, format_report, memory_report, nominal_plan
from .sharing import SharePlan, apply_share_plan, direct_share
from .similarity import MatchFunction, match_score
from .store import HeadRef, ModelConfig, load_store, save_store
from .toy import TOY_CONFIG, make_corpus, make_toy_store, read_ids, write_ids

# args that never influence outputs and stay out of the manifest
_VOLATILE = {"threads", "func", "out", "out_dir", "corpus_out"}
# input paths; the config hash uses their contents instead, so runs can move
_PATH_ARGS = {"model", "plan", "corpus", "input", "inputs"}


class UsageError(Exception):
    def __init__(self, message: str, name: str = "UsageError"):
        super().__init__(message)
        self.name = name


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D401 - argparse hook
        raise UsageError(message)


def _ratio(value: str) -> float:
    try:
        x = float(value)
    except ValueError:
        raise UsageError(f"not a number: {value!r}") from None
    if not 0.0 <= x <= 1.0:
        raise UsageError(f"ratio must be in [0, 1], got {value}", "AlphaOutOfRange")
    return x


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _write_manifest(path: Path, args: argparse.Namespace, inputs: Sequence[str], outputs: Sequence[Path]) -> None:
    settings = {k: v for k, v in sorted(vars(args).items()) if k not in _VOLATILE}
    digests = {p: _sha256(p) for p in inputs}
    keyed = {k: v for k, v in settings.items() if k not in _PATH_ARGS}
    canonical = json.dumps(
        {"command": args.command, "settings": keyed, "inputs": [digests[p] for p in inputs]},
        sort_keys=True,
        default=str,
    )
    _write_json(
        path,
        {
            "command": args.command,
            "config_hash": hashlib.sha256(canonical.encode()).hexdigest(),
            "settings": settings,
            "inputs": digests,
            "outputs": sorted(Path(p).name for p in outputs),
            "seed": args.seed,
            "version": __version__,
        },
    )


def _stem(path: str) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix else p


def _load_model(path: str):
    store = load_store(path)
    return store, store.config()


# ---------------------------------------------------------------- commands


def cmd_gen_toy(args) -> list[Path]:
    cfg = ModelConfig(
        num_layers=args.layers,
        heads_per_layer=args.heads,
        embed_dim=args.embed,
        head_dim_q=args.head_dim,
        head_dim_k=args.head_dim,
        head_dim_v=args.head_dim,
        ffn_dim=args.ffn,
        vocab_size=args.vocab,
        max_seq_len=args.max_seq_len,
    )
    rng = np.random.default_rng(args.seed)
    model_seed, corpus_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    planted = []
    for spec in args.plant or []:
        try:
            keep, replace = spec.split(":")
            planted.append(tuple(HeadRef.parse(part.split(",")) for part in (keep, replace)))
        except ValueError:
            raise UsageError(f"--plant expects L,H:L,H, got {spec!r}") from None
    store = make_toy_store(
        cfg, model_seed, qk_scale=args.qk_scale, residual_scale=args.residual_scale, planted=planted
    )
    out = Path(args.out)
    save_store(store, out)
    outputs = [out]
    if args.corpus_out:
        corpus = make_corpus(cfg, corpus_seed, num_sequences=args.num_seqs, length=args.seq_len)
        write_ids(args.corpus_out, corpus)
        outputs.append(Path(args.corpus_out))
    manifest = _stem(args.out).with_suffix(".manifest.json")
    _write_manifest(manifest, args, [], outputs)
    return outputs + [manifest]


def cmd_analyze(args) -> list[Path]:
    store, cfg = _load_model(args.model)
    f = MatchFunction.parse(args.match)
    heads = list(cfg.heads())
    header = ["layer_i", "head_i", "layer_j", "head_j", "score"]
    if f is MatchFunction.QKV_SEPARATE:
        header += ["score_q", "score_k", "score_v"]
    rows = []
    for a, hi in enumerate(heads):
        for hj in heads[a + 1 :]:
            ms = match_score(store, cfg, hi, hj, f)
            row = [hi.layer, hi.head, hj.layer, hj.head, _fmt(ms.score)]
            if ms.per_matrix:
                row += [_fmt(ms.per_matrix[k]) for k in ("q", "k", "v")]
            rows.append(row)
    out = Path(args.out)
    _write_csv(out, header, rows)
    manifest = _stem(args.out).with_suffix(".manifest.json")
    _write_manifest(manifest, args, [args.model], [out])
    return [out, manifest]


def cmd_share(args) -> list[Path]:
    store, cfg = _load_model(args.model)
    plan, shared = direct_share(store, cfg, args.ratio, args.match, ffn_alpha=args.ffn_ratio)
    out = Path(args.out)
    stem = _stem(args.out)
    save_store(shared, out)
    plan_path = stem.with_suffix(".plan.json")
    plan.save(plan_path)
    manifest = stem.with_suffix(".manifest.json")
    _write_manifest(manifest, args, [args.model], [out, plan_path])
    return [out, plan_path, manifest]


def cmd_postshare(args) -> list[Path]:
    store, cfg = _load_model(args.model)
    plan = SharePlan.load(args.plan)
    corpus = read_ids(args.corpus)
    pscfg = PostShareConfig(
        gamma=args.gamma,
        learning_rate=args.lr,
        beta1=args.beta1,
        beta2=args.beta2,
        steps=args.steps,
        checkpoint_every=args.checkpoint_every,
        batch_size=args.batch_size,
        seed=args.seed,
        squared=args.squared,
        include_output=args.include_output,
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: list[Path] = []

    def checkpoint(step: int, weights) -> None:
        path = out_dir / f"step_{step:06d}.hws"
        save_store(weights, path)
        outputs.append(path)

    state = postshare_train(TrainState.initial(store), cfg, plan, corpus, pscfg, on_checkpoint=checkpoint)
    final = out_dir / "final.hws"
    save_store(state.weights, final)
    tied = out_dir / "tied.hws"
    save_store(apply_share_plan(state.weights, cfg, plan), tied)
    losses = out_dir / "losses.csv"
    _write_csv(
        losses,
        ["step", "task", "reg", "total"],
        ([s.step, _fmt(s.task), _fmt(s.reg), _fmt(s.total)] for s in state.history),
    )
    outputs += [final, tied, losses]
    manifest = out_dir / "manifest.json"
    _write_manifest(manifest, args, [args.model, args.plan, args.corpus], outputs)
    return outputs + [manifest]


def cmd_trace(args) -> list[Path]:
    store, cfg = _load_model(args.model)
    seqs = read_ids(args.input)
    if not 0 <= args.index < len(seqs):
        raise UsageError(f"--index {args.index} outside the {len(seqs)} sequences of {args.input}")
    trace = forward(store, cfg, seqs[args.index])
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    L = trace.logits.shape[0]
    for h in cfg.heads():
        path = out_dir / f"attn_layer{h.layer}_head{h.head}.csv"
        a = trace.attention_map(h)
        _write_csv(path, [f"k{j}" for j in range(L)], ([_fmt(x) for x in row] for row in a))
        outputs.append(path)
    logits = out_dir / "logits.csv"
    _write_csv(logits, [f"v{j}" for j in range(cfg.vocab_size)], ([_fmt(x) for x in r] for r in trace.logits))
    outputs.append(logits)
    manifest = out_dir / "manifest.json"
    _write_manifest(manifest, args, [args.model, args.input], outputs)
    return outputs + [manifest]


def cmd_degree(args) -> list[Path]:
    store, cfg = _load_model(args.model)
    inputs = read_ids(args.inputs)
    rep = matched_degree(store, cfg, inputs, args.ratio, args.match)
    out = Path(args.out)
    both = set(rep.set_weight) & set(rep.set_attn)
    rows = []
    for name, pairs in (("weight", rep.set_weight), ("attention", rep.set_attn)):
        for keep, replace in pairs:
            rows.append([name, keep.layer, keep.head, replace.layer, replace.head, int((keep, replace) in both)])
    _write_csv(out, ["set", "keep_layer", "keep_head", "replace_layer", "replace_head", "in_both"], rows)
    summary = _stem(args.out).with_suffix(".json")
    _write_json(
        summary,
        {
            "k": rep.k,
            "intersection": rep.intersection,
            "overlap_ratio": rep.overlap_ratio,
            "num_samples": rep.num_samples,
            "degree_per_sample": rep.degree_per_sample,
        },
    )
    manifest = _stem(args.out).with_suffix(".manifest.json")
    _write_manifest(manifest, args, [args.model, args.inputs], [out, summary])
    print(f"overlap_ratio={rep.overlap_ratio!r} intersection={rep.intersection} k={rep.k}")
    return [out, summary, manifest]


def cmd_heatmap(args) -> list[Path]:
    store, cfg = _load_model(args.model)
    inputs = read_ids(args.inputs)
    out = Path(args.out)
    if args.level == "layer":
        m = layer_similarity_matrix(store, cfg, inputs)
        rows = [[p, q, _fmt(m[p, q])] for p in range(cfg.num_layers) for q in range(cfg.num_layers)]
        _write_csv(out, ["layer_i", "layer_j", "score"], rows)
    else:
        m = head_similarity_matrix(traces_for(store, cfg, inputs), cfg)
        heads = list(cfg.heads())
        rows = [
            [hi.layer, hi.head, hj.layer, hj.head, _fmt(m[a, b])]
            for a, hi in enumerate(heads)
            for b, hj in enumerate(heads)
        ]
        _write_csv(out, ["layer_i", "head_i", "layer_j", "head_j", "score"], rows)
    manifest = _stem(args.out).with_suffix(".manifest.json")
    _write_manifest(manifest, args, [args.model, args.inputs], [out])
    return [out, manifest]


def cmd_report(args) -> list[Path]:
    inputs = []
    if args.preset:
        if args.model or args.plan:
            raise UsageError("--preset excludes --model/--plan")
        cfg, base = PRESETS[args.preset]
        plan = nominal_plan(cfg, args.ratio, args.ffn_ratio)
    else:
        if not (args.model and args.plan):
            raise UsageError("report needs --preset, or both --model and --plan")
        store, cfg = _load_model(args.model)
        plan = SharePlan.load(args.plan)
        base = None
        inputs = [args.model, args.plan]
    if args.base_total is not None:
        base = args.base_total
    rep = memory_report(cfg, plan, base)
    print(format_report(rep))
    out = Path(args.out)
    _write_json(out, rep.to_dict())
    manifest = _stem(args.out).with_suffix(".manifest.json")
    _write_manifest(manifest, args, inputs, [out])
    return [out, manifest]


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    common.add_argument("--threads", type=int, default=None, help=f"worker cap (falls back to ${THREADS_ENV})")

    parser = _Parser(prog="headshare", description="Head-wise attention weight sharing toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    match_choices = [m.value for m in MatchFunction]

    p = sub.add_parser("gen-toy", parents=[common], help="write a seeded toy checkpoint (+ corpus)")
    p.add_argument("--out", required=True)
    p.add_argument("--corpus", dest="corpus_out", default=None, help="also write a token-id corpus here")
    p.add_argument("--layers", type=int, default=TOY_CONFIG.num_layers)
    p.add_argument("--heads", type=int, default=TOY_CONFIG.heads_per_layer)
    p.add_argument("--embed", type=int, default=TOY_CONFIG.embed_dim)
    p.add_argument("--head-dim", type=int, default=TOY_CONFIG.head_dim_q)
    p.add_argument("--ffn", type=int, default=TOY_CONFIG.ffn_dim)
    p.add_argument("--vocab", type=int, default=TOY_CONFIG.vocab_size)
    p.add_argument("--max-seq-len", type=int, default=TOY_CONFIG.max_seq_len)
    p.add_argument("--num-seqs", type=int, default=32)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--qk-scale", type=float, default=1.0)
    p.add_argument("--residual-scale", type=float, default=0.5)
    p.add_argument("--plant", action="append", help="copy head L,H over head L,H (repeatable)")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("analyze", parents=[common], help="pairwise head match scores as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--match", choices=match_choices, default="qk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("share", parents=[common], help="DirectShare a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--ffn-ratio", type=_ratio, default=0.0)
    p.add_argument("--match", choices=match_choices, default="qk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_share)

    p = sub.add_parser("postshare", parents=[common], help="post-train with the similarity penalty, then tie")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--gamma", type=float, default=0.5)
    p.add_argument("--lr", type=float, default=5e-5)
    p.add_argument("--beta1", type=float, default=0.9)
    p.add_argument("--beta2", type=float, default=0.95)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--squared", action="store_true", help="penalize squared distances")
    p.add_argument("--include-output", action="store_true", help="also penalize the tied output-projection rows")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_postshare)

    p = sub.add_parser("trace", parents=[common], help="dump attention maps of one input as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("degree", parents=[common], help="weight vs attention-map top-k agreement")
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--ratio", type=_ratio, required=True)
    p.add_argument("--match", choices=match_choices, default="qk")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_degree)

    p = sub.add_parser("heatmap", parents=[common], help="mean attention-map similarity matrix as CSV")
    p.add_argument("--model", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--level", choices=["layer", "head"], default="head")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("report", parents=[common], help="parameter accounting for a plan")
    p.add_argument("--model")
    p.add_argument("--plan")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--ratio", type=_ratio, default=0.0, help="MHA ratio (with --preset)")
    p.add_argument("--ffn-ratio", type=_ratio, default=0.0, help="FFN ratio (with --preset)")
    p.add_argument("--base-total", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        threads = args.threads
        if threads is None and os.environ.get(THREADS_ENV):
            threads = int(os.environ[THREADS_ENV])
        if threads is not None and threads < 1:
            raise UsageError("--threads must be >= 1")
        set_threads(threads)
        try:
            args.func(args)
        finally:
            set_threads(None)
    except UsageError as e:
        print(f"error: {e.name}: {e}", file=sys.stderr)
        return 2
    except HeadShareError as e:
        print(f"error: {e.name}: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
