"""Command-line interface.

Every analysis subcommand reads a checkpoint (plus a corpus for the
trace-based ones) and writes provenance-stamped CSV tables and P6 heatmaps
under ``--out``.  Outputs are deterministic: the same invocation over the same
inputs reproduces every artifact byte for byte.  MOE_LENS_THREADS caps the
worker threads used for tracing.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import dynamic_analysis as dyn
from . import static_analysis as sta
from .config import ACTIVATIONS, GATING_ORDERS, ModelConfig
from .moe_core import (TokenTrace, flatten_corpus, read_corpus, recombined_output,
                       trace_all_experts)
from .report import (Provenance, emit_csv, emit_heatmap, emit_similarity_csv,
                     file_digest, matrix_comments, metric_range)
from .synth import SynthSpec, synth_permuted_clone_model, synth_scratch, synth_upcycled
from .tensor_store import Checkpoint, dump_checkpoint, read_checkpoint


def _int_list(text: str, n: int, flag: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",")]
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise ValueError(f"{flag} expects integers: {exc}") from exc
    if len(values) == 1:
        return tuple(values * n)
    if len(values) != n:
        raise ValueError(f"{flag} needs 1 or {n} comma-separated values")
    return tuple(values)


def _worker_count() -> int:
    raw = os.environ.get("MOE_LENS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError("MOE_LENS_THREADS must be an integer") from exc
    return max(1, n)


def _traced(model: Checkpoint, tokens: list[int], reference: Checkpoint | None,
            k_override_all: bool) -> list[TokenTrace]:
    workers = min(_worker_count(), max(len(tokens), 1))
    if workers <= 1 or len(tokens) < 2:
        return trace_all_experts(model, tokens, reference, k_override_all)
    bounds = np.linspace(0, len(tokens), workers + 1).astype(int)
    chunks = [tokens[bounds[i]:bounds[i + 1]] for i in range(workers)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(
            lambda chunk: trace_all_experts(model, chunk, reference, k_override_all),
            chunks)
    return [t for part in parts for t in part]


@dataclass
class Context:
    """Loaded inputs plus the provenance stamp shared by a command's artifacts."""

    args: argparse.Namespace
    model: Checkpoint
    reference: Checkpoint | None
    tokens: list[int] | None
    provenance: Provenance

    @property
    def out(self) -> str:
        return self.args.out


def _load_context(args, argv: list[str], need_corpus: bool = False) -> Context:
    inputs = {"model": file_digest(args.model)}
    model = read_checkpoint(args.model)
    reference = None
    if getattr(args, "ref", None):
        inputs["reference"] = file_digest(args.ref)
        reference = read_checkpoint(args.ref)
    tokens = None
    if need_corpus:
        inputs["corpus"] = file_digest(args.corpus)
        tokens = flatten_corpus(read_corpus(args.corpus))
        if not tokens:
            raise ValueError("corpus holds no tokens")
    os.makedirs(args.out, exist_ok=True)
    prov = Provenance(command=["moe-lens", *argv], inputs=inputs,
                      seed=getattr(args, "seed", None))
    return Context(args=args, model=model, reference=reference,
                   tokens=tokens, provenance=prov)


def _select_layers(arg: str, model: Checkpoint, gated_only: bool) -> list[int]:
    config = model.config
    if arg == "all":
        layers = config.moe_layers() if gated_only else list(range(config.num_layers))
        if not layers:
            raise ValueError("model has no gated layers")
        return layers
    try:
        layer = int(arg)
    except ValueError as exc:
        raise ValueError(f"--layer expects an index or 'all': {arg!r}") from exc
    if not 0 <= layer < config.num_layers:
        raise ValueError(f"layer {layer} out of range")
    return [layer]


def _emit_matrix_pair(ctx: Context, stem: str, sim) -> list[str]:
    csv_path = os.path.join(ctx.out, f"{stem}.csv")
    ppm_path = os.path.join(ctx.out, f"{stem}.ppm")
    emit_similarity_csv(csv_path, ctx.provenance, sim)
    emit_heatmap(ppm_path, ctx.provenance, sim.values, metric_range(sim.metric),
                 cell=ctx.args.cell, extra_comments=matrix_comments(sim))
    return [csv_path, ppm_path, f"{ppm_path}.range.txt"]


# --- subcommands -----------------------------------------------------------

def _cmd_synth(args, argv) -> list[str]:
    config = ModelConfig(
        num_layers=args.layers,
        experts_per_layer=_int_list(args.experts, args.layers, "--experts"),
        num_shared=_int_list(args.shared, args.layers, "--shared"),
        top_k=args.top_k,
        d_hid=args.d_hid,
        d_mid=args.d_mid,
        vocab=args.vocab,
        activation=args.activation,
        gating_order=args.gating_order,
        use_prenorm=not args.no_prenorm,
    )
    mode = args.mode.replace("-", "_")
    spec = SynthSpec(config=config, mode=mode, seed=args.seed,
                     init_std=args.init_std, upcycle_noise_std=args.noise)
    os.makedirs(args.out, exist_ok=True)
    written = []
    model_path = os.path.join(args.out, "model.moel")
    if mode == "scratch":
        dump_checkpoint(synth_scratch(spec), model_path)
    elif mode == "upcycled":
        model, reference = synth_upcycled(spec)
        dump_checkpoint(model, model_path)
        ref_path = os.path.join(args.out, "reference.moel")
        dump_checkpoint(reference, ref_path)
        written.append(ref_path)
    else:
        dump_checkpoint(synth_permuted_clone_model(spec)[0], model_path)
    written.insert(0, model_path)
    for path in written:
        print(f"digest {os.path.basename(path)} sha256:{file_digest(path)}")
    return written


def _cmd_matrix_sim(args, argv) -> list[str]:
    ctx = _load_context(args, argv)
    written = []
    for layer in _select_layers(args.layer, ctx.model, gated_only=args.layer == "all"):
        sim = sta.matrix_level_sim(ctx.model, layer, args.which, ctx.reference)
        written += _emit_matrix_pair(ctx, f"matrix-sim-layer{layer}-{args.which}", sim)
    return written


def _cmd_neuron_avg_sim(args, argv) -> list[str]:
    ctx = _load_context(args, argv)
    written = []
    for layer in _select_layers(args.layer, ctx.model, gated_only=args.layer == "all"):
        sim = sta.neuron_average_sim(ctx.model, layer, args.which, ctx.reference)
        written += _emit_matrix_pair(ctx, f"neuron-avg-sim-layer{layer}-{args.which}", sim)
    return written


def _cmd_reorder(args, argv) -> list[str]:
    ctx = _load_context(args, argv)
    layers = _select_layers(args.layer, ctx.model, gated_only=True)
    rows = []
    taus = []
    for layer in layers:
        for rep in sta.pairwise_reorder_reports(ctx.model, layer, args.which):
            rows.append([layer, rep.pair[0], rep.pair[1], rep.which,
                         rep.sim_before, rep.sim_after, rep.tau])
            taus.append(rep.tau)
    if not rows:
        raise ValueError("no expert pairs to reorder")
    path = os.path.join(ctx.out, f"reorder-{args.which}.csv")
    emit_csv(path, ctx.provenance,
             ["layer", "expert_a", "expert_b", "which", "sim_before", "sim_after", "tau"],
             rows, extra_comments=[f"mean_tau: {np.mean(taus):.6f}"])
    return [path]


def _cmd_gate_sim(args, argv) -> list[str]:
    ctx = _load_context(args, argv)
    written = []
    for layer in _select_layers(args.layer, ctx.model, gated_only=True):
        sim = sta.gate_embedding_sim(ctx.model, layer)
        written += _emit_matrix_pair(ctx, f"gate-sim-layer{layer}", sim)
    return written


def _cmd_gate_corr(args, argv) -> list[str]:
    ctx = _load_context(args, argv)
    config = ctx.model.config
    layers = [i for i in config.moe_layers() if config.experts_per_layer[i] >= 3]
    if not layers:
        raise ValueError("no gated layer has enough experts for regression")
    reports = [sta.gate_expert_regression(ctx.model, layer, args.which)
               for layer in layers]
    rows = [[rep.layer, rep.which, rep.n_pairs, rep.r, rep.r2] for rep in reports]
    rows.append(["avg", args.which, None, None, sta.aggregate_r2(reports)])
    path = os.path.join(ctx.out, f"gate-corr-{args.which}.csv")
    emit_csv(path, ctx.provenance, ["layer", "which", "n_pairs", "r", "r2"], rows)
    return [path]


def _cmd_pca(args, argv) -> list[str]:
    ctx = _load_context(args, argv)
    written = []
    for layer in _select_layers(args.layer, ctx.model, gated_only=True):
        n = ctx.model.config.experts_per_layer[layer]
        mats = sta.layer_expert_matrices(ctx.model, layer, args.which)
        if args.level == "matrix":
            vectors = [m.ravel() for m in mats]
            labels = [str(e) for e in range(n)]
        else:
            neurons = [m.T if args.which == "down" else m for m in mats]
            vectors = [row for m in neurons for row in m]
            labels = [f"{e}.{j}" for e, m in enumerate(neurons) for j in range(m.shape[0])]
        proj = sta.pca_project(vectors, dims=args.dims,
                               standardize=not args.no_standardize, labels=labels)
        if args.eps is not None:
            proj = sta.filter_outliers(proj, eps=args.eps, min_pts=args.min_pts)
        comments = [
            "explained_variance: " + " ".join(f"{v:.6f}" for v in proj.explained_variance),
            "outliers: " + (" ".join(proj.outliers) if proj.outliers else "-"),
            f"level: {args.level}",
        ]
        rows = [[label, *coords] for label, coords in proj.points]
        path = os.path.join(ctx.out, f"pca-layer{layer}-{args.which}-{args.level}.csv")
        emit_csv(path, ctx.provenance,
                 ["label", *[f"pc{d + 1}" for d in range(args.dims)]],
                 rows, extra_comments=comments)
        written.append(path)
    return written


def _cmd_trace(args, argv) -> list[str]:
    ctx = _load_context(args, argv, need_corpus=True)
    traces = _traced(ctx.model, ctx.tokens, ctx.reference, args.k_override == "all")
    rows = []
    worst = 0.0
    for idx, trace in enumerate(traces):
        for layer, lt in enumerate(trace.per_layer):
            rebuilt = recombined_output(lt)
            scale = np.linalg.norm(lt.z_out)
            err = np.linalg.norm(rebuilt - lt.z_out) / (scale if scale > 0 else 1.0)
            worst = max(worst, err)
            rows.append([idx, trace.token_id, layer, err])
    path = os.path.join(ctx.out, "trace-consistency.csv")
    emit_csv(path, ctx.provenance, ["token_index", "token_id", "layer", "rel_err"],
             rows, extra_comments=[f"max_rel_err: {worst:.6e}"])
    return [path]


def _cmd_out_sim(args, argv) -> list[str]:
    ctx = _load_context(args, argv, need_corpus=True)
    if not 0 <= args.token < len(ctx.tokens):
        raise ValueError(f"--token {args.token} out of range for corpus of "
                         f"{len(ctx.tokens)} tokens")
    traces = _traced(ctx.model, [ctx.tokens[args.token]], ctx.reference,
                     args.k_override == "all")
    written = []
    for layer in _select_layers(args.layer, ctx.model, gated_only=args.layer == "all"):
        sim = dyn.output_sim_per_token(traces[0], layer)
        written += _emit_matrix_pair(
            ctx, f"out-sim-layer{layer}-token{args.token}", sim)
    return written


def _cmd_avg_out_sim(args, argv) -> list[str]:
    ctx = _load_context(args, argv, need_corpus=True)
    traces = _traced(ctx.model, ctx.tokens, ctx.reference, args.k_override == "all")
    written = []
    for layer in _select_layers(args.layer, ctx.model, gated_only=args.layer == "all"):
        sim = dyn.avg_output_sim(traces, layer)
        written += _emit_matrix_pair(ctx, f"avg-out-sim-layer{layer}", sim)
    return written


def _cmd_norm_rank(args, argv) -> list[str]:
    ctx = _load_context(args, argv, need_corpus=True)
    traces = _traced(ctx.model, ctx.tokens, None, args.k_override == "all")
    layers = _select_layers(args.layer, ctx.model, gated_only=True)
    config = ctx.model.config
    groups: dict[int, list[int]] = {}
    for layer in layers:
        groups.setdefault(config.experts_per_layer[layer], []).append(layer)
    written = []
    for n in sorted(groups):
        rc = dyn.rank_count_matrix(traces, groups[n])
        labels = [str(r + 1) for r in range(rc.n_experts)]
        stem = f"norm-rank-n{n}" if len(groups) > 1 or args.layer == "all" \
            else f"norm-rank-layer{layers[0]}"
        path = os.path.join(ctx.out, f"{stem}.csv")
        comments = [f"layers: {' '.join(str(l) for l in groups[n])}",
                    f"events: {rc.total_events}",
                    "rows: output-norm rank (1 = smallest); "
                    "columns: gate-score rank (1 = smallest)"]
        emit_csv(path, ctx.provenance, ["", *labels],
                 ([labels[i], *rc.counts[i]] for i in range(rc.n_experts)),
                 extra_comments=comments)
        ppm_path = os.path.join(ctx.out, f"{stem}.ppm")
        emit_heatmap(ppm_path, ctx.provenance, rc.counts.astype(np.float64),
                     (0.0, float(rc.counts.max())), cell=ctx.args.cell,
                     extra_comments=comments)
        written += [path, ppm_path, f"{ppm_path}.range.txt"]
    return written


def _cmd_act_ratio(args, argv) -> list[str]:
    ctx = _load_context(args, argv, need_corpus=True)
    traces = _traced(ctx.model, ctx.tokens, None, args.k_override == "all")
    report = dyn.activation_ratio(traces, threshold=args.threshold)
    rows = [[layer, expert, ratio]
            for (layer, expert), ratio in report.per_expert.items()]
    rows.append(["overall", None, report.overall])
    path = os.path.join(ctx.out, "act-ratio.csv")
    emit_csv(path, ctx.provenance, ["layer", "expert", "ratio"], rows,
             extra_comments=[f"threshold: {report.threshold}"])
    return [path]


def _cmd_route_log(args, argv) -> list[str]:
    ctx = _load_context(args, argv, need_corpus=True)
    traces = _traced(ctx.model, ctx.tokens, None, args.k_override == "all")
    log = dyn.routing_pattern(traces)
    rows = []
    for entry in log.entries:
        for slot, (expert, score) in enumerate(entry.selections):
            rows.append([entry.token_index, entry.token_id, entry.layer,
                         slot, expert, score])
    path = os.path.join(ctx.out, "route-log.csv")
    emit_csv(path, ctx.provenance,
             ["token_index", "token_id", "layer", "slot", "expert", "score"], rows)
    return [path]


def _cmd_report(args, argv) -> list[str]:
    """Run the full analysis suite into subdirectories of --out."""
    os.makedirs(args.out, exist_ok=True)
    model = read_checkpoint(args.model)
    config = model.config
    gated = config.moe_layers()

    base = ["--model", args.model]
    ref = ["--ref", args.ref] if args.ref else []
    corpus = ["--corpus", args.corpus]
    sub = lambda name: ["--out", os.path.join(args.out, name)]

    invocations: list[list[str]] = []
    if gated:
        for which in ("up", "act", "down"):
            invocations.append(["matrix-sim", *base, *ref, "--layer", "all",
                                "--which", which, *sub("matrix-sim")])
            invocations.append(["neuron-avg-sim", *base, *ref, "--layer", "all",
                                "--which", which, *sub("neuron-avg-sim")])
            invocations.append(["reorder", *base, "--layer", "all",
                                "--which", which, *sub("reorder")])
            invocations.append(["pca", *base, "--layer", "all", "--which", which,
                                *sub("pca")])
        invocations.append(["gate-sim", *base, "--layer", "all", *sub("gate-sim")])
        if any(config.experts_per_layer[i] >= 3 for i in gated):
            for which in ("up", "act", "down"):
                invocations.append(["gate-corr", *base, "--which", which,
                                    *sub("gate-corr")])
        invocations.append(["out-sim", *base, *ref, *corpus, "--layer", "all",
                            *sub("out-sim")])
        invocations.append(["avg-out-sim", *base, *ref, *corpus, "--layer", "all",
                            *sub("avg-out-sim")])
        invocations.append(["norm-rank", *base, *corpus, "--layer", "all",
                            *sub("norm-rank")])
        invocations.append(["route-log", *base, *corpus, *sub("route-log")])
    invocations.append(["trace", *base, *ref, *corpus, *sub("trace")])
    invocations.append(["act-ratio", *base, *corpus, *sub("act-ratio")])

    for invocation in invocations:
        code = run_command(invocation)
        if code != 0:
            raise ValueError(f"report step failed: {invocation[0]}")
    return []


# --- parser ----------------------------------------------------------------

def _add_common_out(parser):
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--cell", type=int, default=16,
                        help="heatmap block size in pixels")


def _add_model(parser, with_ref=True):
    parser.add_argument("--model", required=True, help="checkpoint path")
    if with_ref:
        parser.add_argument("--ref", help="dense reference checkpoint path")


def _add_corpus(parser):
    parser.add_argument("--corpus", required=True, help="token corpus path")
    parser.add_argument("--k-override", choices=["all"], default=None,
                        help="route every expert instead of the configured top-k")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-lens",
                                     description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("synth", help="generate a synthetic checkpoint")
    p.add_argument("--mode", required=True,
                   choices=["scratch", "upcycled", "permuted-clone"])
    p.add_argument("--seed", type=int, required=True,
                   help="RNG seed (no default on purpose)")
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--experts", default="4",
                   help="experts per layer: one int or comma list")
    p.add_argument("--shared", default="0", help="shared experts per layer")
    p.add_argument("--top-k", type=int, default=2)
    p.add_argument("--d-hid", type=int, default=32)
    p.add_argument("--d-mid", type=int, default=64)
    p.add_argument("--vocab", type=int, default=101)
    p.add_argument("--activation", choices=list(ACTIVATIONS), default="silu")
    p.add_argument("--gating-order", choices=list(GATING_ORDERS),
                   default="topk_then_softmax")
    p.add_argument("--no-prenorm", action="store_true")
    p.add_argument("--init-std", type=float, default=0.02)
    p.add_argument("--noise", type=float, default=0.0,
                   help="upcycling noise ratio relative to --init-std")
    p.set_defaults(func=_cmd_synth)

    for name, func, needs_which in (("matrix-sim", _cmd_matrix_sim, True),
                                    ("neuron-avg-sim", _cmd_neuron_avg_sim, True)):
        p = commands.add_parser(name, help=f"{name} over expert weights")
        _add_model(p)
        p.add_argument("--layer", default="all")
        p.add_argument("--which", required=needs_which,
                       choices=list(sta.WHICH_MATRICES))
        _add_common_out(p)
        p.set_defaults(func=func)

    p = commands.add_parser("reorder", help="neuron alignment between expert pairs")
    _add_model(p, with_ref=False)
    p.add_argument("--layer", default="all")
    p.add_argument("--which", required=True, choices=list(sta.WHICH_MATRICES))
    _add_common_out(p)
    p.set_defaults(func=_cmd_reorder)

    p = commands.add_parser("gate-sim", help="gate row similarity")
    _add_model(p, with_ref=False)
    p.add_argument("--layer", default="all")
    _add_common_out(p)
    p.set_defaults(func=_cmd_gate_sim)

    p = commands.add_parser("gate-corr",
                            help="gate-vs-expert similarity regression per layer")
    _add_model(p, with_ref=False)
    p.add_argument("--which", required=True, choices=list(sta.WHICH_MATRICES))
    _add_common_out(p)
    p.set_defaults(func=_cmd_gate_corr)

    p = commands.add_parser("pca", help="principal-component projection of experts")
    _add_model(p, with_ref=False)
    p.add_argument("--layer", default="all")
    p.add_argument("--which", required=True, choices=list(sta.WHICH_MATRICES))
    p.add_argument("--level", choices=["matrix", "neuron"], default="matrix")
    p.add_argument("--dims", type=int, default=2)
    p.add_argument("--eps", type=float, default=None,
                   help="enable DBSCAN outlier removal with this radius")
    p.add_argument("--min-pts", type=int, default=2)
    p.add_argument("--no-standardize", action="store_true")
    _add_common_out(p)
    p.set_defaults(func=_cmd_pca)

    p = commands.add_parser("trace", help="two-stage trace consistency table")
    _add_model(p)
    _add_corpus(p)
    _add_common_out(p)
    p.set_defaults(func=_cmd_trace)

    p = commands.add_parser("out-sim", help="per-token expert output similarity")
    _add_model(p)
    _add_corpus(p)
    p.add_argument("--layer", default="all")
    p.add_argument("--token", type=int, default=0,
                   help="flattened corpus token index")
    _add_common_out(p)
    p.set_defaults(func=_cmd_out_sim)

    p = commands.add_parser("avg-out-sim",
                            help="corpus-averaged angular output similarity")
    _add_model(p)
    _add_corpus(p)
    p.add_argument("--layer", default="all")
    _add_common_out(p)
    p.set_defaults(func=_cmd_avg_out_sim)

    p = commands.add_parser("norm-rank",
                            help="output-norm rank vs gate-score rank counts")
    _add_model(p, with_ref=False)
    _add_corpus(p)
    p.add_argument("--layer", default="all")
    _add_common_out(p)
    p.set_defaults(func=_cmd_norm_rank)

    p = commands.add_parser("act-ratio", help="activation sparsity ratios")
    _add_model(p, with_ref=False)
    _add_corpus(p)
    p.add_argument("--threshold", type=float, default=0.001)
    _add_common_out(p)
    p.set_defaults(func=_cmd_act_ratio)

    p = commands.add_parser("route-log", help="routing decisions per token")
    _add_model(p, with_ref=False)
    _add_corpus(p)
    _add_common_out(p)
    p.set_defaults(func=_cmd_route_log)

    p = commands.add_parser("report", help="run the full analysis bundle")
    _add_model(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_report)

    return parser


def run_command(argv: list[str]) -> int:
    """Parse and execute one invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        written = args.func(args, argv)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


def main() -> int:
    return run_command(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
