"""Command-line interface.

Exit codes: 0 on success, 1 on invalid input (bad arguments, malformed
files, contract violations), 2 on I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional, Sequence

from . import reports
from .corpus import (
    aggregate_diff,
    aggregate_pos_relevance,
    rank_top_interactions,
    select_quantile_groups,
)
from .encoder import Model, Vocab, load_model, save_model
from .evaluation import (
    average_cosine_similarity_report,
    conservation_check,
    evaluate_perturbation,
    predict_similarities,
    spearman_rho,
)
from .interactions import METHODS, FactorCache, explain_pair
from .pairs import parse_pairs_file, write_pairs_file
from .relevance import RuleConfig
from .svg import render_heatmap_svg
from .synthetic import VARIANTS, build_nounmatch_model, default_spec, generate_pairs, ground_truth_matrix

ENV_HELP = """\
environment:
  BILRP_LRP_EPS    floor on the magnitude of LRP denominators (default 1e-9)
  BILRP_GELU_EPS   stabilizer for activation gains (default 1e-9)
"""


class UsageError(ValueError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _model_args(p, pairs=True):
    p.add_argument("--model", required=True, help="model config (JSON)")
    p.add_argument("--weights", required=True, help="weight container")
    if pairs:
        p.add_argument("--pairs", required=True, help="pairs file (JSONL)")
    p.add_argument("--vocab", help="vocabulary file, one token per line")
    p.add_argument("--zero-bias", action="store_true", help="explain the model with all biases zeroed")
    p.add_argument("--normalized-similarity", action="store_true",
                   help="explain cosine similarity instead of the dot product")
    p.add_argument("--stdout", action="store_true", help="also stream reports to standard output")


def _method_arg(p, default="bilrp"):
    p.add_argument("--method", choices=METHODS, default=default)


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(
        prog="bilrp",
        description="Second-order token interaction explanations for similarity models.",
        epilog=ENV_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("explain", help="interaction matrices for every pair", epilog=ENV_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _model_args(p)
    _method_arg(p)
    p.add_argument("--out", required=True, help="output file (.csv for CSV, JSON lines otherwise)")
    p.add_argument("--svg", help="directory for per-pair SVG heatmaps")
    p.add_argument("--parallel", type=int, default=1, metavar="N", help="worker threads")

    ev = sub.add_parser("eval", help="evaluation reports").add_subparsers(
        dest="eval_command", required=True, parser_class=Parser)
    p = ev.add_parser("perturb", help="perturbation curves and AUPC", epilog=ENV_HELP,
                      formatter_class=argparse.RawDescriptionHelpFormatter)
    _model_args(p)
    p.add_argument("--step", type=float, default=0.04)
    p.add_argument("--fill", type=int, help="filler token id (default: the model's mask token)")
    p.add_argument("--methods", nargs="+", default=["bilrp", "hxp", "embedding", "random"],
                   choices=[*METHODS, "random"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")

    p = ev.add_parser("conserve", help="relevance sum against similarity", epilog=ENV_HELP,
                      formatter_class=argparse.RawDescriptionHelpFormatter)
    _model_args(p)
    _method_arg(p)
    p.add_argument("--out", required=True)

    p = ev.add_parser("similarity", help="predictions and Spearman correlation")
    _model_args(p)
    p.add_argument("--out", required=True)

    co = sub.add_parser("corpus", help="corpus-level analysis").add_subparsers(
        dest="corpus_command", required=True, parser_class=Parser)
    p = co.add_parser("pos", help="relevance aggregated over POS-tag pairs", epilog=ENV_HELP,
                      formatter_class=argparse.RawDescriptionHelpFormatter)
    _model_args(p)
    _method_arg(p)
    p.add_argument("--normalize", choices=["sum", "mean", "none"], default="sum")
    p.add_argument("--sign", choices=["pos", "neg"], default="pos",
                   help="sign shown in the printed summary")
    p.add_argument("--out", required=True)
    p.add_argument("--svg")

    p = co.add_parser("top", help="top token interactions in similarity quantiles", epilog=ENV_HELP,
                      formatter_class=argparse.RawDescriptionHelpFormatter)
    _model_args(p)
    _method_arg(p)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--quantile", type=float, default=0.25)
    p.add_argument("--include-special", action="store_true")
    p.add_argument("--out", required=True)

    p = co.add_parser("diff", help="POS-pair relevance differences between two settings",
                      epilog=ENV_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _model_args(p)
    _method_arg(p)
    p.add_argument("--model-y", help="second model config (default: same as --model)")
    p.add_argument("--weights-y", help="second weight container")
    p.add_argument("--pairs-y", help="second pairs file (default: same as --pairs)")
    p.add_argument("--normalize", choices=["sum", "mean", "none"], default="sum")
    p.add_argument("--sign", choices=["pos", "neg"], default="pos")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--out", required=True)

    sy = sub.add_parser("synth", help="synthetic models with known interactions").add_subparsers(
        dest="synth_command", required=True, parser_class=Parser)
    p = sy.add_parser("nounmatch", help="noun-matching model, pairs and ACS check")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, default=200, help="number of pairs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=VARIANTS, default="filter")
    p.add_argument("--stdout", action="store_true", help="also print the ACS summary JSON")
    return parser


# ---------------------------------------------------------------------------


def _emit(args, text: str, path: str) -> None:
    reports.write_text(text, path)
    if getattr(args, "stdout", False):
        sys.stdout.write(text)


def _load(args, config=None, weights=None, pairs=None):
    model = load_model(config or args.model, weights or args.weights)
    vocab = Vocab.load(args.vocab) if getattr(args, "vocab", None) else None
    pair_list = parse_pairs_file(pairs or args.pairs, vocab, model.config.vocab_size)
    return model, pair_list


def _rules(args) -> RuleConfig:
    return RuleConfig.from_env(zero_biases=args.zero_bias)


def _manifest(args, model: Model, method: str, output: str, dataset=None, **extra):
    rules = _rules(args).to_dict() if hasattr(args, "zero_bias") else {}
    m = reports.RunManifest(model.fingerprint, rules, method, dataset or getattr(args, "pairs", ""),
                            extra=extra)
    reports.write_manifest(m, output)


def _explain_all(args, model, pairs, method, parallel=1):
    rules = _rules(args)
    cache = FactorCache()

    def job(pair):
        return explain_pair(method, model, pair.a, pair.b, rules,
                            normalized=args.normalized_similarity, cache=cache, pair_id=pair.id)

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(job, pairs))
    return [job(p) for p in pairs]


def cmd_explain(args) -> int:
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    model, pairs = _load(args)
    matrices = _explain_all(args, model, pairs, args.method, args.parallel)
    if args.out.endswith(".csv"):
        text = reports.explanations_csv(matrices)
    else:
        text = reports.explanations_jsonl(matrices)
    _emit(args, text, args.out)
    _manifest(args, model, args.method, args.out)
    if args.svg:
        os.makedirs(args.svg, exist_ok=True)
        for m in matrices:
            path = os.path.join(args.svg, f"{m.pair_id}.svg")
            render_heatmap_svg(m, path)
            _manifest(args, model, args.method, path)
    return 0


def cmd_perturb(args) -> int:
    model, pairs = _load(args)
    report = evaluate_perturbation(model, pairs, args.methods, step=args.step,
                                   fill_token=args.fill, rules=_rules(args), seed=args.seed)
    outputs = {
        f"{args.out}.csv": reports.perturbation_csv(report),
        f"{args.out}.curves.csv": reports.curves_csv(report),
        f"{args.out}.summary.json": reports.dumps(reports.perturbation_summary(report), indent=2) + "\n",
    }
    for path, text in outputs.items():
        _emit(args, text, path)
        _manifest(args, model, ",".join(args.methods), path, step=args.step,
                  fill=args.fill if args.fill is not None else model.config.mask_token_id)
    return 0


def cmd_conserve(args) -> int:
    model, pairs = _load(args)
    rules = _rules(args)
    cache = FactorCache()
    records = [conservation_check(model, p, rules, args.method, cache) for p in pairs]
    _emit(args, reports.conservation_csv(records), args.out)
    _manifest(args, model, args.method, args.out)
    return 0


def cmd_similarity(args) -> int:
    model, pairs = _load(args)
    preds = predict_similarities(model, pairs, args.normalized_similarity)
    text = reports.csv_text(("pair_id", "predicted", "gold"), preds)
    _emit(args, text, args.out)
    _manifest(args, model, "similarity", args.out)
    rho = spearman_rho([p[1] for p in preds], [p[2] for p in preds])
    summary = {"n": len(preds), "spearman_rho_x100": 100 * rho}
    summary_path = args.out + ".summary.json"
    reports.write_text(reports.dumps(summary, indent=2) + "\n", summary_path)
    _manifest(args, model, "similarity", summary_path)
    print(f"spearman_rho_x100 {reports.round_sig(100 * rho)}")
    return 0


def _pos_aggregate(args, model, pairs, normalization):
    return aggregate_pos_relevance(_explain_all(args, model, pairs, args.method), normalization)


def cmd_pos(args) -> int:
    model, pairs = _load(args)
    agg = _pos_aggregate(args, model, pairs, args.normalize)
    _emit(args, reports.pos_csv(agg), args.out)
    _manifest(args, model, args.method, args.out, normalization=args.normalize)
    if args.svg:
        render_heatmap_svg(agg, args.svg)
        _manifest(args, model, args.method, args.svg, normalization=args.normalize)
    strongest = sorted(agg.cells, key=lambda t: (-abs(agg.value(t, args.sign)), t))[:10]
    for tags in strongest:
        print(f"{tags[0]}\t{tags[1]}\t{reports.round_sig(agg.value(tags, args.sign))}")
    return 0


def cmd_top(args) -> int:
    model, pairs = _load(args)
    matrices = _explain_all(args, model, pairs, args.method)
    predictions = [(m.pair_id, m.similarity) for m in matrices]
    high, low = select_quantile_groups(predictions, args.quantile)
    rankings = [
        rank_top_interactions(matrices, ids, args.k, exclude_special=not args.include_special,
                              group=name)
        for name, ids in (("high", high), ("low", low))
    ]
    _emit(args, reports.ranking_csv(rankings), args.out)
    _manifest(args, model, args.method, args.out, k=args.k, quantile=args.quantile)
    return 0


def cmd_diff(args) -> int:
    model, pairs = _load(args)
    model_y, pairs_y = _load(args, args.model_y, args.weights_y, args.pairs_y)
    agg_x = _pos_aggregate(args, model, pairs, args.normalize)
    agg_y = _pos_aggregate(args, model_y, pairs_y, args.normalize)
    entries = aggregate_diff(agg_x, agg_y, args.sign, args.top)
    _emit(args, reports.diff_csv(entries), args.out)
    _manifest(args, model, args.method, args.out, model_y=model_y.fingerprint,
              dataset_y=args.pairs_y or args.pairs, sign=args.sign)
    return 0


def cmd_nounmatch(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    spec = default_spec()
    model = build_nounmatch_model(spec, args.variant)
    pairs = generate_pairs(spec, args.n, args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    paths = {name: os.path.join(args.out_dir, name)
             for name in ("config.json", "weights.tnsr", "vocab.txt", "pairs.jsonl", "acs.json")}
    save_model(model, paths["config.json"], paths["weights.tnsr"])
    spec.to_vocab().save(paths["vocab.txt"])
    write_pairs_file(pairs, paths["pairs.jsonl"])

    cache = FactorCache()
    truths = [ground_truth_matrix(p.a, p.b, spec) for p in pairs]
    results = {}
    for method in METHODS:
        matrices = [explain_pair(method, model, p.a, p.b, cache=cache, pair_id=p.id) for p in pairs]
        rep = average_cosine_similarity_report(matrices, truths)
        results[method] = {"acs": rep.value, "degenerate": rep.degenerate}
    summary = {"variant": args.variant, "n_pairs": len(pairs), "seed": args.seed, "methods": results}
    _emit(args, reports.dumps(summary, indent=2) + "\n", paths["acs.json"])
    for name, path in paths.items():
        reports.write_manifest(
            reports.RunManifest(model.fingerprint, RuleConfig().to_dict(), "nounmatch",
                                paths["pairs.jsonl"], extra={"variant": args.variant}),
            path,
        )
    for method, r in results.items():
        print(f"{method}\tACS {reports.round_sig(r['acs'])}")
    return 0


COMMANDS = {
    ("explain", None): cmd_explain,
    ("eval", "perturb"): cmd_perturb,
    ("eval", "conserve"): cmd_conserve,
    ("eval", "similarity"): cmd_similarity,
    ("corpus", "pos"): cmd_pos,
    ("corpus", "top"): cmd_top,
    ("corpus", "diff"): cmd_diff,
    ("synth", "nounmatch"): cmd_nounmatch,
}


def run_command(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        sub = getattr(args, f"{args.command}_command", None)
        return COMMANDS[(args.command, sub)](args)
    except OSError as exc:
        print(f"bilrp: I/O error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"bilrp: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return exc.code or 0


def main() -> None:
    sys.exit(run_command())
