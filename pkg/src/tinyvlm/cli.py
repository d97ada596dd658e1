"""Command-line front end.

Every failure exits non-zero after printing a machine-readable JSON error
({"error": code, "message": ...}) on stderr. Experiment pipelines write
into a content-addressed run directory under $TINYVLM_RUN_ROOT (default
./runs) guarded by a lock file; completed runs are never overwritten.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import selection as sel
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import Vocabulary, load_dataset
from .evaluation import EvalReport, accuracy, perplexity
from .experiments import (LabParams, generate_lab_data, pretrain_backbone,
                          run_fig1, run_fig2, run_fig5, run_sft, run_table2,
                          run_table7, save_lab_data)
from .manifest import RunDirError, create_run_dir, file_digest, finalize_run_dir
from .metrics import (ImportanceScores, activation_angular_distance, bi_score,
                      capture_traces, heatmap_to_csv, image_attention_matrix,
                      image_attention_score, multimodal_bi_score,
                      param_angular_distance, param_change_ratio, scores_to_csv)
from .surgery import region_constrained_prune, revert_layers, unconstrained_prune
from .training import write_loss_curve


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def parse_selection(spec: str, n_layers: int) -> list[int]:
    """Accept "sparse-uniform:k", "consecutive:start:len", "hybrid:k",
    a JSON array literal, or a path to a JSON file holding one."""
    if spec.startswith("sparse-uniform:"):
        return sel.sparse_uniform(n_layers, int(spec.split(":")[1]))
    if spec.startswith("consecutive:"):
        _, start, length = spec.split(":")
        return sel.consecutive(n_layers, int(start), int(length))
    if spec.startswith("hybrid:"):
        return sel.hybrid_ends(n_layers, int(spec.split(":")[1]))
    if spec.strip().startswith("["):
        layers = json.loads(spec)
    elif Path(spec).exists():
        with open(spec) as f:
            layers = json.load(f)
    else:
        raise CliError("bad_selection", f"cannot parse selection spec {spec!r}")
    return sel.validate_selection(layers, n_layers, allow_empty=False)


def _load_params(path: str | None) -> LabParams:
    if path is None:
        return LabParams()
    with open(path) as f:
        return LabParams.from_json(f.read())


def _load_data_dir(data_dir: str):
    d = Path(data_dir)
    vocab = Vocabulary.load(d / "vocab.json")
    with open(d / "datagen.json") as f:
        meta = json.load(f)
    return d, vocab, meta


def cmd_gen_data(args):
    params = _load_params(args.params)
    data = generate_lab_data(args.seed, params)
    save_lab_data(data, Path(args.out))
    print(f"wrote datasets + vocab.json to {args.out}")


def cmd_pretrain(args):
    params = _load_params(args.params)
    d, vocab, _ = _load_data_dir(args.data)
    data = _rebuild_lab_data(d, vocab, params)
    ckpt, info = pretrain_backbone(args.seed, params, data)
    save_checkpoint(ckpt, args.out)
    if args.loss_csv:
        write_loss_curve(info["backbone_curve"], args.loss_csv)
    print(f"wrote backbone checkpoint to {args.out} "
          f"(final LM loss {info['backbone_curve'][-1][1]:.4f})")


def _rebuild_lab_data(d: Path, vocab: Vocabulary, params: LabParams):
    from .experiments import LabData
    from .data import VISUAL_KINDS
    with open(d / "datagen.json") as f:
        meta = json.load(f)
    return LabData(
        vocab, meta["fact_map"],
        load_dataset(d / "corpus_train.jsonl"),
        load_dataset(d / "corpus_heldout.jsonl"),
        load_dataset(d / "caption.jsonl"),
        load_dataset(d / "sft_train.jsonl"),
        {k: load_dataset(d / f"eval_{k}.jsonl") for k in VISUAL_KINDS},
        load_dataset(d / "eval_factqa.jsonl"),
    )


def cmd_sft(args):
    params = _load_params(args.params)
    d, vocab, _ = _load_data_dir(args.data)
    data = _rebuild_lab_data(d, vocab, params)
    base = load_checkpoint(args.base)
    layers = parse_selection(args.selection, base.config.n_layers)
    res = run_sft(base, layers, data, params, args.seed, args.adapter_rank)
    save_checkpoint(res.checkpoint, args.out)
    if args.loss_csv:
        write_loss_curve(res.loss_curve, args.loss_csv)
    print(f"fine-tuned layers {layers} -> {args.out} "
          f"(final loss {res.loss_curve[-1][1]:.4f}, {res.wall_seconds:.1f}s)")


def cmd_score(args):
    ckpt = load_checkpoint(args.ckpt)
    if args.metric in ("param_change_ratio", "param_angular"):
        if not args.base:
            raise CliError("missing_base", f"--base is required for {args.metric}")
        base = load_checkpoint(args.base)
        fn = param_change_ratio if args.metric == "param_change_ratio" else param_angular_distance
        scores = fn(base, ckpt)
    else:
        if not args.data:
            raise CliError("missing_data", f"--data is required for {args.metric}")
        vocab = Vocabulary.load(Path(args.vocab)) if args.vocab else Vocabulary()
        dataset = []
        for p in args.data:
            dataset += load_dataset(p)
        traces = capture_traces(ckpt, dataset, vocab, args.samples, args.seed)
        if args.metric == "bi":
            scores = bi_score(traces)
        elif args.metric == "multimodal_bi":
            scores = multimodal_bi_score(traces)
        elif args.metric == "activation_angular":
            scores = activation_angular_distance(traces, gap=args.gap)
        elif args.metric == "image_attention":
            scores = image_attention_score(traces)
            if args.heatmap_out:
                heatmap_to_csv(image_attention_matrix(traces), args.heatmap_out)
        else:
            raise CliError("bad_metric", f"unknown metric {args.metric!r}")
    scores.provenance["checkpoint"] = str(args.ckpt)
    scores_to_csv(scores, args.out)
    print(f"wrote {args.metric} scores to {args.out}")


def cmd_select(args):
    if args.strategy == "sparse-uniform":
        layers = sel.sparse_uniform(args.layers, args.k)
    elif args.strategy == "consecutive":
        layers = sel.consecutive(args.layers, args.start, args.k)
    elif args.strategy == "hybrid":
        layers = sel.hybrid_ends(args.layers, args.k)
    elif args.strategy == "top-k":
        if not args.scores:
            raise CliError("missing_scores", "--scores CSV is required for top-k")
        values = _read_scores_csv(args.scores)
        exclude = json.loads(args.exclude) if args.exclude else None
        layers = sel.top_k_by_score(values, args.k, args.direction, exclude)
    else:
        raise CliError("bad_strategy", f"unknown strategy {args.strategy!r}")
    text = json.dumps(layers)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)


def _read_scores_csv(path: str) -> np.ndarray:
    values = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("layer,"):
                continue
            _, score = line.split(",", 1)
            values.append(float(score))
    return np.asarray(values)


def cmd_revert(args):
    tuned = load_checkpoint(args.tuned)
    backbone = load_checkpoint(args.backbone)
    layers = parse_selection(args.layers, tuned.config.n_layers)
    out = revert_layers(tuned, backbone, layers)
    save_checkpoint(out, args.out)
    print(f"reverted layers {layers} -> {args.out}")


def cmd_prune(args):
    ckpt = load_checkpoint(args.ckpt)
    values = _read_scores_csv(args.scores)
    scores = ImportanceScores("activation_angular", values, {"source": args.scores})
    if args.unconstrained:
        pruned, dropped = unconstrained_prune(ckpt, args.k, scores)
    else:
        if not args.region:
            raise CliError("missing_region", "--region is required unless --unconstrained")
        region = parse_selection(args.region, ckpt.config.n_layers)
        pruned, dropped = region_constrained_prune(ckpt, region, args.k, scores)
    save_checkpoint(pruned, args.out)
    print(f"dropped layers {dropped} -> {args.out} "
          f"({pruned.config.n_layers} layers remain)")


TASK_FILES = {
    "perception_color": "eval_perception_color.jsonl",
    "perception_count": "eval_perception_count.jsonl",
    "cognition_meaning": "eval_cognition_meaning.jsonl",
    "factqa": "eval_factqa.jsonl",
    "text": "corpus_heldout.jsonl",
}


def cmd_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    d, vocab, _ = _load_data_dir(args.data)
    tasks = args.tasks.split(",") if args.tasks else list(TASK_FILES)
    reports = []
    for task in tasks:
        if task not in TASK_FILES:
            raise CliError("bad_task", f"unknown task {task!r}; "
                           f"choose from {sorted(TASK_FILES)}")
        dataset = load_dataset(d / TASK_FILES[task])
        span = "all_next_token" if task == "text" else "answer_only"
        acc = 0.0 if task == "text" else accuracy(ckpt, dataset, vocab)
        reports.append(EvalReport(
            model_id=str(args.ckpt), task_kind=task, n_examples=len(dataset),
            accuracy=acc, perplexity=perplexity(ckpt, dataset, vocab, span)))
    payload = [json.loads(r.to_json()) for r in reports]
    if args.out:
        with open(args.out, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
    if args.csv:
        with open(args.csv, "w") as f:
            f.write("task,n_examples,accuracy,perplexity\n")
            for r in reports:
                f.write(f"{r.task_kind},{r.n_examples},{r.accuracy!r},{r.perplexity!r}\n")
    print(json.dumps(payload, indent=2, sort_keys=True))


EXPERIMENTS = {"table2": run_table2, "fig1": run_fig1, "fig2": run_fig2,
               "fig5": run_fig5, "table7": run_table7}


def cmd_exp(args):
    params = _load_params(args.params)
    payload = {"experiment": args.name, "seed": args.seed,
               "params": json.loads(params.to_json())}
    inputs = {args.params: file_digest(args.params)} if args.params else {}
    run_dir = create_run_dir(args.name, payload, inputs)
    try:
        results = EXPERIMENTS[args.name](args.seed, params, out_dir=run_dir)
    except BaseException:
        (run_dir / "LOCK").unlink(missing_ok=True)
        raise
    summary = {k: v for k, v in results.items() if not k.startswith("_")}
    with open(run_dir / "results.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True, default=str)
    finalize_run_dir(run_dir)
    print(f"experiment {args.name} complete -> {run_dir}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tinyvlm",
                                description="Synthetic visual-region training lab")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate corpus/caption/SFT/eval splits")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--params", help="LabParams JSON file")
    g.set_defaults(fn=cmd_gen_data)

    g = sub.add_parser("pretrain", help="backbone + projector pretraining")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--data", required=True, help="gen-data output directory")
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--params")
    g.add_argument("--loss-csv")
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("sft", help="selective-layer supervised fine-tuning")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--base", required=True, help="pretrained checkpoint")
    g.add_argument("--selection", required=True,
                   help="sparse-uniform:k | consecutive:start:len | hybrid:k | JSON")
    g.add_argument("--adapter-rank", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--params")
    g.add_argument("--loss-csv")
    g.set_defaults(fn=cmd_sft)

    g = sub.add_parser("score", help="layer-importance scores -> CSV")
    g.add_argument("--metric", required=True,
                   choices=["bi", "multimodal_bi", "param_change_ratio",
                            "param_angular", "activation_angular", "image_attention"])
    g.add_argument("--ckpt", required=True)
    g.add_argument("--base", help="backbone checkpoint (param metrics)")
    g.add_argument("--data", nargs="*", help="dataset JSONL file(s) (trace metrics)")
    g.add_argument("--vocab", help="vocab.json (defaults to the built-in enumeration)")
    g.add_argument("--samples", type=int, default=50, help="instances per task kind")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--gap", type=int, default=1)
    g.add_argument("--out", required=True)
    g.add_argument("--heatmap-out", help="per-instance CSV (image_attention only)")
    g.set_defaults(fn=cmd_score)

    g = sub.add_parser("select", help="produce a layer selection JSON")
    g.add_argument("--strategy", required=True,
                   choices=["sparse-uniform", "consecutive", "hybrid", "top-k"])
    g.add_argument("--layers", type=int, required=True, help="model layer count L")
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--start", type=int, default=0, help="consecutive only")
    g.add_argument("--scores", help="scores CSV (top-k only)")
    g.add_argument("--direction", choices=["highest", "lowest"], default="highest")
    g.add_argument("--exclude", help="JSON array of excluded layers (top-k)")
    g.add_argument("--out")
    g.set_defaults(fn=cmd_select)

    g = sub.add_parser("revert", help="revert layers to backbone parameters")
    g.add_argument("--tuned", required=True)
    g.add_argument("--backbone", required=True)
    g.add_argument("--layers", required=True, help="selection spec")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_revert)

    g = sub.add_parser("prune", help="drop low-importance layers")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--scores", required=True, help="importance CSV (layer,score)")
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--region", help="protected visual-region selection spec")
    g.add_argument("--unconstrained", action="store_true")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_prune)

    g = sub.add_parser("eval", help="accuracy/perplexity reports")
    g.add_argument("--ckpt", required=True)
    g.add_argument("--data", required=True, help="gen-data output directory")
    g.add_argument("--tasks", help="comma list: perception_color,perception_count,"
                                   "cognition_meaning,factqa,text")
    g.add_argument("--out", help="JSON report path")
    g.add_argument("--csv", help="CSV report path")
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("exp", help="end-to-end named reproduction pipelines")
    g.add_argument("name", choices=sorted(EXPERIMENTS))
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--params")
    g.set_defaults(fn=cmd_exp)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except CliError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except CheckpointError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except RunDirError as exc:
        print(json.dumps({"error": exc.code, "message": str(exc)}), file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(json.dumps({"error": "invalid_input", "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
