"""Command-line entry point.

Configuration resolves as defaults < JSON config file < flags; the output
directory may also come from ``ATNATLAS_OUT``. The resolved configuration is
printed first on every run.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from attnatlas import ablation, analysis, plotting
from attnatlas.encoder import AblationSpec, ModelConfig, read_checkpoint, write_checkpoint
from attnatlas.errors import DataError, NumericalError
from attnatlas.formats import render_heatmap, write_attention_dump
from attnatlas.tasks import (
    SyntheticGrammar,
    TokenRole,
    generate_pair_task,
    generate_relation_annotations,
    generate_single_task,
    read_dataset,
    read_feature_list,
    write_dataset,
)
from attnatlas.training import Hyperparams, fine_tune, mlm_evaluate, pretrain, pretraining_corpus, evaluate

log = logging.getLogger("attnatlas")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "ATNATLAS_OUT"
DEFAULT_OUT = "atnatlas-out"

# flag dest -> (section, key)
_OVERRIDES = {
    "layers": ("model", "n_layers"),
    "heads": ("model", "n_heads"),
    "d_model": ("model", "d_model"),
    "d_ff": ("model", "d_ff"),
    "max_len": ("model", "max_len"),
    "vocab_size": ("model", "vocab_size"),
    "epochs": ("hyper", "epochs"),
    "batch": ("hyper", "batch_size"),
    "lr": ("hyper", "learning_rate"),
    "mask_rate": ("hyper", "mask_rate"),
    "negation_prob": ("grammar", "negation_prob"),
    "corruption_rate": ("grammar", "corruption_rate"),
    "corrupt_fraction": ("grammar", "corrupt_fraction"),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _defaults() -> dict:
    grammar = SyntheticGrammar()
    return {
        "seed": 0,
        "out": DEFAULT_OUT,
        "figures": True,
        "model": ModelConfig().to_dict(),
        "hyper": {k: v for k, v in Hyperparams().to_dict().items() if k != "seed"},
        "grammar": {
            "vocab_size": grammar.vocab_size,
            "negation_prob": grammar.negation_prob,
            "corruption_rate": grammar.corruption_rate,
            "shuffle_prob": grammar.shuffle_prob,
            "corrupt_fraction": grammar.corrupt_fraction,
        },
        "thresholds": dataclasses.asdict(analysis.Thresholds()),
    }


def resolve_config(args) -> dict:
    cfg = _defaults()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"config file {args.config}: {exc}") from None
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(cfg.get(key), dict):
                unknown = set(value) - set(cfg[key])
                if unknown:
                    raise DataError(f"config file: unknown {key} keys {sorted(unknown)}")
                cfg[key].update(value)
            elif key in cfg:
                cfg[key] = value
            else:
                raise DataError(f"config file: unknown key {key!r}")
    if os.environ.get(OUT_ENV):
        cfg["out"] = os.environ[OUT_ENV]
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.no_figures:
        cfg["figures"] = False
    for dest, (section, key) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            cfg[section][key] = value
    cfg["command"] = args.command
    cfg["args"] = {
        k: v for k, v in sorted(vars(args).items())
        if k not in ("command", "config", "out", "seed", "no_figures", "func") and k not in _OVERRIDES
    }
    return cfg


def _model(cfg) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def _hyper(cfg) -> Hyperparams:
    return Hyperparams(seed=cfg["seed"], **cfg["hyper"])


def _grammar(cfg) -> SyntheticGrammar:
    return SyntheticGrammar(seed=cfg["seed"], **cfg["grammar"])


def _thresholds(cfg) -> analysis.Thresholds:
    return analysis.Thresholds(**cfg["thresholds"])


def _parse_ablation(args, config: ModelConfig) -> AblationSpec:
    coords = []
    for item in (getattr(args, "ablate", None) or "").split(","):
        if not item.strip():
            continue
        try:
            l, h = item.split(":")
            coords.append((int(l), int(h)))
        except ValueError:
            raise DataError(f"bad head coordinate {item!r}; expected layer:head") from None
    for l in getattr(args, "ablate_layer", None) or []:
        coords += [(l, h) for h in range(config.n_heads)]
    if getattr(args, "ablate_all", False):
        coords += list(AblationSpec.everything(config).disabled)
    spec = AblationSpec.of(coords)
    spec.validate(config)
    return spec


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, cfg, out: Path):
    grammar = _grammar(cfg)
    gen = {"single": generate_single_task, "pair": generate_pair_task,
           "relations": generate_relation_annotations}[args.task]
    data = gen(grammar, args.n)
    if args.task == "relations" and args.filter:
        data = analysis.filter_annotations(data)
    path = out / (args.name or f"{args.task}.jsonl")
    write_dataset(path, data)
    print(f"wrote {len(data)} examples to {path}")


def cmd_pretrain(args, cfg, out: Path):
    grammar = _grammar(cfg)
    hyper = _hyper(cfg)
    ck = pretrain(_model(cfg), grammar, hyper, n_examples=args.n_examples, log_path=out / "pretrain_log.csv")
    write_checkpoint(ck, out / args.name)
    held = pretraining_corpus(grammar, 300, cfg["seed"] + 9001)
    loss, acc = mlm_evaluate(ck, held, hyper.mask_rate, cfg["seed"])
    _write_json(out / "pretrain.json", {"heldout_mlm_loss": loss, "heldout_mlm_accuracy": acc,
                                        "uniform_baseline": 1.0 / ck.config.vocab_size})
    print(f"held-out masked-token loss {loss:.4f}, accuracy {acc:.4f}")


def cmd_finetune(args, cfg, out: Path):
    train = read_dataset(args.train)
    held = read_dataset(args.eval) if args.eval else None
    init = cfg["seed"] if args.random_init else read_checkpoint(args.init)
    ck, score = fine_tune(init, train, _hyper(cfg), eval_set=held, metric_kind=args.metric,
                          config=_model(cfg), log_path=out / "finetune_log.csv")
    write_checkpoint(ck, out / args.name)
    _write_json(out / "finetune.json", {"metric": args.metric, "score": score,
                                        "init": "random" if args.random_init else str(args.init)})
    print(f"{args.metric} {score:.4f}")


def cmd_evaluate(args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    spec = _parse_ablation(args, ck.config)
    score = evaluate(ck, read_dataset(args.data), args.metric, spec)
    _write_json(out / "evaluate.json", {"metric": args.metric, "score": score,
                                        "ablated": sorted(map(list, spec.disabled))})
    print(f"{args.metric} {score:.4f}")


def _index_range(args, n):
    if args.range:
        try:
            a, b = (int(x) for x in args.range.split(":"))
        except ValueError:
            raise DataError(f"bad range {args.range!r}; expected start:stop") from None
        idx = list(range(a, b))
    else:
        idx = [args.index]
    bad = [i for i in idx if not 0 <= i < n]
    if bad or not idx:
        raise DataError(f"example index {bad[0] if bad else args.range} out of range for {n} examples")
    return idx


def cmd_dump_attn(args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    data = read_dataset(args.data)
    spec = _parse_ablation(args, ck.config)
    idx = _index_range(args, len(data))
    tensors = analysis.attention_tensors(ck, [data[i] for i in idx], spec)
    write_attention_dump(out / args.name, tensors, idx)
    if args.pgm:
        for i, t in zip(idx, tensors):
            for l in range(t.shape[0]):
                for h in range(t.shape[1]):
                    render_heatmap(t[l, h], out / f"attn_ex{i}_l{l}_h{h}.pgm", args.normalize)
    print(f"wrote {len(tensors)} attention tensors to {out / args.name}")


def cmd_patterns(args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    dist = analysis.pattern_distribution(ck, read_dataset(args.data), args.limit, _thresholds(cfg))
    dist.to_csv(out / "patterns.csv", out / "patterns_per_head.csv")
    if cfg["figures"]:
        plotting.plot_pattern_distribution(dist.fractions(), out / "patterns.png")
    for c, f in dist.fractions().items():
        print(f"{c.value:18s} {100 * f:6.2f}%")


def cmd_probe_relations(args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    annos = read_dataset(args.data)
    if not args.no_filter:
        annos = analysis.filter_annotations(annos)
    scores = analysis.relation_head_scores(ck, annos)
    heads = analysis.detect_relation_heads(scores, args.percentile)
    scores.to_csv(out / "relation_scores.csv")
    _write_json(out / "relation_heads.json", {
        "n_annotations": scores.n_examples,
        "percentile": args.percentile,
        "heads": [{"layer": c.layer, "head": c.head, "score": float(scores.scores[c])} for c in heads],
    })
    if cfg["figures"]:
        plotting.plot_head_grid(scores.scores, out / "relation_scores.png", "relation score")
    print(f"{scores.n_examples} annotations; heads above the {args.percentile}th percentile: "
          + (", ".join(f"({c.layer},{c.head})" for c in heads) or "none"))


def cmd_compare(args, cfg, out: Path):
    a, b = read_checkpoint(args.ckpt_a), read_checkpoint(args.ckpt_b)
    sim = analysis.head_cosine_similarity(a, b, read_dataset(args.data), args.limit, cfg["seed"])
    sim.to_csv(out / "cosine.csv")
    means = sim.layer_means()
    summary = {
        "n_examples": sim.n_examples,
        "layer_means": [float(m) for m in means],
        "last_layer_changes_most": bool(means[-1] <= means[0]),
    }
    _write_json(out / "cosine.json", summary)
    if cfg["figures"]:
        plotting.plot_head_grid(sim.scores, out / "cosine.png", "cosine similarity", cmap="Greys_r")
    print("per-layer mean similarity: " + " ".join(f"{m:.4f}" for m in means))
    if not summary["last_layer_changes_most"]:
        print("note: last layer is more similar than the first; ordering diverges from the expected trend")


def _feature(args, grammar) -> analysis.FeatureSpec:
    if args.feature_file:
        return analysis.FeatureSpec.of_tokens(read_feature_list(args.feature_file, grammar))
    f = args.feature.strip()
    if f.lower() in ("cls", "[cls]"):
        return analysis.FeatureSpec("cls")
    if f.lower() in ("sep", "[sep]"):
        return analysis.FeatureSpec("sep")
    name = f.split(":", 1)[1] if f.lower().startswith("role:") else f
    try:
        return analysis.FeatureSpec.of_role(TokenRole(name.upper()))
    except ValueError:
        raise DataError(f"unknown feature {args.feature!r}") from None


def cmd_feature_attn(args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    feature = _feature(args, _grammar(cfg))
    scores = analysis.feature_attention_map(ck, read_dataset(args.data), feature)
    stem = "feature_" + feature.name.strip("[]").lower()
    scores.to_csv(out / f"{stem}.csv")
    if cfg["figures"]:
        plotting.plot_head_grid(scores.scores, out / f"{stem}.png", f"attention to {feature.name}")
    best, value = scores.ranked()[0]
    print(f"{scores.n_examples} examples contain {feature.name}; top head ({best.layer},{best.head}) = {value:.4f}")


def cmd_cls_profile(args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    prof = analysis.cls_attention_profile(ck, read_dataset(args.data))
    prof.to_csv(out / "cls_profile.csv")
    if cfg["figures"]:
        plotting.plot_cls_profile(prof, out / "cls_profile.png")
    for h, row in enumerate(prof.shares):
        print(f"head {h}: " + " ".join(f"{c}={s:.3f}" for c, s in zip(prof.categories, row)))


def _ablate(kind, args, cfg, out: Path):
    ck = read_checkpoint(args.ckpt)
    data = read_dataset(args.data)
    if args.limit:
        data = data[:args.limit]
    sweep = ablation.sweep_heads if kind == "heads" else ablation.sweep_layers
    report = sweep(ck, data, args.metric, dataset_id=Path(args.data).name)
    report.write(out / f"ablate_{kind}.csv", out / f"ablate_{kind}.json")
    if cfg["figures"]:
        plotting.plot_ablation(report, out / f"ablate_{kind}.png")
    s = report.summary()
    print(f"baseline {s['baseline']:.4f}; best delta {s['best_delta']:+.4f} at {tuple(s['best_at'])}; "
          f"worst delta {s['worst_delta']:+.4f} at {tuple(s['worst_at'])}")


def cmd_ablate_heads(args, cfg, out):
    _ablate("heads", args, cfg, out)


def cmd_ablate_layers(args, cfg, out):
    _ablate("layers", args, cfg, out)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections: model, hyper, grammar, thresholds)")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or {DEFAULT_OUT})")
    common.add_argument("--seed", type=int)
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")

    model = _Parser(add_help=False)
    for flag, typ in (("--layers", int), ("--heads", int), ("--d-model", int), ("--d-ff", int),
                      ("--max-len", int), ("--vocab-size", int)):
        model.add_argument(flag, type=typ)

    train = _Parser(add_help=False)
    train.add_argument("--epochs", type=int, help="default 3")
    train.add_argument("--batch", type=int, help="default 32")
    train.add_argument("--lr", type=float)
    train.add_argument("--mask-rate", type=float)

    grammar = _Parser(add_help=False)
    grammar.add_argument("--negation-prob", type=float)
    grammar.add_argument("--corruption-rate", type=float)
    grammar.add_argument("--corrupt-fraction", type=float)

    ckpt_data = _Parser(add_help=False)
    ckpt_data.add_argument("--ckpt", required=True)
    ckpt_data.add_argument("--data", required=True)

    ablate = _Parser(add_help=False)
    ablate.add_argument("--ablate", help="comma-separated layer:head list")
    ablate.add_argument("--ablate-layer", type=int, action="append")
    ablate.add_argument("--ablate-all", action="store_true")

    metric = _Parser(add_help=False)
    metric.add_argument("--metric", choices=("accuracy", "f1"), default="accuracy")

    p = _Parser(prog="attnatlas", description="Self-attention analysis workbench for a small BERT-style encoder.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common, grammar, model], help="write a synthetic dataset")
    s.add_argument("--task", choices=("single", "pair", "relations"), required=True)
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--name")
    s.add_argument("--filter", action="store_true", help="apply the annotation filters (relations only)")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common, model, train, grammar], help="masked-token pretraining")
    s.add_argument("--n-examples", type=int, default=8000)
    s.add_argument("--name", default="pretrained.ckpt")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common, model, train, metric], help="fine-tune on a task dataset")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--init", help="checkpoint to start from")
    g.add_argument("--random-init", action="store_true", help="start from N(0, 0.02) weights")
    s.add_argument("--train", required=True)
    s.add_argument("--eval")
    s.add_argument("--name", default="finetuned.ckpt")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", parents=[common, ckpt_data, ablate, metric], help="score with optional ablation")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("dump-attn", parents=[common, ckpt_data, ablate], help="write attention tensors")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--range", help="start:stop")
    s.add_argument("--name", default="attention.bin")
    s.add_argument("--pgm", action="store_true", help="also render every map as a PGM heatmap")
    s.add_argument("--normalize", choices=("global-max", "per-row"), default="global-max")
    s.set_defaults(func=cmd_dump_attn)

    s = sub.add_parser("patterns", parents=[common, ckpt_data], help="pattern-class distribution")
    s.add_argument("--limit", type=int, default=1000)
    s.set_defaults(func=cmd_patterns)

    s = sub.add_parser("probe-relations", parents=[common, ckpt_data], help="relation-specific head detection")
    s.add_argument("--percentile", type=float, default=99.0)
    s.add_argument("--no-filter", action="store_true", help="skip the length/distance filters")
    s.set_defaults(func=cmd_probe_relations)

    s = sub.add_parser("compare", parents=[common], help="per-head cosine similarity of two checkpoints")
    s.add_argument("--ckpt-a", required=True)
    s.add_argument("--ckpt-b", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--limit", type=int, default=1000)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("feature-attn", parents=[common, ckpt_data, grammar], help="attention to a token feature")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--feature", help="cls, sep, or a role name (e.g. NEGATION or role:NOUN)")
    g.add_argument("--feature-file", help="token list, one per line")
    s.set_defaults(func=cmd_feature_attn)

    s = sub.add_parser("cls-profile", parents=[common, ckpt_data], help="final-layer [CLS] attention by category")
    s.set_defaults(func=cmd_cls_profile)

    for name, fn in (("ablate-heads", cmd_ablate_heads), ("ablate-layers", cmd_ablate_layers)):
        s = sub.add_parser(name, parents=[common, ckpt_data, metric], help=f"{name.split('-')[1][:-1]} disabling sweep")
        s.add_argument("--limit", type=int, help="evaluate on the first N examples only")
        s.set_defaults(func=fn)
    return p


def run(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve_config(args)
        print(json.dumps({k: cfg[k] for k in sorted(cfg)}, sort_keys=True))
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"{args.command}.config.json", cfg)
        log.info("%s started %s", args.command, datetime.now(timezone.utc).isoformat(timespec="seconds"))
        args.func(args, cfg, out)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
