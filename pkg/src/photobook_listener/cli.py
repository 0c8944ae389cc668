"""Command-line entry points.

Subcommand groups mirror the package layout::

    pbl gamedata parse --log corpus.jsonl
    pbl gamedata split --log corpus.jsonl --policy theme-disjoint --seed 0
    pbl textalign trace --log corpus.jsonl --instance g000:r1:p2
    pbl features precompute --log corpus.jsonl --cache .cache/feats
    pbl synth --out corpus.jsonl --themes 6 --games 2
    pbl train --out runs/exp1 [--config train.json] [--seed 0]
    pbl eval --checkpoint runs/exp1/model.ckpt --log corpus.jsonl --split test
    pbl ablate --out runs/ablation
    pbl serve --checkpoint runs/exp1/model.ckpt --port 8000

Desk-scale handles (hash tokenizer/scorer/features) are the defaults so every
command runs without downloads; full runs swap handles via the config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys


def _load_instances(log_path):
    from .gamedata import load_game_log, spawn_instances

    rounds = load_game_log(log_path)
    instances, audit = spawn_instances(rounds)
    return rounds, instances, audit


def _desk_handles(config=None):
    from . import features as feats
    from . import textalign as ta

    config = config or {}
    tokenizer = ta.HashWordTokenizer(
        vocab_size=config.get("vocab_size", 1024))
    scorer = feats.HashEmbeddingScorer(dim=config.get("scorer_dim", 512))
    provider = feats.HashImageFeatures(
        dim=config.get("image_feature_dim", 64))
    return tokenizer, scorer, provider


def cmd_gamedata_parse(args):
    rounds, instances, audit = _load_instances(args.log)
    print(json.dumps({
        "rounds": len(rounds),
        "instances": len(instances),
        "audit": dataclasses.asdict(audit),
    }, indent=2))


def cmd_gamedata_split(args):
    from .gamedata import split_dataset

    _, instances, _ = _load_instances(args.log)
    ratios = tuple(float(x) for x in args.ratios.split(","))
    result = split_dataset(instances, args.policy, ratios, args.seed)
    os.makedirs(args.out, exist_ok=True)
    for split in result:
        path = os.path.join(args.out, f"{split.name}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"name": split.name, "policy": split.partition_policy,
                       "instance_ids": list(split.instance_ids)}, fh, indent=2)
        print(f"{split.name}: {len(split.instance_ids)} instances -> {path}")


def cmd_textalign_trace(args):
    from . import textalign as ta

    tokenizer, _, _ = _desk_handles()
    _, instances, _ = _load_instances(args.log)
    inst = next((i for i in instances if i.instance_id == args.instance), None)
    if inst is None:
        sys.exit(f"unknown instance {args.instance!r}; known ids look like "
                 f"{instances[0].instance_id!r}" if instances else
                 "corpus has no instances")
    dialogue = ta.tokenize_and_align(inst, tokenizer)
    sequences = ta.build_label_sequences(inst, dialogue)
    print("\n".join(ta.trace_lines(inst, dialogue, sequences)))


def cmd_features_precompute(args):
    from . import features as feats

    _, instances, _ = _load_instances(args.log)
    cache = feats.FeatureCache(args.cache)
    _, scorer, _ = _desk_handles({"scorer_dim": args.scorer_dim})
    encoder = feats.HashPatchEncoder()
    rows = 0
    for inst in instances:
        feats.relevance_for_dialogue(inst, scorer, cache)
        rows += len(inst.utterances)
        for image in inst.view.context_images:
            feats.extract_patch_features(image, encoder, cache)
    print(f"cached {rows} relevance rows and patch grids for "
          f"{len(instances)} instances in {args.cache} "
          f"({len(cache)} entries)")


def cmd_synth(args):
    from . import synthetic

    cfg = synthetic.SyntheticCorpusConfig(
        num_themes=args.themes, games_per_theme=args.games,
        rounds_per_game=args.rounds,
        mistake_round_prob=args.mistake_prob,
        premark_round_prob=args.premark_prob)
    records = synthetic.generate_log_records(cfg, seed=args.seed)
    synthetic.write_log(records, args.out)
    print(f"wrote {len(records)} games to {args.out}")


def _read_config(path):
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def cmd_train(args):
    import torch

    from . import trainer
    from .gamedata import split_dataset
    from .listener import ConditionedListener, ListenerConfig, save_checkpoint

    config = _read_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    tokenizer, scorer, provider = _desk_handles(config)

    if args.log or config.get("corpus"):
        _, instances, _ = _load_instances(args.log or config["corpus"])
        splits = split_dataset(instances,
                               config.get("policy", "theme-disjoint"),
                               seed=config.get("split_seed", 0))
        by_id = {i.instance_id: i for i in instances}
        sets = {name: trainer.prepare_instances(
            [by_id[i] for i in splits.by_name(name).instance_ids],
            tokenizer, scorer, provider) for name in ("train", "valid", "test")}
        train_items, valid_items = sets["train"], sets["valid"]
    else:
        from . import experiments
        exp_cfg = experiments.SeparableExperimentConfig()
        train_items, valid_items = experiments.build_separable_datasets(exp_cfg)
        sets = {"train": train_items, "valid": valid_items, "test": valid_items}

    model_overrides = dict(config.get("model", {}))
    if "injection_layers" in model_overrides:
        model_overrides["injection_layers"] = tuple(
            model_overrides["injection_layers"])
    model_overrides.setdefault("vocab_size", tokenizer.vocab_size)
    model_overrides.setdefault("image_feature_dim", provider.dim)
    model_overrides.setdefault("num_heads", 4)
    model_overrides.setdefault("ffn_size", 128)
    model_cfg = ListenerConfig.tiny(**model_overrides) \
        if config.get("scale", "tiny") == "tiny" \
        else ListenerConfig(**model_overrides)
    torch.manual_seed(args.seed)
    model = ConditionedListener(model_cfg)
    schedule = trainer.TrainConfig(seed=args.seed,
                                   **config.get("schedule", {
                                       "peak_lr": 2e-2, "warmup_steps": 100,
                                       "batch_size": 8, "max_epochs": 30,
                                       "grad_clip": 1.0}))
    result = trainer.train(model, train_items, valid_items, schedule,
                           log_every=args.log_every)
    report = trainer.evaluate(model, sets["test"])

    ckpt_path = os.path.join(args.out, "model.ckpt")
    save_checkpoint(ckpt_path, model, kind="listener", extra={
        "tokenizer": tokenizer.spec(), "scorer": scorer.spec(),
        "image_features": provider.spec()})
    with open(os.path.join(args.out, "history.json"), "w") as fh:
        json.dump({"config": config, "seed": args.seed,
                   "history": [dataclasses.asdict(r) for r in result.history],
                   "best_valid_accuracy": result.best_valid_accuracy,
                   "test_accuracy": report.accuracy}, fh, indent=2)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump({"model": dataclasses.asdict(model_cfg),
                   "schedule": dataclasses.asdict(schedule)}, fh, indent=2,
                  default=list)
    print(f"best valid accuracy {result.best_valid_accuracy:.3f} "
          f"(epoch {result.best_epoch}); test accuracy {report.accuracy:.3f}")
    print(f"checkpoint -> {ckpt_path}")


def cmd_eval(args):
    from . import trainer
    from .gamedata import split_dataset
    from .listener import load_checkpoint
    from .features import scorer_from_spec, image_features_from_spec
    from .textalign import tokenizer_from_spec

    model, kind, extra = load_checkpoint(args.checkpoint)
    if kind != "listener":
        sys.exit(f"eval expects a listener checkpoint, got {kind}")
    tokenizer = tokenizer_from_spec(extra["tokenizer"])
    scorer = scorer_from_spec(extra["scorer"])
    provider = image_features_from_spec(extra["image_features"])
    _, instances, _ = _load_instances(args.log)
    splits = split_dataset(instances, args.policy, seed=args.seed)
    wanted = set(splits.by_name(args.split).instance_ids)
    items = trainer.prepare_instances(
        [i for i in instances if i.instance_id in wanted],
        tokenizer, scorer, provider)
    report = trainer.evaluate(model, items)
    print(json.dumps({
        "split": args.split, "instances": report.num_instances,
        "accuracy": report.accuracy,
        "all_correct_rounds": report.all_correct_count}, indent=2))


def cmd_ablate(args):
    import torch

    from . import experiments, trainer
    from .listener import ConditionedListener

    cfg = experiments.SeparableExperimentConfig()
    datasets = experiments.build_separable_datasets(cfg)
    specs = experiments.desk_ablation_grid(cfg)
    if args.grid:
        wanted = set(json.load(open(args.grid))["names"])
        specs = [s for s in specs if s.name in wanted]

    def make_model(spec, seed):
        torch.manual_seed(seed)
        return ConditionedListener(spec.model_config)

    rows = trainer.run_ablation_suite(
        specs, make_model, (datasets[0], datasets[1], datasets[1]),
        seeds=tuple(args.seeds))
    table = trainer.format_results_table(rows)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "results.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(table)
    print(f"-> {path}")


def cmd_serve(args):
    from .service import serve

    serve(args.checkpoint, host=args.host, port=args.port,
          journal_dir=args.journal, image_dir=args.images)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pbl",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    gamedata = sub.add_parser("gamedata", help="corpus parsing and splits")
    gsub = gamedata.add_subparsers(dest="subcommand", required=True)
    p = gsub.add_parser("parse", help="parse a game log and report the audit")
    p.add_argument("--log", required=True)
    p.set_defaults(func=cmd_gamedata_parse)
    p = gsub.add_parser("split", help="write train/valid/test id files")
    p.add_argument("--log", required=True)
    p.add_argument("--policy", default="theme-disjoint",
                   choices=["theme-disjoint", "repartition-I",
                            "repartition-P"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--out", default="splits")
    p.set_defaults(func=cmd_gamedata_split)

    textalign = sub.add_parser("textalign", help="token/label debugging")
    tsub = textalign.add_subparsers(dest="subcommand", required=True)
    p = tsub.add_parser("trace", help="print token/label columns")
    p.add_argument("--log", required=True)
    p.add_argument("--instance", required=True)
    p.set_defaults(func=cmd_textalign_trace)

    features = sub.add_parser("features", help="feature cache management")
    fsub = features.add_subparsers(dest="subcommand", required=True)
    p = fsub.add_parser("precompute", help="fill the feature cache")
    p.add_argument("--log", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--scorer-dim", type=int, default=512)
    p.set_defaults(func=cmd_features_precompute)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--themes", type=int, default=6)
    p.add_argument("--games", type=int, default=2)
    p.add_argument("--rounds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mistake-prob", type=float, default=0.0)
    p.add_argument("--premark-prob", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the listener")
    p.add_argument("--config", help="JSON config (corpus, model, schedule)")
    p.add_argument("--log", help="game log to train on (desk handles)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--log-every", type=int, default=5)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--split", default="test",
                   choices=["train", "valid", "test"])
    p.add_argument("--policy", default="theme-disjoint")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the desk-scale ablation grid")
    p.add_argument("--grid", help="JSON file with {'names': [...]} filter")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="ablation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("serve", help="run the live session service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--journal")
    p.add_argument("--images")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.func(args)


if __name__ == "__main__":
    main()
