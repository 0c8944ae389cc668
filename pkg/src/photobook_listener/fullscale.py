"""Full-scale reproduction harness: corpus + pretrained handles.

Wires the real corpus through the same pipeline the desk-scale suite uses,
but with the pretrained backbone, scorer and patch encoder, at the full-run
training defaults (decoupled weight decay 1e-3, 500-step warmup to 2e-5 with
linear decay, batch 16, up to 100 epochs, early stop patience 10, 3 fixed
seeds). Expect several GPU-hours per configuration.
"""

from __future__ import annotations

import statistics
from dataclasses import dataclass

import torch

from . import analysis
from . import features as feats
from . import textalign as ta
from . import trainer
from .gamedata import load_game_log, spawn_instances, split_dataset
from .listener import ConditionedListener, ListenerConfig
from .refchain import ThresholdPolicy, evaluate_chains, \
    extract_chains_for_rounds, read_gold_file


@dataclass
class CellStats:
    test_mean: float
    test_std: float
    valid_mean: float
    valid_std: float


def full_scale_config(**overrides) -> ListenerConfig:
    base = dict(hidden_size=768, num_layers=12, num_heads=12,
                vocab_size=50265, max_len=512, image_feature_dim=512)
    base.update(overrides)
    return ListenerConfig(**base)


def load_datasets(corpus: str, seed: int = 0, cache_dir: str | None = None):
    from .pretrained import ClipRelevanceScorer, SegmentationPatchEncoder

    rounds = load_game_log(corpus)
    instances, audit = spawn_instances(rounds)
    splits = split_dataset(instances, "theme-disjoint", seed=seed)
    by_id = {i.instance_id: i for i in instances}
    cache = feats.FeatureCache(cache_dir) if cache_dir else None
    scorer = ClipRelevanceScorer()
    provider = feats.PooledPatchFeatures(SegmentationPatchEncoder(), cache)
    tokenizer = ta.HashWordTokenizer(vocab_size=50265)
    out = {}
    for name in ("train", "valid", "test"):
        ids = splits.by_name(name).instance_ids
        out[name] = trainer.prepare_instances(
            [by_id[i] for i in ids], tokenizer, scorer, provider, cache)
    return out, audit


def _train_cell(make_model, data, schedule, seeds):
    valid_accs, test_accs = [], []
    for seed in seeds:
        torch.manual_seed(seed)
        model = make_model()
        trainer.train(model, data["train"], data["valid"],
                      trainer.TrainConfig(seed=seed, **schedule))
        valid_accs.append(trainer.evaluate(model, data["valid"]).accuracy)
        test_accs.append(trainer.evaluate(model, data["test"]).accuracy)
    def agg(xs):
        return (statistics.fmean(xs),
                statistics.stdev(xs) if len(xs) > 1 else 0.0)
    tm, ts = agg(test_accs)
    vm, vs = agg(valid_accs)
    return CellStats(test_mean=tm, test_std=ts, valid_mean=vm, valid_std=vs)


def run_table_reproduction(corpus: str, seeds=(0, 1, 2),
                           cache_dir: str | None = None) -> dict:
    """Full model, ablations and injection-layer subsets at full scale."""
    from .pretrained import DisentangledBackboneAdapter

    data, _ = load_datasets(corpus, cache_dir=cache_dir)
    schedule = dict(peak_lr=2e-5, warmup_steps=500, weight_decay=1e-3,
                    batch_size=16, max_epochs=100, patience=10)

    def listener(**overrides):
        def make():
            cfg = full_scale_config(**overrides)
            return ConditionedListener(
                cfg, backbone=DisentangledBackboneAdapter())
        return make

    table = {
        "full": _train_cell(listener(), data, schedule, seeds),
        "no-relevance": _train_cell(listener(use_relevance=False), data,
                                    schedule, seeds),
        "no-dense": _train_cell(listener(), data,
                                {**schedule, "dense_labels": False}, seeds),
        "cross-attention": _train_cell(listener(use_cross_attention=True),
                                       data, schedule, seeds),
        "inject-all": None,  # alias of full, filled below
        "inject-mid": _train_cell(
            listener(injection_layers=tuple(range(4, 10))), data, schedule,
            seeds),
        "inject-emb": _train_cell(listener(injection_layers=("emb",)), data,
                                  schedule, seeds),
    }
    table["inject-all"] = table["full"]
    table["baseline"] = _train_baseline_cell(corpus, data, schedule, seeds)
    return table


def _train_baseline_cell(corpus, data, schedule, seeds):
    from .baseline import (BaselineConfig, BaselineListener,
                           HashTokenEmbedder, evaluate_baseline,
                           prepare_baseline_items, train_baseline)
    from .pretrained import ClipRelevanceScorer

    rounds = load_game_log(corpus)
    instances, _ = spawn_instances(rounds)
    by_id = {i.instance_id: i for i in instances}
    embedder = HashTokenEmbedder(dim=768)
    provider = feats.PooledPatchFeatures()
    scorer = ClipRelevanceScorer()
    policy = ThresholdPolicy("top1")

    def items_for(split_items):
        out = []
        for item in split_items:
            inst = by_id[item.instance_id]
            links = extract_chains_for_rounds([inst.round], scorer, policy,
                                              player_id=inst.self_id)
            chain_map = {}
            ids = [im.image_id for im in inst.view.context_images]
            for link in links:
                chain_map.setdefault(ids.index(link.image_id), []).append(
                    link.utterance_index)
            out.extend(prepare_baseline_items(inst, embedder, provider,
                                              chain_map))
        return out

    split_items = {name: items_for(data[name]) for name in data}
    valid_accs, test_accs = [], []
    for seed in seeds:
        torch.manual_seed(seed)
        model = BaselineListener(BaselineConfig(text_dim=768,
                                                image_feature_dim=512,
                                                hidden=768))
        train_baseline(model, split_items["train"], split_items["valid"],
                       trainer.TrainConfig(seed=seed, **schedule))
        valid_accs.append(evaluate_baseline(model, split_items["valid"]))
        test_accs.append(evaluate_baseline(model, split_items["test"]))
    return CellStats(
        test_mean=statistics.fmean(test_accs),
        test_std=statistics.stdev(test_accs) if len(test_accs) > 1 else 0.0,
        valid_mean=statistics.fmean(valid_accs),
        valid_std=statistics.stdev(valid_accs) if len(valid_accs) > 1 else 0.0)


def run_repartition_experiment(corpus: str, seed: int = 0,
                               cache_dir: str | None = None) -> dict:
    """Diagnostic repartitions: validation with unseen image combinations but
    seen player pairs (I), and unseen pairs but seen combinations (P); the
    test split stays the theme-disjoint one. Trains 50 epochs without early
    stopping, one seed, mirroring the overfitting probe."""
    from .pretrained import (ClipRelevanceScorer, DisentangledBackboneAdapter,
                             SegmentationPatchEncoder)

    rounds = load_game_log(corpus)
    instances, _ = spawn_instances(rounds)
    by_id = {i.instance_id: i for i in instances}
    cache = feats.FeatureCache(cache_dir) if cache_dir else None
    scorer = ClipRelevanceScorer()
    provider = feats.PooledPatchFeatures(SegmentationPatchEncoder(), cache)
    tokenizer = ta.HashWordTokenizer(vocab_size=50265)
    schedule = dict(peak_lr=2e-5, warmup_steps=500, weight_decay=1e-3,
                    batch_size=16, max_epochs=50, patience=51)

    results = {}
    for policy in ("repartition-I", "repartition-P"):
        splits = split_dataset(instances, policy, seed=seed)
        data = {name: trainer.prepare_instances(
            [by_id[i] for i in splits.by_name(name).instance_ids],
            tokenizer, scorer, provider, cache)
            for name in ("train", "valid", "test")}
        torch.manual_seed(seed)
        model = ConditionedListener(full_scale_config(),
                                    backbone=DisentangledBackboneAdapter())
        trainer.train(model, data["train"], data["valid"],
                      trainer.TrainConfig(seed=seed, **schedule))
        results[policy] = {
            "valid": trainer.evaluate(model, data["valid"]).accuracy,
            "test": trainer.evaluate(model, data["test"]).accuracy,
        }
    return results


def evaluate_gold_chains(corpus: str, gold: str):
    """Relevance-scorer chain extraction scored against the annotated subset."""
    from .pretrained import ClipRelevanceScorer

    gold_links = read_gold_file(gold)
    gold_games = {l.game_id for l in gold_links}
    rounds = [r for r in load_game_log(corpus) if r.game_id in gold_games]
    extracted = extract_chains_for_rounds(rounds, ClipRelevanceScorer(),
                                          ThresholdPolicy("top1"))
    return evaluate_chains(extracted, gold_links)


def gap_analysis(corpus: str, checkpoint: str,
                 cache_dir: str | None = None) -> analysis.GapStatsReport:
    """Top-2 relevance gap contrast between all-correct and mistake rounds."""
    from .listener import load_checkpoint

    data, _ = load_datasets(corpus, cache_dir=cache_dir)
    model, _, _ = load_checkpoint(checkpoint)
    report = trainer.evaluate(model, data["test"])
    by_id = {item.instance_id: item for item in data["test"]}
    predictions = [
        analysis.RoundPrediction(
            instance_id=ev.instance_id, theme=ev.theme, correct=ev.correct,
            relevance=by_id[ev.instance_id].relevance)
        for ev in report.items]
    return analysis.top2_gap_stats(predictions)
