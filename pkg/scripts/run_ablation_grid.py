#!/usr/bin/env python3
"""Desk-scale ablation grid on the separable corpus.

Mirrors the full ablation table's axes that make sense without pretrained
models: full model, no relevance injection, no dense labels, embedding-only
injection. Three seeds per cell; writes a tab-delimited results table.
"""

import argparse
import os

import torch

from photobook_listener import experiments, trainer
from photobook_listener.listener import ConditionedListener


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="ablation")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()

    cfg = experiments.SeparableExperimentConfig()
    train_items, valid_items = experiments.build_separable_datasets(cfg)
    specs = experiments.desk_ablation_grid(cfg)

    def make_model(spec, seed):
        torch.manual_seed(seed)
        return ConditionedListener(spec.model_config)

    rows = trainer.run_ablation_suite(
        specs, make_model, (train_items, valid_items, valid_items),
        seeds=tuple(args.seeds))
    table = trainer.format_results_table(rows)
    print(table)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "results.tsv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(table + "\n")
    print(f"-> {path}")


if __name__ == "__main__":
    main()
