#!/usr/bin/env python3
"""Train a quick demo checkpoint (if missing) and serve it for the web UI.

The demo model is the tiny listener trained on the separable corpus; the
frontend in frontend/ can then be pointed at http://127.0.0.1:8000. A sample
session request is printed so the API is also usable from curl.
"""

import argparse
import json
import os

import torch

from photobook_listener import experiments
from photobook_listener import features as ft
from photobook_listener import textalign as ta
from photobook_listener import trainer
from photobook_listener.listener import ConditionedListener, save_checkpoint
from photobook_listener.service import ListenerBundle, SessionRegistry, \
    create_app


def build_demo_checkpoint(path: str) -> None:
    cfg = experiments.SeparableExperimentConfig()
    train_items, valid_items = experiments.build_separable_datasets(cfg)
    torch.manual_seed(0)
    model = ConditionedListener(experiments.model_config(cfg))
    result = trainer.train(model, train_items, valid_items,
                           experiments.schedule_for(cfg, True, seed=0),
                           log_every=5)
    print(f"demo model: valid accuracy {result.best_valid_accuracy:.3f}")
    save_checkpoint(path, model, kind="listener", extra={
        "tokenizer": ta.HashWordTokenizer(vocab_size=cfg.vocab_size).spec(),
        "scorer": ft.HashEmbeddingScorer(dim=cfg.scorer_dim).spec(),
        "image_features": ft.HashImageFeatures(
            dim=cfg.image_feature_dim).spec()})


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--checkpoint", default="runs/demo/model.ckpt")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--journal", default="runs/demo/journal")
    args = parser.parse_args()

    os.makedirs(os.path.dirname(args.checkpoint), exist_ok=True)
    if not os.path.exists(args.checkpoint):
        build_demo_checkpoint(args.checkpoint)

    sample = {
        "images": [{"id": f"img{i}", "uri": f"hash://dog{i:02d}"}
                   for i in range(6)],
        "target_indices": [0, 2, 4],
        "checkpoint_id": "default",
        "theme": ["dog", "car"],
    }
    print("POST /sessions example body:")
    print(json.dumps(sample, indent=2))

    import uvicorn

    bundle = ListenerBundle.load(args.checkpoint)
    registry = SessionRegistry({"default": bundle}, journal_dir=args.journal)
    uvicorn.run(create_app(registry), host=args.host, port=args.port)


if __name__ == "__main__":
    main()
