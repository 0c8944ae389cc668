import json

import pytest
import torch

from photobook_listener import features as ft
from photobook_listener import synthetic
from photobook_listener import textalign as ta
from photobook_listener import trainer
from photobook_listener.listener import ConditionedListener, ListenerConfig


def make_fixture_log() -> str:
    """One hand-written game: 2 rounds, fully valid, with known mark timing."""
    imgs_a = [{"id": f"img{i}", "uri": f"hash://dog{i:02d}"} for i in range(6)]
    imgs_b = [{"id": f"img{i}", "uri": f"hash://dog{i:02d}"} for i in (0, 1, 2, 6, 7, 8)]
    # overlap = img0, img1, img2
    def round_rec(ri):
        return {
            "round_index": ri,
            "players": {
                "ann": {"images": imgs_a, "targets": ["img0", "img3", "img4"]},
                "bob": {"images": imgs_b, "targets": ["img1", "img6", "img7"]},
            },
            "events": [
                {"type": "utterance", "actor": "ann", "payload": {"text": "do you have the dog00"}},
                {"type": "utterance", "actor": "bob", "payload": {"text": "yes i have dog00"}},
                {"type": "mark", "actor": "ann", "payload": {"image_id": "img0", "mark": "common"}},
                {"type": "utterance", "actor": "ann", "payload": {"text": "what about dog03"}},
                {"type": "utterance", "actor": "bob", "payload": {"text": "nope no dog03 here"}},
                # mark between utterance 4 and 5 -> position 4
                {"type": "mark", "actor": "ann", "payload": {"image_id": "img3", "mark": "different"}},
                {"type": "utterance", "actor": "ann", "payload": {"text": "and the dog04"}},
                {"type": "utterance", "actor": "bob", "payload": {"text": "nope missing dog04"}},
                {"type": "mark", "actor": "ann", "payload": {"image_id": "img4", "mark": "different"}},
                {"type": "utterance", "actor": "bob", "payload": {"text": "i see a dog01 here"}},
                {"type": "utterance", "actor": "ann", "payload": {"text": "yes got dog01 too"}},
                {"type": "mark", "actor": "bob", "payload": {"image_id": "img1", "mark": "common"}},
                {"type": "utterance", "actor": "bob", "payload": {"text": "mine shows the dog06"}},
                {"type": "utterance", "actor": "ann", "payload": {"text": "nope no dog06 here"}},
                {"type": "mark", "actor": "bob", "payload": {"image_id": "img6", "mark": "different"}},
                {"type": "utterance", "actor": "bob", "payload": {"text": "last one dog07"}},
                {"type": "utterance", "actor": "ann", "payload": {"text": "nope missing dog07"}},
                {"type": "mark", "actor": "bob", "payload": {"image_id": "img7", "mark": "different"}},
                {"type": "utterance", "actor": "ann", "payload": {"text": "all done here"}},
            ],
        }

    record = {"game_id": "fix0", "theme": ["dog", "car"],
              "rounds": [round_rec(1), round_rec(2)]}
    return json.dumps(record) + "\n"


@pytest.fixture(scope="session")
def fixture_log() -> str:
    return make_fixture_log()


@pytest.fixture(scope="session")
def tokenizer():
    return ta.HashWordTokenizer(vocab_size=512)


@pytest.fixture(scope="session")
def scorer():
    return ft.HashEmbeddingScorer(dim=256)


@pytest.fixture(scope="session")
def image_provider():
    return ft.HashImageFeatures(dim=64)


@pytest.fixture(scope="session")
def small_corpus():
    cfg = synthetic.SyntheticCorpusConfig(num_themes=4, games_per_theme=1,
                                          rounds_per_game=3)
    rounds, instances, audit = synthetic.generate_corpus(cfg, seed=11)
    return rounds, instances, audit


@pytest.fixture(scope="session")
def encoded_items(small_corpus, tokenizer, scorer, image_provider):
    _, instances, _ = small_corpus
    return trainer.prepare_instances(instances[:12], tokenizer, scorer,
                                     image_provider)


@pytest.fixture()
def tiny_model():
    torch.manual_seed(123)
    return ConditionedListener(ListenerConfig.tiny())
