"""Synthetic game corpora for desk-scale tests and experiments.

Rounds follow the real game shape (6 images per player, 3 targets, 2..4
shared images, 5 image-set combinations per theme) but the dialogue is
generated: each player asks about each of their targets ("do you have
dog03"), the partner answers with a deterministic keyword ("yes ..." when the
image is shared, "nope ..." otherwise, always naming the image descriptor),
and the asker marks right after the reply. Image descriptors double as the
content key the hash scorer and hash patch encoder embed, so relevance rows
peak at the mentioned image. The mark keyword makes the corpus separable:
a listener that reads the keyword and resolves which image it concerns can
reach perfect end-of-dialogue accuracy.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass

from .gamedata import (GameRound, PerspectiveInstance, SpawnAudit,
                       parse_game_log, spawn_instances)

THEME_WORDS = [
    ("dog", "car"), ("cup", "table"), ("bench", "person"), ("kite", "beach"),
    ("bus", "sign"), ("cat", "couch"), ("boat", "dock"), ("bird", "tree"),
    ("horse", "fence"), ("pizza", "plate"), ("train", "hill"), ("lamp", "desk"),
]

DESCRIBE_TEMPLATES = [
    "do you have the {d}", "i see a {d} here", "mine shows the {d}",
    "next one looks like {d}",
]
REPLY_COMMON = ["yes i have {d}", "yes got {d} too"]
REPLY_DIFFERENT = ["nope no {d} here", "nope missing {d}"]
CHATTER = ["hello there", "ok cool", "this set is tricky", "lets keep going"]
CLOSERS = ["all done here", "same here done"]


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    num_themes: int = 6
    games_per_theme: int = 2
    rounds_per_game: int = 5
    num_players: int = 8
    images_per_theme: int = 12
    combos_per_theme: int = 5
    chatter_prob: float = 0.25
    delayed_mark_prob: float = 0.15  # chatter between reply and mark
    closer_prob: float = 0.9
    mistake_round_prob: float = 0.0
    premark_round_prob: float = 0.0


def _theme(i: int) -> tuple[str, str]:
    if i < len(THEME_WORDS):
        return THEME_WORDS[i]
    return (f"thing{i}", f"object{i}")


def _theme_images(theme: tuple[str, str], count: int) -> list[dict]:
    # descriptor doubles as the content key embedded by the hash handles
    return [{"id": f"{theme[0]}-{theme[1]}-{i:02d}",
             "uri": f"hash://{theme[0]}{i:02d}"}
            for i in range(count)]


def _theme_combos(images: list[dict], count: int,
                  rng: random.Random) -> list[tuple[list[dict], list[dict]]]:
    combos = []
    seen = set()
    while len(combos) < count:
        overlap = rng.choice((2, 3, 4))
        shared = rng.sample(images, overlap)
        rest = [im for im in images if im not in shared]
        rng.shuffle(rest)
        need = 6 - overlap
        a = shared + rest[:need]
        b = shared + rest[need:need + need]
        if len(b) < 6:
            continue
        key = frozenset((frozenset(x["id"] for x in a),
                         frozenset(x["id"] for x in b)))
        if key in seen:
            continue
        seen.add(key)
        combos.append((sorted(a, key=lambda x: x["id"]),
                       sorted(b, key=lambda x: x["id"])))
    return combos


def _round_record(round_index: int, pa: str, pb: str,
                  combo: tuple[list[dict], list[dict]],
                  cfg: SyntheticCorpusConfig, rng: random.Random) -> dict:
    imgs_a, imgs_b = combo
    ids_a = {im["id"] for im in imgs_a}
    ids_b = {im["id"] for im in imgs_b}
    targets_a = rng.sample(imgs_a, 3)
    targets_b = rng.sample(imgs_b, 3)

    def desc_of(img: dict) -> str:
        return img["uri"].rsplit("/", 1)[-1]

    mistake_round = rng.random() < cfg.mistake_round_prob
    mistake_slot = rng.randrange(6) if mistake_round else -1

    exchanges = [(pa, pb, img, img["id"] in ids_b) for img in targets_a] + \
                [(pb, pa, img, img["id"] in ids_a) for img in targets_b]
    rng.shuffle(exchanges)

    events: list[dict] = []
    if rng.random() < cfg.premark_round_prob:
        # early duplicate of a mark the exchange will repeat verbatim; the
        # schema forbids retraction, so the values must agree
        slot = next(i for i, (asker, _, img, _) in enumerate(exchanges)
                    if asker == pa and img is targets_a[0])
        is_common = exchanges[slot][3] if slot != mistake_slot \
            else not exchanges[slot][3]
        events.append({"type": "mark", "actor": pa, "payload": {
            "image_id": targets_a[0]["id"],
            "mark": "common" if is_common else "different"}})
    for slot, (asker, replier, img, is_common) in enumerate(exchanges):
        if rng.random() < cfg.chatter_prob:
            events.append({"type": "utterance",
                           "actor": rng.choice((pa, pb)),
                           "payload": {"text": rng.choice(CHATTER)}})
        d = desc_of(img)
        events.append({"type": "utterance", "actor": asker, "payload": {
            "text": rng.choice(DESCRIBE_TEMPLATES).format(d=d)}})
        reply_pool = REPLY_COMMON if is_common else REPLY_DIFFERENT
        events.append({"type": "utterance", "actor": replier, "payload": {
            "text": rng.choice(reply_pool).format(d=d)}})
        if rng.random() < cfg.delayed_mark_prob:
            events.append({"type": "utterance",
                           "actor": rng.choice((pa, pb)),
                           "payload": {"text": rng.choice(CHATTER)}})
        mark = is_common if slot != mistake_slot else not is_common
        events.append({"type": "mark", "actor": asker, "payload": {
            "image_id": img["id"],
            "mark": "common" if mark else "different"}})
    if rng.random() < cfg.closer_prob:
        events.append({"type": "utterance", "actor": rng.choice((pa, pb)),
                       "payload": {"text": rng.choice(CLOSERS)}})

    return {"round_index": round_index,
            "players": {
                pa: {"images": imgs_a, "targets": [t["id"] for t in targets_a]},
                pb: {"images": imgs_b, "targets": [t["id"] for t in targets_b]}},
            "events": events}


def generate_log_records(cfg: SyntheticCorpusConfig, seed: int = 0) -> list[dict]:
    rng = random.Random(seed)
    players = [f"p{i}" for i in range(cfg.num_players)]
    records = []
    game_no = 0
    for ti in range(cfg.num_themes):
        theme = _theme(ti)
        images = _theme_images(theme, cfg.images_per_theme)
        combos = _theme_combos(images, cfg.combos_per_theme, rng)
        for _ in range(cfg.games_per_theme):
            pa, pb = rng.sample(players, 2)
            combo_order = list(range(len(combos)))
            rng.shuffle(combo_order)
            rounds = []
            for ri in range(1, cfg.rounds_per_game + 1):
                combo = combos[combo_order[(ri - 1) % len(combos)]]
                rounds.append(_round_record(ri, pa, pb, combo, cfg, rng))
            records.append({"game_id": f"g{game_no:03d}", "theme": list(theme),
                            "rounds": rounds})
            game_no += 1
    return records


def records_to_log(records: list[dict]) -> str:
    return "\n".join(json.dumps(r) for r in records) + "\n"


def write_log(records: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(records_to_log(records))


def generate_corpus(cfg: SyntheticCorpusConfig, seed: int = 0,
                    ) -> tuple[list[GameRound], list[PerspectiveInstance], SpawnAudit]:
    """Generate, then run through the real parser and instance filter."""
    records = generate_log_records(cfg, seed)
    rounds = parse_game_log(records_to_log(records))
    instances, audit = spawn_instances(rounds)
    return rounds, instances, audit


def separable_config(**overrides) -> SyntheticCorpusConfig:
    """Small clean corpus for the learnability experiment."""
    defaults = dict(num_themes=8, games_per_theme=2, rounds_per_game=5,
                    num_players=8, chatter_prob=0.1, delayed_mark_prob=0.0,
                    closer_prob=1.0)
    defaults.update(overrides)
    return SyntheticCorpusConfig(**defaults)
