"""Game-log ingestion: rounds, perspective instances, filtering, dataset splits.

A game log is a line-delimited JSON document, one record per game:

    {"game_id": "g0",
     "theme": ["dog", "car"],
     "rounds": [
       {"round_index": 1,
        "players": {
          "alice": {"images": [{"id": "...", "uri": "..."}, ...6], "targets": ["id", "id", "id"]},
          "bob":   {...}},
        "events": [
          {"type": "utterance", "actor": "alice", "payload": {"text": "..."}},
          {"type": "mark", "actor": "alice", "payload": {"image_id": "...", "mark": "common"}},
          ...]}]}

Every round has exactly 6 images and 3 targets per player. Events are ordered;
a mark's ``position`` is resolved to the number of utterances preceding it.
Image indices are 0-based everywhere inside this package (logs reference
images by id, never by index).
"""

from __future__ import annotations

import json
import math
import random
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

IMAGES_PER_PLAYER = 6
TARGETS_PER_PLAYER = 3


class GameLogError(Exception):
    """Schema violation or inconsistent record in a game log."""


class PartitionError(Exception):
    """Requested split is infeasible for the corpus at hand."""


class Mark(str, Enum):
    COMMON = "common"
    DIFFERENT = "different"


@dataclass(frozen=True)
class ImageRef:
    image_id: str
    theme: tuple[str, str]
    uri: str


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    text: str


@dataclass(frozen=True)
class MarkAction:
    actor_id: str
    image_index: int  # 0-based index into the actor's context images
    mark: Mark
    position: int  # number of utterances preceding the action (0 = before any)


@dataclass(frozen=True)
class PlayerView:
    player_id: str
    context_images: tuple[ImageRef, ...]
    target_indices: tuple[int, ...]  # 3 distinct 0-based indices


@dataclass(frozen=True)
class GameRound:
    game_id: str
    round_index: int
    theme: tuple[str, str]
    views: tuple[PlayerView, PlayerView]
    utterances: tuple[Utterance, ...]
    marks: tuple[MarkAction, ...]

    def view_of(self, player_id: str) -> PlayerView:
        for view in self.views:
            if view.player_id == player_id:
                return view
        raise KeyError(player_id)

    def partner_of(self, player_id: str) -> str:
        a, b = self.views
        if player_id == a.player_id:
            return b.player_id
        if player_id == b.player_id:
            return a.player_id
        raise KeyError(player_id)

    @property
    def player_pair(self) -> frozenset[str]:
        return frozenset(v.player_id for v in self.views)

    @property
    def combination_key(self) -> frozenset[frozenset[str]]:
        """Unordered pair of the two players' image-id sets."""
        return frozenset(
            frozenset(img.image_id for img in v.context_images) for v in self.views
        )


@dataclass(frozen=True)
class PerspectiveInstance:
    """One player's view of one round; the unit of training/evaluation."""

    round: GameRound
    self_id: str
    partner_id: str
    gold_final_labels: dict[int, Mark]  # target index -> common/different

    @property
    def instance_id(self) -> str:
        return f"{self.round.game_id}:r{self.round.round_index}:{self.self_id}"

    @property
    def view(self) -> PlayerView:
        return self.round.view_of(self.self_id)

    @property
    def target_indices(self) -> tuple[int, ...]:
        return self.view.target_indices

    @property
    def utterances(self) -> tuple[Utterance, ...]:
        return self.round.utterances

    def own_marks(self) -> list[MarkAction]:
        """This player's marking actions on their own targets, in game order."""
        return [m for m in self.round.marks if m.actor_id == self.self_id]


@dataclass
class SpawnAudit:
    """Filtering report: why rounds were dropped. Counts are in rounds."""

    total_rounds: int = 0
    premark_drops: int = 0  # a mark precedes the first utterance
    mistake_drops: int = 0  # a player's final marks disagree with ground truth
    incomplete_drops: int = 0  # a player left some target unmarked
    instances: int = 0

    @property
    def dropped_rounds(self) -> int:
        return self.premark_drops + self.mistake_drops + self.incomplete_drops

    @property
    def dropped_instances(self) -> int:
        # every dropped round loses both perspectives
        return 2 * self.dropped_rounds


@dataclass(frozen=True)
class DatasetSplit:
    name: str  # train / valid / test
    instance_ids: tuple[str, ...]
    partition_policy: str


@dataclass(frozen=True)
class SplitResult:
    train: DatasetSplit
    valid: DatasetSplit
    test: DatasetSplit

    def __iter__(self):
        return iter((self.train, self.valid, self.test))

    def by_name(self, name: str) -> DatasetSplit:
        return {"train": self.train, "valid": self.valid, "test": self.test}[name]


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _require(record: dict, key: str, where: str):
    if key not in record:
        raise GameLogError(f"{where}: missing field {key!r}")
    return record[key]


def _parse_round(game_id: str, theme: tuple[str, str], rec: dict,
                 image_themes: dict[str, tuple[str, str]]) -> GameRound:
    where = f"game {game_id}"
    round_index = _require(rec, "round_index", where)
    where = f"game {game_id} round {round_index}"
    players = _require(rec, "players", where)
    if len(players) != 2:
        raise GameLogError(f"{where}: expected 2 players, got {len(players)}")

    views = []
    for player_id, pdata in players.items():
        images = _require(pdata, "images", f"{where} player {player_id}")
        if len(images) != IMAGES_PER_PLAYER:
            raise GameLogError(
                f"{where} player {player_id}: expected {IMAGES_PER_PLAYER} images, "
                f"got {len(images)}")
        refs = []
        for img in images:
            image_id = _require(img, "id", f"{where} player {player_id} image")
            known = image_themes.setdefault(image_id, theme)
            if known != theme:
                raise GameLogError(
                    f"{where}: image {image_id} seen with conflicting themes "
                    f"{known} and {theme}")
            refs.append(ImageRef(image_id=image_id, theme=theme,
                                 uri=img.get("uri", "")))
        id_to_index = {r.image_id: i for i, r in enumerate(refs)}
        if len(id_to_index) != IMAGES_PER_PLAYER:
            raise GameLogError(f"{where} player {player_id}: duplicate image ids")
        targets = _require(pdata, "targets", f"{where} player {player_id}")
        if len(set(targets)) != TARGETS_PER_PLAYER:
            raise GameLogError(
                f"{where} player {player_id}: expected {TARGETS_PER_PLAYER} "
                f"distinct targets, got {targets}")
        try:
            target_indices = tuple(sorted(id_to_index[t] for t in targets))
        except KeyError as exc:
            raise GameLogError(
                f"{where} player {player_id}: target {exc} is not a context image")
        views.append(PlayerView(player_id=player_id,
                                context_images=tuple(refs),
                                target_indices=target_indices))

    utterances: list[Utterance] = []
    marks: list[MarkAction] = []
    final_values: dict[tuple[str, int], Mark] = {}
    for ev in _require(rec, "events", where):
        ev_type = _require(ev, "type", f"{where} event")
        actor = _require(ev, "actor", f"{where} event")
        payload = _require(ev, "payload", f"{where} event")
        if actor not in players:
            raise GameLogError(f"{where}: event actor {actor!r} is not a player")
        if ev_type == "utterance":
            text = _require(payload, "text", f"{where} utterance")
            utterances.append(Utterance(speaker_id=actor, text=text))
        elif ev_type == "mark":
            image_id = _require(payload, "image_id", f"{where} mark")
            view = next(v for v in views if v.player_id == actor)
            index = next((i for i, r in enumerate(view.context_images)
                          if r.image_id == image_id), None)
            if index is None:
                raise GameLogError(
                    f"{where}: mark by {actor} references unknown image {image_id!r}")
            if index not in view.target_indices:
                raise GameLogError(
                    f"{where}: mark by {actor} on non-target image {image_id!r}")
            try:
                mark = Mark(_require(payload, "mark", f"{where} mark"))
            except ValueError as exc:
                raise GameLogError(f"{where}: bad mark value ({exc})")
            previous = final_values.get((actor, index))
            if previous is not None and previous is not mark:
                # the schema forbids retraction; normalize upstream instead
                raise GameLogError(
                    f"{where}: {actor} re-marks image {image_id!r} as "
                    f"{mark.value} after {previous.value}")
            final_values[(actor, index)] = mark
            # snap to the last utterance preceding the action
            marks.append(MarkAction(actor_id=actor, image_index=index,
                                    mark=mark, position=len(utterances)))
        else:
            raise GameLogError(f"{where}: unknown event type {ev_type!r}")

    return GameRound(game_id=game_id, round_index=round_index, theme=theme,
                     views=(views[0], views[1]),
                     utterances=tuple(utterances), marks=tuple(marks))


def parse_game_log(document: str) -> list[GameRound]:
    """Parse a line-delimited game log into rounds, preserving event order."""
    rounds: list[GameRound] = []
    image_themes: dict[str, tuple[str, str]] = {}
    for lineno, line in enumerate(document.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise GameLogError(f"line {lineno}: invalid JSON ({exc})")
        game_id = _require(rec, "game_id", f"line {lineno}")
        theme_raw = _require(rec, "theme", f"game {game_id}")
        if len(theme_raw) != 2:
            raise GameLogError(f"game {game_id}: theme must be a category pair")
        theme = (theme_raw[0], theme_raw[1])
        for round_rec in _require(rec, "rounds", f"game {game_id}"):
            rounds.append(_parse_round(game_id, theme, round_rec, image_themes))
    return rounds


def load_game_log(path) -> list[GameRound]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_game_log(fh.read())


# ---------------------------------------------------------------------------
# Perspective instances
# ---------------------------------------------------------------------------


def gold_labels_for(round_: GameRound, player_id: str) -> dict[int, Mark]:
    """True overlap relation for the player's targets, from the round record."""
    view = round_.view_of(player_id)
    partner_view = round_.view_of(round_.partner_of(player_id))
    partner_ids = {img.image_id for img in partner_view.context_images}
    labels = {}
    for idx in view.target_indices:
        image_id = view.context_images[idx].image_id
        labels[idx] = Mark.COMMON if image_id in partner_ids else Mark.DIFFERENT
    return labels


def _round_drop_reason(round_: GameRound) -> str | None:
    if any(m.position == 0 for m in round_.marks):
        return "premark"
    for view in round_.views:
        gold = gold_labels_for(round_, view.player_id)
        own = [m for m in round_.marks if m.actor_id == view.player_id]
        final: dict[int, Mark] = {}
        for m in own:
            final[m.image_index] = m.mark
        if set(final) != set(view.target_indices):
            return "incomplete"
        if any(final[idx] != gold[idx] for idx in view.target_indices):
            return "mistake"
    return None


def spawn_instances(
    rounds: Sequence[GameRound],
) -> tuple[list[PerspectiveInstance], SpawnAudit]:
    """Spawn two perspective instances per valid round.

    Rounds are dropped when a mark precedes the first utterance, a player left
    a target unmarked, or a player's final marks disagree with the true
    overlap. Filtering is silent but fully accounted for in the audit.
    """
    audit = SpawnAudit(total_rounds=len(rounds))
    instances: list[PerspectiveInstance] = []
    for round_ in rounds:
        reason = _round_drop_reason(round_)
        if reason == "premark":
            audit.premark_drops += 1
            continue
        if reason == "incomplete":
            audit.incomplete_drops += 1
            continue
        if reason == "mistake":
            audit.mistake_drops += 1
            continue
        for view in round_.views:
            partner = round_.partner_of(view.player_id)
            instances.append(PerspectiveInstance(
                round=round_,
                self_id=view.player_id,
                partner_id=partner,
                gold_final_labels=gold_labels_for(round_, view.player_id),
            ))
    audit.instances = len(instances)
    return instances, audit


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

POLICIES = ("theme-disjoint", "repartition-I", "repartition-P")


def _greedy_assign(groups: list[tuple[object, list[PerspectiveInstance]]],
                   totals: Sequence[float], rng: random.Random) -> list[list[PerspectiveInstance]]:
    """Assign whole groups to bins, largest first, chasing remaining deficits.

    A rebalancing pass afterwards guarantees every bin holds at least one
    group whenever there are enough groups to go around.
    """
    order = sorted(range(len(groups)), key=lambda i: (-len(groups[i][1]), rng.random()))
    assignment: dict[int, int] = {}
    filled = [0] * len(totals)
    for gi in order:
        members = groups[gi][1]
        deficits = [totals[b] - filled[b] for b in range(len(totals))]
        best = max(range(len(totals)), key=lambda b: deficits[b])
        assignment[gi] = best
        filled[best] += len(members)

    for empty in range(len(totals)):
        while not any(b == empty for b in assignment.values()):
            donors = [gi for gi, b in assignment.items()
                      if sum(1 for x in assignment.values() if x == b) > 1]
            if not donors:
                break
            # smallest group from the most overfilled donor bin
            gi = min(donors, key=lambda g: (-(filled[assignment[g]]
                                              - totals[assignment[g]]),
                                            len(groups[g][1])))
            filled[assignment[gi]] -= len(groups[gi][1])
            assignment[gi] = empty
            filled[empty] += len(groups[gi][1])

    bins: list[list[PerspectiveInstance]] = [[] for _ in totals]
    for gi, b in assignment.items():
        bins[b].extend(groups[gi][1])
    return bins


def _group_by(instances: Iterable[PerspectiveInstance], key) -> list[tuple[object, list]]:
    grouped: dict = defaultdict(list)
    for inst in instances:
        grouped[key(inst)].append(inst)
    return sorted(grouped.items(), key=lambda kv: str(kv[0]))


def _ids(instances: Iterable[PerspectiveInstance]) -> tuple[str, ...]:
    return tuple(sorted(i.instance_id for i in instances))


def split_dataset(
    instances: Sequence[PerspectiveInstance],
    policy: str = "theme-disjoint",
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitResult:
    """Partition instances into train/valid/test.

    theme-disjoint: no theme (hence no image) appears in two splits.
    repartition-I: validation gets unseen image combinations but seen player
    pairs; repartition-P the converse. Both keep the theme-disjoint test split
    unchanged and only re-divide train+valid.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; choose from {POLICIES}")
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be 3 positive numbers summing to 1, got {ratios}")
    if not instances:
        raise PartitionError("no instances to split")

    rng = random.Random(seed)
    theme_groups = _group_by(instances, key=lambda i: i.round.theme)
    if len(theme_groups) < 3:
        blocking = theme_groups[0][0] if theme_groups else None
        raise PartitionError(
            f"theme-disjoint split needs at least 3 themes, corpus has "
            f"{len(theme_groups)} (blocking theme: {blocking})")

    n = len(instances)
    totals = [r * n for r in ratios]
    train, valid, test = _greedy_assign(theme_groups, totals, rng)
    if not (train and valid and test):
        raise PartitionError("greedy theme assignment left an empty split")

    if policy == "theme-disjoint":
        return SplitResult(
            DatasetSplit("train", _ids(train), policy),
            DatasetSplit("valid", _ids(valid), policy),
            DatasetSplit("test", _ids(test), policy),
        )

    # Repartitions re-divide train+valid; the test split is left unchanged.
    pool = train + valid
    valid_target = len(valid)
    if policy == "repartition-I":
        group_key = lambda i: i.round.combination_key
        seen_key = lambda i: i.round.player_pair
        label = "image combination"
    else:  # repartition-P
        group_key = lambda i: i.round.player_pair
        seen_key = lambda i: i.round.combination_key
        label = "player pair"

    groups = _group_by(pool, key=group_key)
    order = list(range(len(groups)))
    rng.shuffle(order)

    # count, per secondary key, how many groups still in train cover it
    coverage: dict = defaultdict(int)
    for _, members in groups:
        for k in {seen_key(m) for m in members}:
            coverage[k] += 1

    val_groups: set[int] = set()
    val_count = 0
    for gi in order:
        if val_count >= valid_target:
            break
        _, members = groups[gi]
        keys = {seen_key(m) for m in members}
        # moving this group must leave every one of its secondary keys seen in train
        if any(coverage[k] <= 1 for k in keys):
            continue
        val_groups.add(gi)
        val_count += len(members)
        for k in keys:
            coverage[k] -= 1

    if val_count < max(1, int(0.5 * valid_target)):
        raise PartitionError(
            f"repartition infeasible: could only move {val_count} of "
            f"{valid_target} instances to validation without losing a {label}")

    new_valid = [m for gi in val_groups for m in groups[gi][1]]
    new_train = [m for gi in range(len(groups)) if gi not in val_groups
                 for m in groups[gi][1]]
    return SplitResult(
        DatasetSplit("train", _ids(new_train), policy),
        DatasetSplit("valid", _ids(new_valid), policy),
        DatasetSplit("test", _ids(test), policy),
    )


def possible_combination_count() -> int:
    """Number of image-set pairs with 2..4 shared images, out of a 12-image pool.

    One player holds 6 of 12 images; the other shares m of them and draws the
    rest from the remainder: sum over m of C(12,6) * C(6,m) * C(12-m, 6-m).
    """
    return sum(
        math.comb(12, 6) * math.comb(6, m) * math.comb(12 - m, 6 - m)
        for m in (2, 3, 4)
    )
