import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from photobook_listener import synthetic
from photobook_listener.gamedata import (
    GameLogError, Mark, PartitionError, gold_labels_for, parse_game_log,
    possible_combination_count, spawn_instances, split_dataset)


def test_empty_document_parses_to_empty_list():
    assert parse_game_log("") == []
    assert parse_game_log("\n\n") == []


def test_fixture_log_round_count(fixture_log):
    rounds = parse_game_log(fixture_log)
    assert len(rounds) == 2
    assert all(r.game_id == "fix0" for r in rounds)
    assert [r.round_index for r in rounds] == [1, 2]


def test_synthetic_five_round_game_parses_to_five_rounds():
    cfg = synthetic.SyntheticCorpusConfig(num_themes=1, games_per_theme=1,
                                          rounds_per_game=5)
    records = synthetic.generate_log_records(cfg, seed=3)
    rounds = parse_game_log(synthetic.records_to_log(records))
    assert len(rounds) == 5


def test_mark_between_utterances_snaps_to_preceding_index(fixture_log):
    round_ = parse_game_log(fixture_log)[0]
    # the second mark in the fixture sits between utterances 4 and 5
    mark = round_.marks[1]
    assert mark.actor_id == "ann"
    assert mark.position == 4


def test_utterance_and_mark_order_preserved(fixture_log):
    round_ = parse_game_log(fixture_log)[0]
    assert [u.text for u in round_.utterances[:2]] == [
        "do you have the dog00", "yes i have dog00"]
    positions = [m.position for m in round_.marks]
    assert positions == sorted(positions)


def test_mark_on_unknown_image_is_rejected(fixture_log):
    bad = fixture_log.replace('"image_id": "img0"', '"image_id": "nope"', 1)
    with pytest.raises(GameLogError, match="unknown image"):
        parse_game_log(bad)


def test_mark_on_non_target_image_is_rejected(fixture_log):
    # img5 is in ann's context but not among her targets
    bad = fixture_log.replace('"image_id": "img0"', '"image_id": "img5"', 1)
    with pytest.raises(GameLogError, match="non-target"):
        parse_game_log(bad)


def test_mark_retraction_is_a_schema_error(fixture_log):
    # flipping a recorded mark's value later in the round is forbidden
    retraction = ('{"type": "mark", "actor": "ann", '
                  '"payload": {"image_id": "img0", "mark": "common"}}, '
                  '{"type": "mark", "actor": "ann", '
                  '"payload": {"image_id": "img0", "mark": "different"}}')
    bad = fixture_log.replace(
        '{"type": "mark", "actor": "ann", '
        '"payload": {"image_id": "img0", "mark": "common"}}', retraction, 1)
    with pytest.raises(GameLogError, match="re-marks"):
        parse_game_log(bad)
    # a same-value duplicate is an idempotent re-mark, not a retraction
    duplicate = retraction.replace('"mark": "different"', '"mark": "common"')
    ok = fixture_log.replace(
        '{"type": "mark", "actor": "ann", '
        '"payload": {"image_id": "img0", "mark": "common"}}', duplicate, 1)
    rounds = parse_game_log(ok)
    assert len(rounds) == 2


def test_schema_violation_names_offender():
    with pytest.raises(GameLogError, match="line 1"):
        parse_game_log("{not json}")
    rec = {"game_id": "g", "theme": ["a", "b"], "rounds": [{"round_index": 1}]}
    with pytest.raises(GameLogError, match="game g"):
        parse_game_log(json.dumps(rec))


def test_gold_labels_equal_true_overlap(fixture_log):
    round_ = parse_game_log(fixture_log)[0]
    gold = gold_labels_for(round_, "ann")
    # ann targets img0 (shared), img3 and img4 (hers only)
    ids = [img.image_id for img in round_.view_of("ann").context_images]
    assert gold[ids.index("img0")] is Mark.COMMON
    assert gold[ids.index("img3")] is Mark.DIFFERENT
    assert gold[ids.index("img4")] is Mark.DIFFERENT


def test_spawn_two_instances_per_valid_round(fixture_log):
    rounds = parse_game_log(fixture_log)
    instances, audit = spawn_instances(rounds)
    assert len(instances) == 4
    assert audit.total_rounds == 2 and audit.dropped_rounds == 0
    per_round = {}
    for inst in instances:
        per_round.setdefault(inst.round.round_index, []).append(inst.self_id)
    assert all(sorted(v) == ["ann", "bob"] for v in per_round.values())


def test_gold_final_labels_cover_all_targets(fixture_log):
    instances, _ = spawn_instances(parse_game_log(fixture_log))
    for inst in instances:
        assert set(inst.gold_final_labels) == set(inst.target_indices)
        assert len(inst.target_indices) == 3


def test_mistake_round_drops_both_instances():
    cfg = synthetic.SyntheticCorpusConfig(num_themes=1, games_per_theme=1,
                                          rounds_per_game=1,
                                          mistake_round_prob=1.0)
    rounds, instances, audit = synthetic.generate_corpus(cfg, seed=0)
    assert len(rounds) == 1
    assert instances == []
    assert audit.mistake_drops == 1


def test_premark_round_dropped():
    cfg = synthetic.SyntheticCorpusConfig(num_themes=1, games_per_theme=1,
                                          rounds_per_game=1,
                                          premark_round_prob=1.0)
    rounds, instances, audit = synthetic.generate_corpus(cfg, seed=0)
    assert instances == []
    assert audit.premark_drops == 1


def test_spawn_is_idempotent_and_accounted(small_corpus):
    rounds, instances, audit = small_corpus
    again, audit2 = spawn_instances(rounds)
    assert [i.instance_id for i in again] == [i.instance_id for i in instances]
    assert audit2.dropped_instances == 2 * len(rounds) - len(again)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), mistakes=st.floats(0, 0.6))
def test_audit_counts_account_for_all_rounds(seed, mistakes):
    cfg = synthetic.SyntheticCorpusConfig(num_themes=2, games_per_theme=1,
                                          rounds_per_game=3,
                                          mistake_round_prob=mistakes,
                                          premark_round_prob=0.2)
    rounds, instances, audit = synthetic.generate_corpus(cfg, seed=seed)
    assert audit.dropped_instances == 2 * len(rounds) - len(instances)
    assert audit.total_rounds == len(rounds)
    for inst in instances:
        # gold labels must equal the true overlap relation, restated inline
        partner_ids = {img.image_id for img in
                       inst.round.view_of(inst.partner_id).context_images}
        for j, label in inst.gold_final_labels.items():
            image_id = inst.view.context_images[j].image_id
            assert (label is Mark.COMMON) == (image_id in partner_ids)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def split_corpus():
    cfg = synthetic.SyntheticCorpusConfig(num_themes=10, games_per_theme=3,
                                          num_players=10)
    _, instances, _ = synthetic.generate_corpus(cfg, seed=5)
    return instances


def _themes_of(instances, split):
    wanted = set(split.instance_ids)
    return {i.round.theme for i in instances if i.instance_id in wanted}


def test_single_theme_corpus_cannot_be_split():
    cfg = synthetic.SyntheticCorpusConfig(num_themes=1, games_per_theme=2)
    _, instances, _ = synthetic.generate_corpus(cfg, seed=5)
    with pytest.raises(PartitionError):
        split_dataset(instances, "theme-disjoint", seed=0)


def test_theme_disjoint_split_is_disjoint_and_balanced(split_corpus):
    result = split_dataset(split_corpus, "theme-disjoint", seed=0)
    themes = [_themes_of(split_corpus, s) for s in result]
    assert themes[0] & themes[1] == set()
    assert themes[0] & themes[2] == set()
    assert themes[1] & themes[2] == set()
    n = len(split_corpus)
    counts = [len(s.instance_ids) for s in result]
    assert sum(counts) == n
    for count, ratio in zip(counts, (0.7, 0.1, 0.2)):
        assert abs(count / n - ratio) <= 0.02


def test_split_deterministic_given_seed(split_corpus):
    a = split_dataset(split_corpus, "theme-disjoint", seed=7)
    b = split_dataset(split_corpus, "theme-disjoint", seed=7)
    c = split_dataset(split_corpus, "theme-disjoint", seed=8)
    assert a.train.instance_ids == b.train.instance_ids
    assert a.valid.instance_ids == b.valid.instance_ids
    # another seed should rearrange something on a corpus this size
    assert (a.train.instance_ids != c.train.instance_ids
            or a.valid.instance_ids != c.valid.instance_ids)


def _by_id(instances):
    return {i.instance_id: i for i in instances}


def test_repartition_keeps_test_split_unchanged(split_corpus):
    base = split_dataset(split_corpus, "theme-disjoint", seed=0)
    for policy in ("repartition-I", "repartition-P"):
        repart = split_dataset(split_corpus, policy, seed=0)
        assert repart.test.instance_ids == base.test.instance_ids
        pool = set(base.train.instance_ids) | set(base.valid.instance_ids)
        assert set(repart.train.instance_ids) | set(repart.valid.instance_ids) == pool


def test_repartition_i_val_combinations_unseen_pairs_seen(split_corpus):
    result = split_dataset(split_corpus, "repartition-I", seed=0)
    lookup = _by_id(split_corpus)
    train = [lookup[i] for i in result.train.instance_ids]
    valid = [lookup[i] for i in result.valid.instance_ids]
    train_combos = {i.round.combination_key for i in train}
    train_pairs = {i.round.player_pair for i in train}
    assert valid, "validation must be non-empty"
    for inst in valid:
        assert inst.round.combination_key not in train_combos
        assert inst.round.player_pair in train_pairs


def test_repartition_p_val_pairs_unseen_combinations_seen(split_corpus):
    result = split_dataset(split_corpus, "repartition-P", seed=0)
    lookup = _by_id(split_corpus)
    train = [lookup[i] for i in result.train.instance_ids]
    valid = [lookup[i] for i in result.valid.instance_ids]
    train_combos = {i.round.combination_key for i in train}
    train_pairs = {i.round.player_pair for i in train}
    assert valid, "validation must be non-empty"
    for inst in valid:
        assert inst.round.player_pair not in train_pairs
        # every validation image combination also present in train
        assert inst.round.combination_key in train_combos


def test_combination_count_identity():
    # the enumerated binomial sum must equal 4.85M exactly
    expected = (math.comb(12, 6) * math.comb(6, 2) * math.comb(10, 4)
                + math.comb(12, 6) * math.comb(6, 3) * math.comb(9, 3)
                + math.comb(12, 6) * math.comb(6, 4) * math.comb(8, 2))
    assert possible_combination_count() == expected == 4_851_000
