import copy
import dataclasses

import numpy as np
import pytest
import torch

from photobook_listener import features as ft
from photobook_listener import textalign as ta
from photobook_listener import trainer
from photobook_listener.listener import (
    EMB, ConditionedListener, ListenerBatch, ListenerConfig, ListenerSession,
    ModelContractError, SessionError, causal_mask, condition_matrix,
    load_checkpoint, save_checkpoint, single_batch)


def make_toy_batch(t=12, seed=0, n_cond_scale=1.0, vocab=512, img_dim=64,
                   batch=1):
    rng = np.random.default_rng(seed)
    token_ids = torch.tensor(rng.integers(3, vocab, size=(batch, t)),
                             dtype=torch.long)
    cond = torch.tensor(n_cond_scale * rng.standard_normal((batch, t, 6)),
                        dtype=torch.float32)
    image_feats = torch.tensor(rng.standard_normal((batch, 6, img_dim)),
                               dtype=torch.float32)
    targets = torch.tensor([sorted(rng.choice(6, size=3, replace=False))
                            for _ in range(batch)], dtype=torch.long)
    labels = torch.tensor(rng.integers(0, 3, size=(batch, 3, t)),
                          dtype=torch.long)
    return ListenerBatch(
        token_ids=token_ids, cond=cond,
        pad_mask=torch.ones(batch, t, dtype=torch.bool),
        image_feats=image_feats, target_indices=targets, labels=labels,
        lengths=torch.full((batch,), t, dtype=torch.long))


def test_causal_mask_shape_and_structure():
    mask = causal_mask(4)
    assert mask.shape == (4, 4)
    assert not mask[2, 2] and not mask[2, 0]
    assert mask[0, 1] and mask[2, 3]


def test_zero_relevance_equals_no_injection_bitwise(tiny_model):
    batch = make_toy_batch(seed=1)
    tiny_model.eval()
    with torch.no_grad():
        with_zeros = tiny_model.encode(batch.token_ids,
                                       torch.zeros_like(batch.cond),
                                       batch.pad_mask)
        without = tiny_model.encode(batch.token_ids, None, batch.pad_mask)
    assert torch.equal(with_zeros, without)


def test_no_relevance_variant_ignores_relevance_exactly():
    torch.manual_seed(0)
    model = ConditionedListener(ListenerConfig.tiny(use_relevance=False))
    model.eval()
    batch = make_toy_batch(seed=2)
    other = dataclasses.replace(batch, cond=batch.cond + 5.0)
    with torch.no_grad():
        a = model(batch)
        b = model(other)
    assert torch.equal(a.beliefs, b.beliefs)


def test_injection_site_subsets_change_states(tiny_model):
    batch = make_toy_batch(seed=3)
    cfg_all = tiny_model.config
    cfg_emb = dataclasses.replace(cfg_all, injection_layers=(EMB,))
    model_emb = ConditionedListener(cfg_emb, backbone=tiny_model.backbone)
    model_emb.relevance_proj = tiny_model.relevance_proj
    tiny_model.eval(), model_emb.eval()
    with torch.no_grad():
        h_all = tiny_model.encode(batch.token_ids, batch.cond, batch.pad_mask)
        h_emb = model_emb.encode(batch.token_ids, batch.cond, batch.pad_mask)
    assert not torch.allclose(h_all, h_emb)


def test_condition_shape_mismatch_is_contract_error(tiny_model):
    batch = make_toy_batch(seed=4)
    with pytest.raises(ModelContractError):
        tiny_model.encode(batch.token_ids, batch.cond[:, :-1], batch.pad_mask)


def test_beliefs_are_simplexes(tiny_model, encoded_items):
    batch = trainer.collate(encoded_items[:4])
    tiny_model.eval()
    with torch.no_grad():
        out = tiny_model(batch)
    sums = out.beliefs.sum(-1)
    assert torch.all((out.beliefs >= 0))
    assert torch.all((sums - 1).abs() < 1e-5)


def test_zero_head_gives_uniform_beliefs(tiny_model):
    batch = make_toy_batch(seed=5)
    with torch.no_grad():
        tiny_model.head_out.weight.zero_()
        tiny_model.head_out.bias.zero_()
    tiny_model.eval()
    with torch.no_grad():
        out = tiny_model(batch)
    assert torch.allclose(out.beliefs,
                          torch.full_like(out.beliefs, 1 / 3), atol=1e-7)


def test_swapping_targets_changes_outputs(tiny_model):
    batch = make_toy_batch(seed=6)
    swapped = dataclasses.replace(
        batch, target_indices=batch.target_indices.flip(dims=(1,)))
    tiny_model.eval()
    with torch.no_grad():
        a = tiny_model(batch).beliefs
        b = tiny_model(swapped).beliefs
    # same targets in reverse order: outputs must follow the reordering,
    # and differ position-wise because position embeddings are distinct
    assert torch.allclose(a, b.flip(dims=(1,)), atol=1e-6)
    assert not torch.allclose(a, b, atol=1e-4)


def test_belief_head_matches_matrix_oracle(tiny_model):
    """Independent numpy re-implementation of the prediction head."""
    batch = make_toy_batch(seed=7)
    tiny_model.eval()
    with torch.no_grad():
        hidden = tiny_model.encode(batch.token_ids, batch.cond, batch.pad_mask)
        out = tiny_model.belief_logits(hidden, batch.image_feats,
                                       batch.target_indices)
        beliefs = torch.softmax(out, dim=-1).numpy()

    h = hidden[0].numpy()
    feats = batch.image_feats[0].numpy()
    pos = tiny_model.target_pos_emb.weight.detach().numpy()
    w1 = tiny_model.head_in.weight.detach().numpy()
    b1 = tiny_model.head_in.bias.detach().numpy()
    w2 = tiny_model.head_out.weight.detach().numpy()
    b2 = tiny_model.head_out.bias.detach().numpy()

    def gelu(x):
        from scipy.special import erf
        return 0.5 * x * (1 + erf(x / np.sqrt(2)))

    for ti, j in enumerate(batch.target_indices[0].tolist()):
        v = feats[j] + pos[j]
        for t in range(h.shape[0]):
            x = np.concatenate([v, h[t]])
            logits = w2 @ gelu(w1 @ x + b1) + b2
            probs = np.exp(logits - logits.max())
            probs /= probs.sum()
            assert np.allclose(probs, beliefs[0, ti, t], atol=1e-5)


def test_missing_image_features_contract(tiny_model):
    batch = make_toy_batch(seed=8)
    with pytest.raises(ModelContractError):
        tiny_model.belief_logits(torch.zeros(1, 12, 16),
                                 batch.image_feats[:, :5], batch.target_indices)


# ---------------------------------------------------------------------------
# Causality
# ---------------------------------------------------------------------------


def _forward_beliefs(model, items_range):
    batch = items_range
    model.eval()
    with torch.no_grad():
        return model(batch).beliefs


def test_future_perturbations_leave_past_beliefs(tiny_model, encoded_items):
    item = max(encoded_items, key=lambda it: it.dialogue.num_utterances)
    rng = np.random.default_rng(0)
    base = single_batch(item.dialogue, item.relevance, item.image_feats,
                        item.target_indices)
    base_beliefs = _forward_beliefs(tiny_model, base)
    cut_utt = item.dialogue.num_utterances // 2
    cut_token = item.dialogue.spans[cut_utt - 1][1]

    for trial in range(20):
        tokens = list(item.dialogue.token_ids)
        relevance = item.relevance.copy()
        mode = trial % 3
        if mode == 0:  # rewrite future tokens
            for t in range(cut_token, len(tokens)):
                tokens[t] = int(rng.integers(3, 512))
        elif mode == 1:  # rewrite future relevance rows
            relevance[cut_utt:] = rng.standard_normal(
                relevance[cut_utt:].shape)
        else:  # truncate the future entirely (shorter sequence)
            tokens = tokens[:cut_token]
            relevance = relevance[:cut_utt]
        spans = [s for s in item.dialogue.spans if s[1] <= len(tokens)]
        dialogue = dataclasses.replace(
            item.dialogue,
            token_ids=tuple(tokens),
            token_texts=tuple(str(x) for x in tokens),
            spans=tuple(spans) if mode == 2 else item.dialogue.spans,
        )
        perturbed = single_batch(dialogue, relevance[:len(dialogue.spans)],
                                 item.image_feats, item.target_indices)
        beliefs = _forward_beliefs(tiny_model, perturbed)
        diff = (beliefs[:, :, :cut_token] -
                base_beliefs[:, :, :cut_token]).abs().max()
        assert diff < 1e-5, f"causality violated at trial {trial}: {diff}"


# ---------------------------------------------------------------------------
# Cross-attention variant
# ---------------------------------------------------------------------------


def make_cross_model(seed=0):
    torch.manual_seed(seed)
    cfg = ListenerConfig.tiny(use_cross_attention=True,
                              image_feature_dim=512)
    return ConditionedListener(cfg)


def make_patch_batch(base_seed=9):
    rng = np.random.default_rng(base_seed)
    batch = make_toy_batch(seed=base_seed, img_dim=512)
    patches = torch.tensor(
        rng.standard_normal((1, 6, 16, 16, 512)) * 0.1, dtype=torch.float32)
    return dataclasses.replace(batch, patches=patches)


def test_cross_attention_needs_patches():
    model = make_cross_model()
    batch = make_toy_batch(seed=9, img_dim=512)
    with pytest.raises(ModelContractError):
        model.encode(batch.token_ids, batch.cond, batch.pad_mask, None)


def test_downsampled_sequence_length_is_384():
    model = make_cross_model()
    batch = make_patch_batch()
    seq, pooled = model.patch_pipeline(batch.patches)
    assert seq.shape[1] == 8 * 8 * 6 == 384
    assert pooled.shape == (1, 6, 512)


def test_zero_value_projection_disables_cross_attention():
    model = make_cross_model()
    batch = make_patch_batch()
    d = model.config.hidden_size
    with torch.no_grad():
        model.cross_block.attn.in_proj_weight[2 * d:].zero_()
    model.eval()
    with torch.no_grad():
        with_cross = model.encode(batch.token_ids, batch.cond, batch.pad_mask,
                                  batch.patches)
        object.__setattr__(model, "config",
                           dataclasses.replace(model.config,
                                               use_cross_attention=False))
        without = model.encode(batch.token_ids, batch.cond, batch.pad_mask)
    assert torch.equal(with_cross, without)


def test_cross_attention_parameter_delta_near_8m_at_full_scale():
    torch.manual_seed(0)
    base_cfg = ListenerConfig(hidden_size=768, num_layers=1, num_heads=12,
                              vocab_size=128, max_len=16)
    cross_cfg = dataclasses.replace(base_cfg, use_cross_attention=True)
    base = ConditionedListener(base_cfg)
    cross = ConditionedListener(cross_cfg)
    delta = cross.parameter_count() - base.parameter_count()
    assert 6.4e6 < delta < 9.6e6  # full-scale budget is ~8M


def test_cross_variant_pooled_features_feed_head():
    model = make_cross_model()
    batch = make_patch_batch()
    model.eval()
    with torch.no_grad():
        out = model(batch)
    assert out.beliefs.shape == (1, 3, 12, 3)
    assert torch.all((out.beliefs.sum(-1) - 1).abs() < 1e-5)


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


def test_gradients_match_finite_differences(tiny_model):
    batch = make_toy_batch(t=12, seed=10)
    worst = trainer.gradient_check(
        tiny_model, batch,
        parameter_names=["relevance_proj.weight", "target_pos_emb.weight",
                         "head_in.weight", "head_in.bias",
                         "head_out.weight", "head_out.bias"],
        probes=20, seed=0)
    assert worst < 1e-3


# ---------------------------------------------------------------------------
# Streaming sessions
# ---------------------------------------------------------------------------


def test_streaming_matches_full_reencode(tiny_model, small_corpus, tokenizer,
                                         scorer, image_provider):
    _, instances, _ = small_corpus
    inst = instances[0]
    item = trainer.prepare_instance(inst, tokenizer, scorer, image_provider)
    session = ListenerSession(tiny_model, tokenizer, scorer,
                              inst.view.context_images, inst.target_indices,
                              image_feats=item.image_feats)
    full = single_batch(item.dialogue, item.relevance, item.image_feats,
                        item.target_indices)
    tiny_model.eval()
    with torch.no_grad():
        offline = tiny_model(full).beliefs[0].numpy()
    for utt in inst.utterances:
        result = session.step(utt.text, utt.speaker_id == inst.self_id)
        t_last = session.dialogue().length - 1
        for ti, j in enumerate(inst.target_indices):
            np.testing.assert_allclose(result["latest"][j],
                                       offline[ti, t_last], atol=1e-5)


def test_first_utterance_defines_beliefs(tiny_model, small_corpus, tokenizer,
                                         scorer, image_provider):
    _, instances, _ = small_corpus
    inst = instances[0]
    session = ListenerSession(tiny_model, tokenizer, scorer,
                              inst.view.context_images, inst.target_indices,
                              image_feats=np.zeros((6, 64)))
    result = session.step("hello there", True)
    assert set(result["latest"]) == set(inst.target_indices)
    for probs in result["latest"].values():
        assert abs(sum(probs) - 1) < 1e-5


def test_empty_utterance_rejected(tiny_model, small_corpus, tokenizer, scorer):
    _, instances, _ = small_corpus
    inst = instances[0]
    session = ListenerSession(tiny_model, tokenizer, scorer,
                              inst.view.context_images, inst.target_indices,
                              image_feats=np.zeros((6, 64)))
    with pytest.raises(SessionError):
        session.step("   ", True)


def test_session_validates_inputs(tiny_model, small_corpus, tokenizer, scorer):
    _, instances, _ = small_corpus
    inst = instances[0]
    with pytest.raises(SessionError):
        ListenerSession(tiny_model, tokenizer, scorer,
                        inst.view.context_images[:5], inst.target_indices,
                        image_feats=np.zeros((6, 64)))
    with pytest.raises(SessionError):
        ListenerSession(tiny_model, tokenizer, scorer,
                        inst.view.context_images, (0, 0, 1),
                        image_feats=np.zeros((6, 64)))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_roundtrip_preserves_outputs(tiny_model, tmp_path):
    batch = make_toy_batch(seed=11)
    tiny_model.eval()
    with torch.no_grad():
        before = tiny_model(batch).beliefs
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tiny_model, kind="listener",
                    extra={"note": "roundtrip"})
    loaded, kind, extra = load_checkpoint(path)
    assert kind == "listener" and extra["note"] == "roundtrip"
    with torch.no_grad():
        after = loaded(batch).beliefs
    assert torch.equal(before, after)
    for (ka, va), (kb, vb) in zip(tiny_model.state_dict().items(),
                                  loaded.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_checkpoint_version_guard(tiny_model, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, tiny_model)
    payload = torch.load(path, weights_only=False)
    payload["format_version"] = 99
    torch.save(payload, path)
    with pytest.raises(ModelContractError):
        load_checkpoint(path)


def test_config_validation():
    with pytest.raises(ValueError):
        ListenerConfig(hidden_size=0)
    with pytest.raises(ValueError):
        ListenerConfig.tiny(injection_layers=(99,))
    cfg = ListenerConfig.tiny(injection_layers=(EMB, 1))
    assert cfg.resolved_injection_layers == (EMB, 1)
    assert ListenerConfig.tiny().resolved_injection_layers == (1, 2)
    assert ListenerConfig().hidden_size == 768
    assert ListenerConfig().num_layers == 12
