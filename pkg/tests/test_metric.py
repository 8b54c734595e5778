import math

import numpy as np
import pytest
import torch

from conftest import random_cloud, tiny_model
from crosscoherence.distractors import Triplet
from crosscoherence.metric import (
    CrossCoherenceScorer,
    FeatureBank,
    FitConfig,
    batch_loss,
    fit,
    score_group,
    score_pair,
    train_step,
)

TEXTS = ["a red chair", "a blue table with four legs", "a green chair without armrests"]


@pytest.fixture
def clouds(rng):
    return {f"s{i}": random_cloud(rng, 64, f"s{i}") for i in range(6)}


def _randomize_head(model):
    with torch.no_grad():
        final = model.head[-1]
        final.weight.normal_(0, 0.5)
        final.bias.normal_(0, 0.5)


def test_zero_head_gives_zero_logit(clouds):
    model = tiny_model(TEXTS)
    for c in list(clouds.values())[:3]:
        for t in TEXTS:
            assert score_pair(model, c, t) == 0.0


def test_score_pair_deterministic(clouds):
    model = tiny_model(TEXTS)
    _randomize_head(model)
    c = clouds["s0"]
    assert score_pair(model, c, TEXTS[1]) == score_pair(model, c, TEXTS[1])


def test_score_group_duplicates_uniform(clouds):
    model = tiny_model(TEXTS)
    _randomize_head(model)
    for g in (2, 3, 4):
        res = score_group(model, TEXTS[0], [clouds["s1"]] * g)
        np.testing.assert_allclose(res.probabilities, 1 / g, atol=1e-6)


def test_score_group_probabilities_sum(clouds):
    model = tiny_model(TEXTS)
    _randomize_head(model)
    res = score_group(model, TEXTS[2], [clouds[s] for s in ("s0", "s1", "s2")])
    assert abs(res.probabilities.sum() - 1) < 1e-6
    with pytest.raises(ValueError):
        score_group(model, TEXTS[2], [clouds["s0"]])


def test_t1_shape_rows_identical(clouds):
    """With one text token every shape query attends to the same value."""
    model = tiny_model(["chair"])
    feats = model.local_features([clouds["s0"]])
    emb, mask = model.encode_texts(["chair"])
    s = model.shape_proj(feats)
    t = model.text_proj(emb)
    block = model.blocks[0]
    block.shape_to_text.norm = None
    out, w = block.shape_to_text(s, t, mask)
    assert torch.all(w == 1)
    torch.testing.assert_close(out[0], out[0, :1].expand_as(out[0]))


def test_shape_row_swap_leaves_pooled_result(clouds):
    model = tiny_model(TEXTS)
    _randomize_head(model)
    feats = model.local_features([clouds["s0"]])
    perm = torch.randperm(feats.shape[1])
    emb, mask = model.encode_texts([TEXTS[0]])
    with torch.no_grad():
        a = model.logits_from_features(feats, emb, mask)
        b = model.logits_from_features(feats[:, perm], emb, mask)
    torch.testing.assert_close(a, b, atol=1e-6, rtol=0)


def _triplets(ids, g, n=8, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        pick = list(rng.choice(ids, size=g, replace=False))
        out.append(Triplet(pick, TEXTS[i % 3], int(rng.integers(g))))
    return out


@pytest.mark.parametrize("g", [2, 3, 4])
def test_initial_loss_is_log_g(clouds, g):
    model = tiny_model(TEXTS)
    bank = FeatureBank(model, clouds)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    loss = train_step(model, _triplets(sorted(clouds), g), opt, bank)
    assert abs(loss - math.log(g)) < 1e-6


def test_step_loss_equals_forward_only(clouds):
    model = tiny_model(TEXTS)
    _randomize_head(model)
    bank = FeatureBank(model, clouds)
    batch = _triplets(sorted(clouds), 3)
    with torch.no_grad():
        expected = batch_loss(model, bank, batch).item()
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad], lr=1e-3)
    assert train_step(model, batch, opt, bank) == pytest.approx(expected, abs=1e-7)


def test_frozen_encoder_untouched_by_training(clouds):
    model = tiny_model(TEXTS)
    before = {k: v.clone() for k, v in model.encoder.state_dict().items()}
    fit(model, _triplets(sorted(clouds), 2, 16), _triplets(sorted(clouds), 2, 4, seed=1), clouds,
        FitConfig(epochs=2, batch_size=4, lr=1e-2, patience=None))
    assert all(torch.equal(before[k], v) for k, v in model.encoder.state_dict().items())


def _fit_history(clouds, epochs=3):
    torch.manual_seed(0)
    model = tiny_model(TEXTS)
    res = fit(model, _triplets(sorted(clouds), 2, 16), _triplets(sorted(clouds), 2, 6, seed=1), clouds,
              FitConfig(epochs=epochs, batch_size=4, lr=1e-2, patience=None, seed=3))
    return res


def test_fit_deterministic_and_full_length(clouds):
    a, b = _fit_history(clouds), _fit_history(clouds)
    assert a.history == b.history
    assert len(a.history) == 3


def test_fit_rejects_empty_splits(clouds):
    model = tiny_model(TEXTS)
    with pytest.raises(ValueError):
        fit(model, [], _triplets(sorted(clouds), 2, 2), clouds)
    with pytest.raises(ValueError):
        fit(model, _triplets(sorted(clouds), 2, 2), [], clouds)


def test_unfrozen_feature_bank_matches_cached(clouds):
    model = tiny_model(TEXTS, freeze_encoder=False)
    bank = FeatureBank(model, clouds)
    with torch.no_grad():
        live = bank.features(["s0", "s3"])
        model.freeze_encoder(True)
        cached = FeatureBank(model, clouds).features(["s0", "s3"])
    torch.testing.assert_close(live, cached)


def test_scorer_adapter_matches_score_pair(clouds):
    model = tiny_model(TEXTS)
    _randomize_head(model)
    scorer = CrossCoherenceScorer(model)
    c = clouds["s2"]
    scores = scorer.score_texts(c, TEXTS)
    for t, s in zip(TEXTS, scores):
        assert s == pytest.approx(score_pair(model, c, t), abs=1e-6)


def test_shape_positions_add_center_coordinates(clouds):
    model = tiny_model(TEXTS, shape_positions=True)
    tokens = model.local_features([clouds["s0"]])
    assert tokens.shape[-1] == model.encoder.cfg.d_shape + 3
    assert model.shape_proj.in_features == model.encoder.cfg.d_shape + 3


@pytest.mark.parametrize("positions", [False, True])
def test_translation_only_matters_with_positions(clouds, rng, positions):
    model = tiny_model(TEXTS, shape_positions=positions)
    _randomize_head(model)
    c = clouds["s1"]
    shifted = type(c)(c.points + np.array([0.3, -0.2, 0.1]), c.colors, c.shape_id)
    moved = abs(score_pair(model, c, TEXTS[0]) - score_pair(model, shifted, TEXTS[0]))
    assert score_pair(model, c, TEXTS[0]) == pytest.approx(
        score_pair(model, c.permuted(rng.permutation(c.n)), TEXTS[0]), abs=1e-5)
    if positions:
        assert moved > 1e-4
    else:
        assert moved < 1e-5
