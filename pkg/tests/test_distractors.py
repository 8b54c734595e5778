import numpy as np
import pytest
import torch

from conftest import random_cloud, tiny_encoder_config
from crosscoherence.distractors import (
    DistractorSet,
    MiningConfig,
    TripletSampler,
    build_triplets,
    compute_latents,
    mine_distractors,
    pair_triplets,
    reference_rng,
)
from crosscoherence.encoders.pointnet import PointNetEncoder, encode_global


def brute_force_mining(latents, labels, percentile=75.0, seed=0):
    """Direct O(n^2) restatement of the mining rule."""
    out = {}
    ids = sorted(latents)
    for ref in ids:
        same = [s for s in ids if labels[s] == labels[ref] and s != ref]
        if len(same) + 1 < 4:
            continue
        dist = {s: float(np.linalg.norm(np.asarray(latents[s]) - np.asarray(latents[ref]))) for s in same}
        ranked = sorted(same, key=lambda s: (dist[s], s))
        hard = ranked[:2]
        threshold = np.percentile([dist[s] for s in same], percentile)
        far = [s for s in same if s not in hard and dist[s] > threshold]
        if far:
            easy = far[int(reference_rng(seed, ref).integers(len(far)))]
        else:
            easy = sorted((s for s in same if s not in hard), key=lambda s: (-dist[s], s))[0]
        out[ref] = (tuple(hard), easy)
    return out


def test_line_example():
    latents = {"a": [0.0], "b": [1.0], "c": [2.0], "d": [10.0]}
    sets = {s.reference_id: s for s in mine_distractors(latents, dict.fromkeys(latents, "chair")).sets}
    assert set(sets["a"].hard_ids) == {"b", "c"}
    assert sets["a"].easy_id == "d"


def test_reference_never_its_own_distractor(rng):
    latents = {f"x{i}": rng.normal(size=4) for i in range(30)}
    labels = {k: ("chair" if i % 2 else "table") for i, k in enumerate(latents)}
    for s in mine_distractors(latents, labels).sets:
        assert s.reference_id not in (*s.hard_ids, s.easy_id)
        assert labels[s.easy_id] == labels[s.reference_id] == labels[s.hard_ids[0]]


def test_hard_closer_than_easy(rng):
    latents = {f"x{i:02d}": rng.normal(size=3) for i in range(40)}
    rep = mine_distractors(latents, dict.fromkeys(latents, "c"))
    for s in rep.sets:
        d = lambda o: np.linalg.norm(latents[o] - latents[s.reference_id])  # noqa: E731
        assert max(d(h) for h in s.hard_ids) <= d(s.easy_id)


def test_matches_brute_force(rng):
    latents = {f"s{i:03d}": rng.normal(size=5) for i in range(60)}
    labels = {k: ("chair", "table", "lamp")[i % 3] for i, k in enumerate(latents)}
    expected = brute_force_mining(latents, labels, seed=4)
    got = {s.reference_id: (s.hard_ids, s.easy_id) for s in
           mine_distractors(latents, labels, MiningConfig(seed=4)).sets}
    assert got == expected


def test_duplicate_latents_tie_break_by_id():
    latents = {"a": [0.0], "b": [1.0], "c": [1.0], "d": [1.0], "e": [5.0]}
    s = {x.reference_id: x for x in mine_distractors(latents, dict.fromkeys(latents, "k")).sets}["a"]
    assert s.hard_ids == ("b", "c")


def test_small_class_skipped(caplog):
    latents = {"a": [0.0], "b": [1.0], "c": [2.0]}
    rep = mine_distractors(latents, dict.fromkeys(latents, "tiny"))
    assert rep.sets == []
    assert rep.skipped[0]["class_label"] == "tiny"
    assert "skipping" in caplog.text


def test_latents_match_one_off_calls(rng):
    enc = PointNetEncoder(tiny_encoder_config()).eval()
    c = random_cloud(rng, 64)
    clouds = {"a": c, "b": c, "z": random_cloud(rng, 64)}
    lat = compute_latents(clouds, enc, batch_size=2)
    assert len(lat) == 3
    assert np.array_equal(lat["a"], lat["b"])
    with torch.no_grad():
        for sid, cl in clouds.items():
            np.testing.assert_allclose(lat[sid], encode_global(cl, enc).double().numpy(), rtol=0, atol=1e-6)


def _sets(n=20):
    return [DistractorSet(f"r{i:02d}", (f"h{i}a", f"h{i}b"), f"e{i}", "chair") for i in range(n)]


def _caps(n=20, k=3):
    return {f"r{i:02d}": [f"caption {j} of {i}" for j in range(k)] for i in range(n)}


@pytest.mark.parametrize("g", [2, 3, 4])
def test_build_triplets_arity_and_determinism(g):
    a = build_triplets(_sets(), _caps(), g, seed=7)
    assert a == build_triplets(_sets(), _caps(), g, seed=7)
    assert len(a) == 60
    for t in a:
        assert len(t.shape_ids) == g
        assert len(set(t.shape_ids)) == g
        assert t.difficulty[t.target] == "reference"


def test_target_distribution_uniform():
    n_sets, k = 400, 5
    ts = build_triplets(_sets(n_sets), _caps(n_sets, k), 2, seed=1)
    n = len(ts)
    hits = sum(t.target == 0 for t in ts)
    assert abs(hits - n / 2) <= 3 * np.sqrt(n * 0.25)


def test_missing_captions_skipped():
    caps = _caps(3)
    del caps["r01"]
    ts = build_triplets(_sets(3), caps, 2)
    assert {t.reference_id for t in ts} == {"r00", "r02"}


def test_pair_triplets_cover_each_distractor():
    ts = pair_triplets(_sets(5), _caps(5), seed=0)
    assert len(ts) == 15
    assert [t.distractor_difficulty for t in ts[:3]] == ["hard", "hard", "easy"]


def test_sampler_varies_by_epoch():
    s = TripletSampler(_sets(), _caps(), 2, seed=0)
    assert s.epoch(0) == s.epoch(0)
    assert s.epoch(0) != s.epoch(1)
