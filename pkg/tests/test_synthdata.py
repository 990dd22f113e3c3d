"""Tests for the synthetic paired world."""
import numpy as np
import pytest

from tempvl.config import GeneratorConfig
from tempvl.services.synthdata import (
    SeedLedger,
    concept_anchors,
    dump_pairs,
    generate_batch,
    generate_pair,
    load_pairs,
    stack_frames,
)


def test_pair_is_deterministic(generator_config):
    a = generate_pair(3, generator_config, seed=17)
    b = generate_pair(3, generator_config, seed=17)
    assert np.array_equal(a.raw_frames.data, b.raw_frames.data)
    assert a.text == b.text


def test_different_seeds_differ(generator_config):
    a = generate_pair(3, generator_config, seed=17)
    b = generate_pair(3, generator_config, seed=18)
    assert not np.array_equal(a.raw_frames.data, b.raw_frames.data)


def test_frames_stay_near_the_anchor(generator_config):
    pair = generate_pair(5, generator_config, seed=0)
    anchor = concept_anchors(generator_config)[5]
    deviation = np.abs(pair.raw_frames.data - anchor)
    assert pair.raw_frames.shape == (generator_config.frames_per_video, generator_config.raw_frame_dim)
    assert np.all(deviation <= 6 * generator_config.noise_sigma + 1e-12)


def test_caption_layout(generator_config):
    pair = generate_pair(2, generator_config, seed=4)
    ids = pair.text.ids
    cfg = generator_config
    assert ids[0] == cfg.cls_token_id and ids[-1] == cfg.sep_token_id
    words = ids[1:-1]
    assert len(words) == cfg.tokens_per_sentence
    concept_words = [w for w in words if w in cfg.concept_vocab[2]]
    assert len(concept_words) == cfg.concept_tokens_per_sentence
    assert all(w in cfg.concept_vocab[2] or w in cfg.distractor_vocab for w in words)


def test_anchors_are_unit_vectors(generator_config):
    anchors = concept_anchors(generator_config)
    assert anchors.shape == (generator_config.n_concepts, generator_config.raw_frame_dim)
    assert np.allclose(np.linalg.norm(anchors, axis=1), 1.0)
    with pytest.raises(ValueError):
        anchors[0, 0] = 2.0


def test_batch_uses_disjoint_concepts(generator_config):
    batch = generate_batch(generator_config, generator_config.n_concepts, seed=2)
    assert sorted(p.concept_id for p in batch) == list(range(generator_config.n_concepts))
    assert [p.video_id for p in batch] == [f"v{i}" for i in range(len(batch))]
    assert [p.text.text_id for p in batch] == [f"t{i}" for i in range(len(batch))]
    assert stack_frames(batch).shape == (len(batch), generator_config.frames_per_video, generator_config.raw_frame_dim)


def test_batch_larger_than_concepts(generator_config):
    with pytest.raises(ValueError):
        generate_batch(generator_config, generator_config.n_concepts + 1, seed=0)
    assert len(generate_batch(generator_config, generator_config.n_concepts + 1, seed=0, disjoint_concepts=False)) == 9


def test_unknown_concept(generator_config):
    with pytest.raises(ValueError):
        generate_pair(generator_config.n_concepts, generator_config, seed=0)


def test_single_frame_videos():
    config = GeneratorConfig(frames_per_video=1)
    pair = generate_pair(0, config, seed=1)
    assert pair.raw_frames.shape == (1, config.raw_frame_dim)


def test_config_rejects_vocab_without_distractors():
    with pytest.raises(ValueError):
        GeneratorConfig(n_concepts=4, tokens_per_concept=2, vocab_size=12)


class TestSeedLedger:
    def test_disjoint_splits_pass_audit(self):
        ledger = SeedLedger()
        ledger.record("train", 1)
        ledger.record("train", 2)
        ledger.record("heldout", 3)
        ledger.audit()
        assert ledger.seeds("train") == {1, 2}

    def test_overlap_is_reported(self):
        ledger = SeedLedger()
        ledger.record("train", 5)
        ledger.record("heldout", 5)
        with pytest.raises(ValueError, match="share seeds"):
            ledger.audit()

    def test_round_trip(self):
        ledger = SeedLedger()
        for seed in (9, 4, 7):
            ledger.record("train", seed)
        again = SeedLedger.from_dict(ledger.to_dict())
        assert again.to_dict() == {"train": [4, 7, 9]}


def test_dump_and_load_are_exact(generator_config, tmp_path):
    pairs = generate_batch(generator_config, 4, seed=11)
    path = dump_pairs(pairs, tmp_path / "pairs.jsonl")
    loaded = load_pairs(path)
    assert len(loaded) == 4
    for a, b in zip(pairs, loaded):
        assert a.concept_id == b.concept_id
        assert a.text == b.text
        assert np.array_equal(a.raw_frames.data, b.raw_frames.data)


def test_load_rejects_corrupt_file(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"concept_id": 1}\n', encoding="utf-8")
    with pytest.raises(KeyError):
        load_pairs(path)


def test_frames_are_separable_by_nearest_anchor(generator_config):
    anchors = concept_anchors(generator_config)
    hits = total = 0
    for seed in range(10):
        for concept in range(generator_config.n_concepts):
            frames = generate_pair(concept, generator_config, seed=1000 * seed + concept).raw_frames.data
            predicted = np.argmax(frames @ anchors.T, axis=1)
            hits += int(np.sum(predicted == concept))
            total += len(frames)
    assert hits / total >= 0.95
