"""Tests for the dual encoders, fusion encoder and heads."""
import numpy as np
import pytest

from tempvl.core import tensor as T
from tempvl.core.tensor import ShapeError, Tensor
from tempvl.models import TokenizedText
from tempvl.services.encoders import FRAME_SEGMENT, WORD_SEGMENT, MultiModalBatch, TVLModel


def text(text_id, *words):
    return TokenizedText(text_id=text_id, ids=(1, *words, 2))


@pytest.fixture
def model(model_config):
    return TVLModel(model_config, seed=3)


def test_encode_video_shape_and_id(model, model_config, rng):
    raw = Tensor(rng.normal(size=(model_config.frames_per_video, model_config.raw_frame_dim)))
    seq = model.encode_video(raw, "v7")
    assert seq.video_id == "v7"
    assert seq.tokens.shape == (model_config.frames_per_video, model_config.d_model)


def test_encode_videos_rejects_wrong_frame_count(model, model_config):
    with pytest.raises(ShapeError):
        model.encode_videos(Tensor(np.zeros((2, model_config.frames_per_video + 1, model_config.raw_frame_dim))))


def test_frame_order_matters(model, model_config, rng):
    raw = rng.normal(size=(1, model_config.frames_per_video, model_config.raw_frame_dim))
    a = model.encode_videos(Tensor(raw)).data
    b = model.encode_videos(Tensor(raw[:, ::-1])).data
    # temporal embeddings make the reversed clip differ frame by frame
    assert not np.allclose(a[0, ::-1], b[0])


def test_text_contract(model):
    with pytest.raises(ValueError, match="CLS"):
        model.encode_text(TokenizedText(text_id="t", ids=(5, 6, 2)))
    with pytest.raises(ValueError, match="limit"):
        model.encode_text(text("t", 4, 5, 6, 7, 8))
    with pytest.raises(ValueError, match="exactly one"):
        model.encode_text(TokenizedText(text_id="t", ids=(1, 1, 2)))
    with pytest.raises(ValueError, match="vocabulary"):
        model.encode_text(text("t", 99))


def test_padding_does_not_change_real_token_features(model):
    short = text("a", 5)
    longer = text("b", 6, 7, 8)
    alone = model.encode_text(short).data
    batched, mask = model.encode_texts([short, longer])
    assert mask.tolist()[0] == [True, True, True, False, False]
    assert np.allclose(batched.data[0, :3], alone, atol=1e-12)


def test_causal_text_ignores_future_tokens(model):
    a = model.encode_text(text("a", 5, 6), causal=True).data
    b = model.encode_text(text("b", 5, 7), causal=True).data
    assert np.allclose(a[:2], b[:2], atol=1e-12)
    assert not np.allclose(a[2], b[2])


def test_build_batch_layout(model, model_config, rng):
    frames = model.encode_videos(Tensor(rng.normal(size=(2, 3, model_config.raw_frame_dim))))
    words, mask = model.encode_texts([text("a", 5), text("b", 6, 7)])
    batch = model.build_batch(frames, words, mask)
    assert batch.frame_count == 3
    assert batch.length == 3 + 4
    assert batch.segment.tolist() == [FRAME_SEGMENT] * 3 + [WORD_SEGMENT] * 4
    assert batch.attention_mask[0].tolist() == [True] * 3 + [True, True, True, False]
    fused = model.fuse(batch)
    assert fused.shape == (2, 7, model_config.d_model)


def test_build_batch_enforces_max_merged_len(model, model_config, rng):
    frames = Tensor(rng.normal(size=(1, model_config.max_merged_len, model_config.d_model)))
    words, mask = model.encode_texts([text("a", 5)])
    with pytest.raises(ShapeError, match="max_merged_len"):
        model.build_batch(frames, words, mask)


def test_heads_output_shapes(model, model_config, rng):
    fused = Tensor(rng.normal(size=(2, 6, model_config.d_model)))
    assert model.boundary_head(fused).shape == (2, 6, 2)
    assert model.text_span_head(fused).shape == (2, 6, 2)
    assert model.match_head(fused).shape == (2, 6)
    assert model.mlm_logits(fused).shape == (2, 6, model_config.text_vocab_size)


def test_projections_are_unit_norm(model, model_config, rng):
    frames = model.encode_videos(Tensor(rng.normal(size=(3, 3, model_config.raw_frame_dim))))
    words, _ = model.encode_texts([text("a", 5), text("b", 6), text("c", 7)])
    v, t = model.project_for_contrastive(frames, words[:, 0, :])
    assert v.shape == t.shape == (3, model_config.proj_dim)
    assert np.allclose(np.linalg.norm(v.data, axis=-1), 1.0)
    assert np.allclose(np.linalg.norm(t.data, axis=-1), 1.0)


def test_temperature_starts_at_init(model):
    assert model.temperature(True, 0.07).item() == pytest.approx(0.07)
    assert not model.temperature(False, 0.05).requires_grad


def test_same_seed_same_parameters(model_config):
    a = TVLModel(model_config, seed=11)
    b = TVLModel(model_config, seed=11)
    for (name_a, pa), (name_b, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(pa.data, pb.data)


def test_gradients_reach_both_encoders_through_fusion(model, model_config, rng):
    frames = model.encode_videos(Tensor(rng.normal(size=(1, 3, model_config.raw_frame_dim))))
    words, mask = model.encode_texts([text("a", 5, 6)])
    fused = model.fuse(model.build_batch(frames, words, mask))
    T.backward(T.sum(model.boundary_head(fused[:, :3, :])))
    params = dict(model.named_parameters())
    assert np.any(params["video.frame_proj.weight"].grad != 0)
    assert np.any(params["text.word_embed"].grad != 0)
    assert params["heads.mlm.weight"].grad is None


def test_single_item_projection(model, model_config, rng):
    seq = model.encode_video(Tensor(rng.normal(size=(model_config.frames_per_video, model_config.raw_frame_dim))))
    cls = Tensor(rng.normal(size=model_config.d_model))
    v, t = model.project_for_contrastive(seq.tokens, cls)
    assert v.shape == t.shape == (model_config.proj_dim,)
    assert np.linalg.norm(v.data) == pytest.approx(1.0)
    assert np.linalg.norm(t.data) == pytest.approx(1.0)
    v2, t2 = model.project_for_contrastive(T.scale(seq.tokens, 3.0), T.scale(cls, 0.25))
    assert np.allclose(v2.data, v.data, atol=1e-12)
    assert np.allclose(t2.data, t.data, atol=1e-12)


def test_masked_slots_do_not_reach_fused_output(model, model_config, rng):
    tokens = rng.normal(size=(1, 6, model_config.d_model))
    mask = np.array([[True, True, True, True, False, False]])
    segment = np.array([FRAME_SEGMENT] * 3 + [WORD_SEGMENT] * 3, dtype=np.int8)
    base = model.fuse(MultiModalBatch(Tensor(tokens), mask, segment, 3)).data
    perturbed = tokens.copy()
    perturbed[0, 4:] += rng.normal(size=(2, model_config.d_model)) * 10.0
    moved = model.fuse(MultiModalBatch(Tensor(perturbed), mask, segment, 3)).data
    assert np.allclose(moved[0, :4], base[0, :4], atol=1e-12)


def test_attention_rows_are_distributions(model, model_config, rng):
    x = Tensor(rng.normal(size=(2, 5, model_config.d_model)))
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    attn, _ = model.fusion_encoder.blocks[0].attention.weights(x, mask)
    assert attn.shape == (2, model_config.n_heads, 5, 5)
    assert np.allclose(attn.data.sum(axis=-1), 1.0)
    assert np.all(attn.data[1, :, :, 3:] < 1e-12)


def test_word_order_matters(model):
    a = model.encode_text(text("a", 5, 6)).data
    b = model.encode_text(text("b", 6, 5)).data
    assert not np.allclose(a, b)


def test_zeroed_boundary_head_is_uniform(model, model_config, rng):
    model.boundary.logits.weight.data[...] = 0.0
    model.boundary.logits.bias.data[...] = 0.0
    r = model.boundary_head(Tensor(rng.normal(size=(7, model_config.d_model))))
    for column in range(2):
        assert np.allclose(T.softmax(r[:, column], axis=-1).data, 1.0 / 7)


def test_match_head_follows_slot_order(model, model_config, rng):
    cls = rng.normal(size=(4, model_config.d_model))
    perm = [2, 0, 3, 1]
    logits = model.match_head(Tensor(cls)).data
    assert np.allclose(model.match_head(Tensor(cls[perm])).data, logits[perm], atol=1e-12)
