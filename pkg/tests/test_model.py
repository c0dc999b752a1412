from types import SimpleNamespace

import numpy as np
import pytest

from seqground import tensor as T
from seqground.codec import build_box_sequence
from seqground.model import (AttentionMap, GroundingModel, ModelConfig, ModelError, average_cross_attention,
                             causal_mask, decode, decoder_forward, encode_language, encode_visual,
                             encoder_forward, fuse, gru_scan, init_params, nucleus_sample, patchify, pool_language,
                             sine_encoding_2d)
from seqground.tensor import Tensor
from seqground.train import make_batch, pad_queries


@pytest.fixture(scope="module")
def model(small_cfg):
    return GroundingModel(small_cfg, seed=3)


def memory_for(model, scenes, n=4):
    q, lengths = pad_queries([s.query_ids for s in scenes[:n]])
    return model.encode(np.stack([s.raster for s in scenes[:n]]), q, lengths)


# --- visual and language encoders ----------------------------------------------


def test_sine_encoding_layout():
    pe = sine_encoding_2d(3, 4, 8, np.float64, temperature=100.0)
    assert pe.shape == (12, 8)
    # cell (row 2, col 1): row sinusoids first, column sinusoids second, frequencies 1 and 1/10
    want = [np.sin(2), np.cos(2), np.sin(0.2), np.cos(0.2), np.sin(1), np.cos(1), np.sin(0.1), np.cos(0.1)]
    np.testing.assert_allclose(pe[2 * 4 + 1], want, atol=1e-12)


def test_low_temperature_spreads_frequencies():
    # across an 8-cell axis, count channels whose value changes by more than 0.5
    def varying(temp):
        pe = sine_encoding_2d(8, 8, 64, np.float64, temperature=temp)[:8]
        return int(np.sum(np.ptp(pe, axis=0) > 0.5))
    assert varying(20.0) > varying(10000.0)
    with pytest.raises(ModelError):
        ModelConfig(pe_temperature=1.0)


def test_patch_tokens(small_cfg):
    cfg = ModelConfig(image_size=64, patch=8)
    params = init_params(cfg, np.random.default_rng(0))
    fv = encode_visual(params, cfg, np.zeros((1, 64, 64, 4), dtype=np.float32))
    assert fv.shape == (1, 64, cfg.hidden)
    np.testing.assert_array_equal(fv.data[0], np.broadcast_to(params["patch_b"].data, (64, cfg.hidden)))


def test_patch_permutation_permutes_rows():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(image_size=16, patch=8, hidden=16, heads=2)
    params = init_params(cfg, rng)
    img = rng.random((1, 16, 16, 4)).astype(np.float32)
    swapped = img.copy()
    swapped[0, :8, :8], swapped[0, :8, 8:] = img[0, :8, 8:], img[0, :8, :8]
    a, b = encode_visual(params, cfg, img).data[0], encode_visual(params, cfg, swapped).data[0]
    np.testing.assert_array_equal(a[[1, 0, 2, 3]], b)


def test_indivisible_raster_rejected():
    with pytest.raises(ModelError):
        patchify(np.zeros((1, 10, 10, 4)), 8)
    with pytest.raises(ModelError):
        ModelConfig(image_size=60, patch=8)


def test_language_single_word(model):
    words, final = encode_language(model.params, model.cfg, np.array([[3]]), np.array([1]))
    assert words.shape == (1, 1, model.cfg.hidden)
    for mode in ("max", "mean", "final_state"):
        np.testing.assert_allclose(pool_language(words, final, [1], mode).data[0], words.data[0, 0], atol=1e-6)


def test_backward_direction_reverses_with_query(model):
    ids = np.array([[3, 7, 5, 9]])
    x = T.embedding(model.params["word_emb"], ids)
    xr = T.embedding(model.params["word_emb"], ids[:, ::-1].copy())
    mask = np.ones((1, 4))
    bwd, _ = gru_scan(model.params, "bwd", x, mask, reverse=True)
    fwd_on_reversed, _ = gru_scan(model.params, "bwd", xr, mask, reverse=False)
    np.testing.assert_allclose(bwd.data[0], fwd_on_reversed.data[0, ::-1], atol=1e-6)


def test_padding_does_not_change_features(model):
    words, final = encode_language(model.params, model.cfg, np.array([[3, 7, 5]]), np.array([3]))
    pw, pf = encode_language(model.params, model.cfg, np.array([[3, 7, 5, 0, 0]]), np.array([3]))
    np.testing.assert_allclose(pw.data[0, :3], words.data[0], atol=1e-6)
    for mode in ("max", "mean", "final_state"):
        np.testing.assert_allclose(pool_language(pw, pf, [3], mode).data, pool_language(words, final, [3], mode).data,
                                   atol=1e-6)


def test_empty_or_long_query_rejected(model):
    with pytest.raises(ModelError):
        encode_language(model.params, model.cfg, np.zeros((1, 0), dtype=int), np.array([0]))
    n = model.cfg.max_query_len + 1
    with pytest.raises(ModelError):
        encode_language(model.params, model.cfg, np.ones((1, n), dtype=int), np.array([n]))


def test_max_pooling_example():
    words = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
    np.testing.assert_array_equal(pool_language(words, None, [2], "max").data, [[1.0, 1.0]])
    assert ModelConfig().pooling == "max"


def test_embed_language_mode():
    cfg = ModelConfig(hidden=16, heads=2, language="embed")
    params = init_params(cfg, np.random.default_rng(0))
    assert "gru_fwd_wx" not in params
    words, final = encode_language(params, cfg, np.array([[2, 3, 0]]), np.array([2]))
    np.testing.assert_array_equal(words.data[0, 1], params["word_emb"].data[3])
    np.testing.assert_array_equal(final.data[0], params["word_emb"].data[3])


def test_gru_gradients_length_three_query():
    cfg = ModelConfig(hidden=8, heads=2)
    params = init_params(cfg, np.random.default_rng(1), dtype=np.float64)
    names = [k for k in params if k.startswith(("gru_", "word_emb"))]

    def fn(ts):
        p = dict(params)
        p.update(zip(names, ts))
        words, final = encode_language(p, cfg, np.array([[2, 5, 7]]), np.array([3]))
        w = np.random.default_rng(9).normal(size=words.shape)
        return T.add(T.sum_all(T.mul(words, Tensor(w))), T.sum_all(final))

    assert T.finite_diff_check(fn, [params[k] for k in names]) < 1e-4


# --- fusion and encoder ---------------------------------------------------------------


def test_fuse_properties(rng):
    fv = Tensor(rng.normal(size=(2, 5, 8)) * 4)
    assert not fuse(fv, Tensor(np.zeros((2, 8)))).data.any()
    fm = fuse(fv, Tensor(rng.normal(size=(2, 8)) * 4)).data
    assert np.all(np.abs(fm) < 1)
    fl = rng.normal(size=(2, 8))
    np.testing.assert_allclose(fm.shape, (2, 5, 8))
    swapped = fuse(Tensor(np.repeat(fl[:, None], 5, axis=1)), Tensor(fv.data[:, 0])).data
    np.testing.assert_allclose(swapped[:, 0], fuse(fv, Tensor(fl)).data[:, 0], atol=1e-12)


def test_encoder_shape_and_determinism(model, rng):
    fm = Tensor(rng.uniform(-1, 1, (2, model.cfg.memory_len, model.cfg.hidden)).astype(np.float32))
    a = encoder_forward(model.params, model.cfg, fm)
    b = encoder_forward(model.params, model.cfg, fm)
    assert a.shape == fm.shape
    assert a.data.tobytes() == b.data.tobytes()


def test_encoder_gradients_four_tokens():
    cfg = ModelConfig(hidden=8, heads=2, enc_layers=1, dec_layers=1, image_size=8, patch=4, ffn_mult=2)
    params = init_params(cfg, np.random.default_rng(2), dtype=np.float64)
    names = [k for k in params if k.startswith("enc")]
    fm = np.random.default_rng(3).uniform(-1, 1, (1, 4, 8))
    w = np.random.default_rng(4).normal(size=(1, 4, 8))

    def fn(ts):
        p = dict(params)
        p.update(zip(names, ts))
        return T.sum_all(T.mul(encoder_forward(p, cfg, Tensor(fm)), Tensor(w)))

    assert T.finite_diff_check(fn, [params[k] for k in names]) < 1e-4


# --- decoder ---------------------------------------------------------------------------


def test_logits_shape_and_attention_rows(model, scenes):
    mem = memory_for(model, scenes)
    v = model.vocab
    tokens = np.array([[v.task_res, 1, 2, 3, 4, 5]] * 4)
    logits, maps = decoder_forward(model.params, model.cfg, mem, tokens)
    assert logits.shape == (4, 6, v.bins + 1)
    assert len(maps) == model.cfg.dec_layers
    for w in maps:
        assert w.shape == (4, model.cfg.heads, 6, model.cfg.memory_len)
        np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-5)


def test_causality(model, scenes, rng):
    mem = memory_for(model, scenes, 2)
    v = model.vocab
    tokens = np.concatenate([[[v.task_res]] * 2, rng.integers(0, v.bins, (2, 8))], axis=1)
    base, _ = decoder_forward(model.params, model.cfg, mem, tokens)
    for i in range(1, 9):
        changed = tokens.copy()
        changed[:, i:] = rng.integers(0, v.bins + 1, changed[:, i:].shape)
        out, _ = decoder_forward(model.params, model.cfg, mem, changed)
        assert np.abs(out.data[:, :i] - base.data[:, :i]).max() <= 1e-6


def test_decoder_needs_task_token(model, scenes):
    with pytest.raises(ModelError):
        decoder_forward(model.params, model.cfg, memory_for(model, scenes, 1), np.array([[1, 2]]))


def test_causal_mask_values():
    m = causal_mask(3)
    assert m[0, 1] == T.MASK_VALUE and m[1, 0] == 0 and m[2, 2] == 0


def test_initial_loss_near_uniform(model, scenes):
    batch = make_batch(scenes[:8], "rec", model.cfg)
    loss = model.loss(batch).item()
    assert abs(loss - np.log(model.vocab.num_classes)) <= 0.2 * np.log(model.vocab.num_classes)


def test_full_model_gradients_subsampled(scenes):
    cfg = ModelConfig(hidden=8, heads=2, enc_layers=1, dec_layers=1, image_size=64, patch=32, bins=16,
                      ffn_mult=2, word_vocab=16)
    m = GroundingModel(cfg, seed=0, dtype=np.float64)
    batch = make_batch(scenes[:2], "rec", cfg)
    batch.rasters = batch.rasters.astype(np.float64) + np.random.default_rng(0).normal(0, 0.1, batch.rasters.shape)
    names = list(m.params)
    err = T.finite_diff_check(lambda ts: m.loss(batch, params=dict(zip(names, ts))), m.parameters(),
                              max_coords=6, rng=np.random.default_rng(0))
    assert err < 1e-4


# --- decoding ----------------------------------------------------------------------------


def test_rec_decode_emits_exactly_four_coordinates(model, scenes):
    mem = memory_for(model, scenes)
    out = decode(model.params, model.cfg, mem, "rec")
    assert all(len(t) == 4 and max(t) < model.vocab.bins for t in out.tokens)
    assert out.attention[0].weights.shape[2] == 4


def test_res_decode_stops_at_eos(model, scenes):
    params = dict(model.params)
    bias = params["pred2_b"].data.copy()
    bias[model.vocab.eos] += 50.0
    params["pred2_b"] = Tensor(bias)
    out = decode(params, model.cfg, memory_for(model, scenes, 2), "res")
    assert all(t == [model.vocab.eos] for t in out.tokens)


def test_res_decode_respects_cap(model, scenes):
    params = dict(model.params)
    bias = params["pred2_b"].data.copy()
    bias[model.vocab.eos] -= 50.0
    params["pred2_b"] = Tensor(bias)
    out = decode(params, model.cfg, memory_for(model, scenes, 2), "res", max_points=3)
    assert all(len(t) == 2 * 3 + 1 and t[-1] == model.vocab.eos for t in out.tokens)


def test_multitask_decode_layout(model, scenes):
    out = decode(model.params, model.cfg, memory_for(model, scenes, 2), "multitask")
    for t in out.tokens:
        assert t[4] == model.vocab.task_res and max(t[:4]) < model.vocab.bins and t[-1] == model.vocab.eos


def test_nucleus_zero_is_argmax(rng):
    for _ in range(1000):
        logits = rng.normal(size=17) * rng.uniform(0.1, 5)
        p = np.exp(logits - logits.max())
        p /= p.sum()
        assert nucleus_sample(p, 0.0, rng) == int(np.argmax(p))


def test_nucleus_keeps_smallest_prefix(rng):
    p = np.array([0.5, 0.3, 0.15, 0.05])
    draws = {nucleus_sample(p, 0.8, rng) for _ in range(300)}
    assert draws == {0, 1}
    assert {nucleus_sample(p, 0.81, rng) for _ in range(300)} == {0, 1, 2}


def test_decoding_is_deterministic(model, scenes):
    mem = memory_for(model, scenes, 3)
    a = decode(model.params, model.cfg, mem, "res", "nucleus", 0.9, np.random.default_rng(5))
    b = decode(model.params, model.cfg, mem, "res", "nucleus", 0.9, np.random.default_rng(5))
    assert a.tokens == b.tokens
    assert decode(model.params, model.cfg, mem, "rec").tokens == decode(model.params, model.cfg, mem, "rec").tokens
    greedy = decode(model.params, model.cfg, mem, "res")
    nucleus0 = decode(model.params, model.cfg, mem, "res", "nucleus", 0.0, np.random.default_rng(1))
    assert greedy.tokens == nucleus0.tokens


def test_average_cross_attention(rng):
    w = rng.random((1, 1, 3, 4))
    heat = average_cross_attention(AttentionMap(w, (2, 2)))
    assert heat.shape == (3, 2, 2)
    np.testing.assert_allclose(heat, (w[0, 0] / w[0, 0].max(axis=1, keepdims=True)).reshape(3, 2, 2))
    multi = average_cross_attention(AttentionMap(rng.random((2, 3, 5, 4)), (2, 2)))
    np.testing.assert_allclose(multi.reshape(5, -1).max(axis=1), 1.0)


# --- persistence ------------------------------------------------------------------------


def test_checkpoint_reproduces_logits_bitwise(model, scenes, tmp_path):
    batch = make_batch(scenes[:3], "rec", model.cfg)
    model.save(tmp_path / "m.ckpt", note="x")
    loaded, info = GroundingModel.load(tmp_path / "m.ckpt")
    assert info["note"] == "x" and loaded.cfg == model.cfg
    a, _ = model.logits(batch)
    b, _ = loaded.logits(batch)
    assert a.data.tobytes() == b.data.tobytes()


def test_config_dict_round_trip():
    cfg = ModelConfig.paper()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert (cfg.hidden, cfg.enc_layers, cfg.dec_layers, cfg.bins) == (256, 6, 3, 1000)
    assert cfg.token_weights == (1.5, 1.0, 1.0, 1.0, 1.0)


def test_ema_tracks_parameters(small_cfg):
    from seqground.model import EMA
    m = GroundingModel(small_cfg, seed=0)
    ema = EMA(m, decay=0.5)
    before = m.params["pred1_b"].data.copy()
    m.params["pred1_b"].data += 2.0
    ema.update(m)
    np.testing.assert_allclose(ema.model(m).params["pred1_b"].data, before + 1.0, atol=1e-6)
