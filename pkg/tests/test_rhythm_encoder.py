import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rhythmid import checkpoint
from rhythmid import tensor_core as tc
from rhythmid.facs import PAD
from rhythmid.rhythm_encoder import (
    RhythmEncoderConfig,
    embed_utterance,
    init_model,
    local_attention_mask,
    make_batch,
    parameter_shapes,
    positional_encoding,
)
from rhythmid.tensor_core import backward


def tiny(n_layers=1, radius=2, dropout=0.0, d_model=8, heads=2, vocab=9, speakers=3, max_len=64):
    return RhythmEncoderConfig(vocab_size=vocab, n_speakers=speakers, d_model=d_model, n_heads=heads,
                               n_layers=n_layers, ffn_dim=2 * d_model, attn_window_radius=radius,
                               dropout_rate=dropout, max_len=max_len)


def test_reference_dimensions():
    cfg = RhythmEncoderConfig(vocab_size=40, n_speakers=1251)
    assert cfg.head_dim == 16 and cfg.ffn_dim == 512
    model = init_model(cfg, np.random.default_rng(0))
    for name, shape in parameter_shapes(cfg).items():
        assert model.params[name].shape == shape
    assert model.params["embedding"].shape == (40, 128)
    assert embed_utterance(model, np.array([3, 4, 5])).shape == (128,)


def test_librispeech_sized_forward_shape():
    cfg = RhythmEncoderConfig(vocab_size=40, n_speakers=1166, n_layers=6, max_len=1024)
    model = init_model(cfg, np.random.default_rng(0))
    ids = np.random.default_rng(1).integers(1, 40, size=(32, 1024))
    with tc.no_grad():
        pooled, logits = model.forward(make_batch(list(ids)))
    assert pooled.shape == (32, 128) and logits.shape == (32, 1166)


@pytest.mark.parametrize("kwargs", [dict(d_model=10, n_heads=3), dict(attn_window_radius=-1), dict(max_len=0)])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        RhythmEncoderConfig(vocab_size=10, n_speakers=2, **kwargs)


def test_init_is_deterministic():
    a = init_model(tiny(), np.random.default_rng(5))
    b = init_model(tiny(), np.random.default_rng(5))
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_init_scheme():
    cfg = RhythmEncoderConfig(vocab_size=300, n_speakers=4, n_layers=1)
    samples = np.concatenate([init_model(cfg, np.random.default_rng(s)).params["embedding"].data.ravel()
                              for s in range(10)])
    # 384000 draws: the standard errors of mean and variance are tiny next to these bounds
    assert abs(samples.mean()) < 5 * math.sqrt(1 / 128 / samples.size)
    assert samples.var() == pytest.approx(1 / 128, rel=0.02)
    model = init_model(cfg, np.random.default_rng(0))
    limit = math.sqrt(6 / (128 + 128))
    assert np.abs(model.params["layers.0.attn.q.weight"].data).max() <= limit
    assert not model.params["layers.0.attn.q.bias"].data.any()
    assert (model.params["layers.0.ln1.gain"].data == 1).all()


def test_positional_encoding():
    pe = positional_encoding(50, 16)
    assert (pe[0, 0::2] == 0).all() and (pe[0, 1::2] == 1).all()
    assert pe[1, 0] == pytest.approx(math.sin(1.0), abs=1e-15)
    assert pe[7, 5] == pytest.approx(math.cos(7 / 10000 ** (4 / 16)), abs=1e-15)
    assert np.abs(pe).max() <= 1.0


def test_local_attention_mask():
    expected = np.array([[1, 1, 0, 0], [1, 1, 1, 0], [0, 1, 1, 1], [0, 0, 1, 1]], bool)
    assert np.array_equal(local_attention_mask(4, 1), expected)
    assert local_attention_mask(5, 4).all() and local_attention_mask(5, 9).all()
    m = local_attention_mask(12, 2)
    assert (m[2:-2].sum(axis=1) == 5).all()


def _model64(cfg, seed=0):
    model = init_model(cfg, np.random.default_rng(seed), dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for p in model.params.values():
        p.data += 0.2 * rng.normal(size=p.shape)
    return model


@pytest.mark.parametrize("n_layers,radius", [(1, 2), (2, 2), (3, 1), (2, 0)])
def test_receptive_field_bound(n_layers, radius):
    model = _model64(tiny(n_layers=n_layers, radius=radius))
    rng = np.random.default_rng(n_layers)
    ids = rng.integers(1, 9, size=30)
    reach = n_layers * radius
    with tc.no_grad():
        base = model.encode(make_batch([ids])).data[0]
        for j in range(30):
            alt = ids.copy()
            alt[j] = 1 + alt[j] % 8
            out = model.encode(make_batch([alt])).data[0]
            far = np.abs(np.arange(30) - j) > reach
            assert np.abs(out[far] - base[far]).max(initial=0.0) <= 1e-12
            # the perturbed position itself must move, or the check above is vacuous
            assert np.abs(out[j] - base[j]).max() > 1e-6


def test_pad_insensitivity():
    model = init_model(tiny(n_layers=2), np.random.default_rng(3))
    rng = np.random.default_rng(4)
    seqs = [rng.integers(1, 9, size=n) for n in (5, 11, 2)]
    with tc.no_grad():
        pooled, logits = model.forward(make_batch(seqs))
        for i, s in enumerate(seqs):
            padded = np.concatenate([s, np.full(20, PAD)])
            p1, l1 = model.forward(make_batch([padded]))
            np.testing.assert_allclose(p1.data[0], pooled.data[i], atol=1e-6)
            np.testing.assert_allclose(l1.data[0], logits.data[i], atol=1e-6)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 3), st.integers(1, 12))
def test_shape_contract(batch, radius, layers, length):
    cfg = tiny(n_layers=layers, radius=radius, speakers=5)
    model = init_model(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(length)
    seqs = [rng.integers(1, 9, size=int(rng.integers(1, length + 1))) for _ in range(batch)]
    pooled, logits = model.forward(make_batch(seqs))
    assert pooled.shape == (batch, 8) and logits.shape == (batch, 5)


def test_single_token_pool_equals_representation():
    model = init_model(tiny(), np.random.default_rng(0))
    batch = make_batch([np.array([4])])
    with tc.no_grad():
        assert np.array_equal(model.pool(batch).data[0], model.encode(batch).data[0, 0])


def test_forward_errors():
    model = init_model(tiny(max_len=8), np.random.default_rng(0))
    with pytest.raises(IndexError):
        model.forward(make_batch([np.array([1, 9])]))
    with pytest.raises(ValueError):
        model.forward(make_batch([np.array([1, 2]), np.array([PAD, PAD])]))
    with pytest.raises(ValueError):
        model.forward(make_batch([np.arange(1, 10) % 8 + 1]))


def test_gradient_reaches_every_parameter():
    cfg = tiny(n_layers=2, dropout=0.1)
    model = init_model(cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    seqs = [rng.integers(1, 9, size=n) for n in (6, 9, 3, 7)]
    loss = tc.cross_entropy(model.logits(make_batch(seqs), True, np.random.default_rng(2)), [0, 1, 2, 1])
    backward(loss)
    for name, p in model.params.items():
        g = p.grad
        if name == "embedding":
            assert not g[PAD].any()
            g = g[1:]
        assert np.abs(g).max() > 0, name


def test_eval_is_deterministic():
    model = init_model(tiny(n_layers=2, dropout=0.5), np.random.default_rng(0))
    batch = make_batch([np.array([1, 2, 3, 4, 5]), np.array([6, 7])])
    a = model.logits(batch, training=False).data
    b = model.logits(batch, training=False).data
    assert a.tobytes() == b.tobytes()


def test_training_dropout_needs_rng_and_changes_output():
    model = init_model(tiny(dropout=0.5), np.random.default_rng(0))
    batch = make_batch([np.array([1, 2, 3, 4, 5])])
    with pytest.raises(ValueError):
        model.logits(batch, training=True)
    a = model.logits(batch, True, np.random.default_rng(1)).data
    assert not np.array_equal(a, model.logits(batch, False).data)


def test_embed_utterance_matches_forward():
    model = init_model(tiny(n_layers=2, dropout=0.3), np.random.default_rng(0))
    seq = np.array([3, 3, 1, 5, 5, 5, 2])
    e1, e2 = embed_utterance(model, seq), embed_utterance(model, seq)
    assert e1.tobytes() == e2.tobytes()
    assert np.array_equal(e1, model.forward(make_batch([seq]))[0].data[0])


def test_checkpoint_round_trip(tmp_path):
    model = init_model(tiny(n_layers=2), np.random.default_rng(0))
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, {k: p.data for k, p in model.params.items()}, {"kind": "rhythm", "speakers": ["a"]})
    params, header = checkpoint.load(path)
    assert list(params) == list(model.params)
    assert all(np.array_equal(params[k], model.params[k].data) for k in params)
    raw = path.read_bytes()
    assert raw[:8] == b"RHYTHMCK"
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(raw[:-4])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"X" + raw[1:])
