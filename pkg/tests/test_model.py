import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcgurklab import tensorcore as tc
from mcgurklab.model import (
    AlignmentError,
    CheckpointError,
    CpcModel,
    ModelConfig,
    interpolation_matrix,
    load_checkpoint,
    save_checkpoint,
)
from mcgurklab.stimgen import LipTrack, build_corpus, make_audio_only
from mcgurklab.signal import Waveform
from mcgurklab.tensorcore import Tensor
from mcgurklab.train import info_nce_loss

TINY = dict(embed_dim=8, audio_channels=4, heads=2, ffn_mult=2, horizon=2)


@pytest.fixture(scope="module")
def tiny():
    return CpcModel(ModelConfig(**TINY), seed=0)


@pytest.fixture(scope="module")
def model():
    return CpcModel(ModelConfig(), seed=0)


def test_default_geometry(model):
    assert model.config.total_stride == 160
    assert model.encode_audio(np.zeros(16000)).shape == (1, 100, 64)


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(horizon=0)
    with pytest.raises(ValueError):
        ModelConfig(modality_dropout_p=1.5)


def test_too_short_audio(tiny):
    with pytest.raises(tc.InsufficientLengthError):
        tiny.encode_audio(np.zeros(tiny.config.receptive_field - 1))


def test_zero_audio_is_constant(tiny):
    out = tiny.encode_audio(np.zeros(1600)).data[0]
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_doubling_length_doubles_frames(tiny):
    assert tiny.encode_audio(np.ones(3200)).shape[1] == 2 * tiny.encode_audio(np.ones(1600)).shape[1]


def test_zero_lips_constant(tiny):
    out = tiny.encode_visual(np.zeros((5, 2)), 20).data[0]
    np.testing.assert_allclose(out, np.broadcast_to(out[0], out.shape), atol=1e-12)


def test_visual_resampled_to_audio_rate(tiny):
    rng = np.random.default_rng(0)
    lips = rng.normal(size=(25, 2))
    assert tiny.encode_visual(lips, 100).shape == (1, 100, 8)
    same = tiny.encode_visual(lips, 25).data
    via = interpolation_matrix(25, 25) @ same[0]
    np.testing.assert_allclose(via, same[0], atol=1e-15)


def test_interpolation_matrix_nodes():
    m = interpolation_matrix(7, 3)
    np.testing.assert_allclose(m.sum(axis=1), 1.0)
    np.testing.assert_allclose(m[[0, 3, 6]], np.eye(3))


def test_modality_dropout_extremes(tiny):
    rng = np.random.default_rng(1)
    a, v = Tensor(np.ones((6, 3, 8))), Tensor(np.full((6, 3, 8), 2.0))
    a0, v0, dropped = tiny.modality_dropout(a, v, 0.0, rng)
    assert a0 is a and v0 is v and dropped == [None] * 6
    a1, v1, dropped = tiny.modality_dropout(a, v, 1.0, rng)
    for b, d in enumerate(dropped):
        assert (a1.data[b].any(), v1.data[b].any()) == ((False, True) if d == "audio" else (True, False))


def test_modality_dropout_monte_carlo(tiny):
    rng = np.random.default_rng(2)
    a = Tensor(np.ones((1, 1, 2)))
    drops = [tiny.modality_dropout(a, a, 0.5, rng)[2][0] for _ in range(10000)]
    n_drop = sum(d is not None for d in drops)
    assert abs(n_drop / 10000 - 0.5) < 0.02
    assert abs(sum(d == "audio" for d in drops) / n_drop - 0.5) < 0.02


def test_dropout_shape_mismatch(tiny):
    with pytest.raises(AlignmentError):
        tiny.modality_dropout(Tensor(np.ones((1, 3, 8))), Tensor(np.ones((1, 4, 8))), 0.5, np.random.default_rng())
    with pytest.raises(AlignmentError):
        tiny.fuse(Tensor(np.ones((1, 3, 8))), Tensor(np.ones((1, 4, 8))))


def test_fuse_linear_and_local(tiny):
    rng = np.random.default_rng(3)
    a, v = rng.normal(size=(1, 5, 8)), rng.normal(size=(1, 5, 8))
    zero = np.zeros_like(a)
    pre = lambda x, y: tiny.fuse_preactivation(Tensor(x), Tensor(y)).data
    bias = tiny.params["fuse.b"].data
    np.testing.assert_allclose(pre(a, zero) + pre(zero, v) - bias, pre(a, v), atol=1e-12)
    np.testing.assert_allclose(tiny.fuse(Tensor(zero), Tensor(zero)).data[0], np.broadcast_to(tc.gelu(Tensor(bias)).data, (5, 8)))
    a2 = a.copy()
    a2[0, 2] += 1.0
    diff = np.abs(tiny.fuse(Tensor(a2), Tensor(v)).data - tiny.fuse(Tensor(a), Tensor(v)).data).sum(axis=-1)[0]
    assert diff[2] > 0 and np.all(diff[[0, 1, 3, 4]] == 0)


@settings(max_examples=15, deadline=None)
@given(steps=st.integers(1, 128), seed=st.integers(0, 2**31))
def test_context_is_causal(tiny, steps, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(1, steps, 8))
    base = tiny.context(Tensor(z)).data
    z2 = z.copy()
    z2[0, -1] += rng.normal(size=8)
    out = tiny.context(Tensor(z2)).data
    assert out[0, :-1].tobytes() == base[0, :-1].tobytes()


def test_context_position_sensitive(tiny):
    rng = np.random.default_rng(4)
    z = rng.normal(size=(1, 6, 8))
    perm = z[:, ::-1].copy()
    assert not np.allclose(np.sort(tiny.context(Tensor(z)).data, axis=1), np.sort(tiny.context(Tensor(perm)).data, axis=1))


def test_predict_future_shapes(tiny):
    c = Tensor(np.random.default_rng(5).normal(size=(2, 7, 8)))
    preds = tiny.predict_future(c)
    assert len(preds) == 2 and all(p.shape == (2, 7, 8) for p in preds)
    assert sum(7 - k for k in (1, 2)) == 11
    with pytest.raises(tc.InsufficientLengthError):
        tiny.predict_future(Tensor(np.ones((1, 2, 8))))
    one = CpcModel(ModelConfig(**{**TINY, "horizon": 1}))
    assert len(one.predict_future(Tensor(np.ones((1, 2, 8))))) == 1


def test_embedding_ignores_lip_content_when_zeroed(tiny):
    corpus = build_corpus(seed=0)
    rec = corpus.incongruent[0]
    ao = make_audio_only(rec)
    a = tiny.embed_stimulus(rec, "audio_only")
    b = tiny.embed_stimulus(ao, "audiovisual")
    c = tiny.embed_stimulus(ao, "audio_only")
    assert a.tobytes() == b.tobytes() == c.tobytes()
    assert not np.array_equal(a, tiny.embed_stimulus(rec, "audiovisual"))


def test_embed_records_matches_single(tiny):
    corpus = build_corpus(seed=0)
    recs = corpus.congruent[:4] + corpus.audio_only[:2]
    batch = tiny.embed_records(recs)
    for r, e in zip(recs, batch):
        np.testing.assert_allclose(e, tiny.embed_stimulus(r), atol=1e-12)


def test_representation_switch(tiny):
    w = np.random.default_rng(6).normal(size=1600)
    lips = np.zeros((3, 2))
    assert tiny.embed(w, lips, "encoder").shape == tiny.embed(w, lips, "fusion").shape == (1, 10, 8)


def test_end_to_end_grad_check():
    tc.set_precision("64")
    m = CpcModel(ModelConfig(**TINY), seed=1)
    rng = np.random.default_rng(7)
    audio = rng.normal(size=(2, 960))
    lips = rng.normal(size=(2, 2, 2))

    def f():
        z, c = m.forward(audio, lips, rng=np.random.default_rng(0), dropout=True, dropout_p=0.0)
        return info_nce_loss(m.predict_future(c), z)

    assert tc.grad_check(f, m.parameters()) < 1e-4


def test_checkpoint_round_trip(tmp_path, tiny):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny, {"note": "x"})
    back, meta = load_checkpoint(path)
    assert meta == {"note": "x"}
    assert back.config == tiny.config
    for k, t in tiny.params.items():
        assert back.params[k].data.astype("<f4").tobytes() == t.data.astype("<f4").tobytes()
    save_checkpoint(tmp_path / "again.ckpt", back, {"note": "x"})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption(tmp_path, tiny):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tiny)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "long.ckpt").write_bytes(raw + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "long.ckpt")


def test_parameter_count_default(model):
    assert model.parameter_count == sum(t.data.size for t in model.params.values())
