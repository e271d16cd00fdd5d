import json

import numpy as np
import pytest

from ctxtransducer import autodiff as ad
from ctxtransducer.network import (CheckpointError, EncoderConfig, Mode, ModelConfig, Transducer, load_checkpoint,
                                   save_checkpoint)


def model_with(conv=True, downsample=1, seed=0):
    cfg = ModelConfig(feature_dim=5, vocab_size=4, embed_dim=4, pred_dim=6, joint_dim=7,
                      encoder=EncoderConfig(num_blocks=2, model_dim=8, num_heads=2, feedforward_dim=12,
                                            use_depthwise_conv=conv, conv_kernel=3, downsample_factor=downsample))
    return Transducer.initialise(cfg, seed)


@pytest.mark.parametrize("conv", [False, True])
def test_streaming_is_causal_bitwise(conv, rng):
    model = model_with(conv)
    x = rng.normal(size=(12, 5))
    base = model.encode(x, Mode.STREAMING).data
    for t in range(11):
        y = x.copy()
        y[t + 1:] = rng.normal(size=y[t + 1:].shape) * 10
        out = model.encode(y, Mode.STREAMING).data
        assert out[:t + 1].tobytes() == base[:t + 1].tobytes()


@pytest.mark.parametrize("conv", [False, True])
def test_nonstreaming_sees_the_future(conv, rng):
    model = model_with(conv)
    x = rng.normal(size=(10, 5))
    y = x.copy()
    y[-1] += 1.0
    assert not np.array_equal(model.encode(x, Mode.NONSTREAMING).data[0], model.encode(y, Mode.NONSTREAMING).data[0])


@pytest.mark.parametrize("conv", [False, True])
def test_single_frame_modes_coincide(conv, rng):
    model = model_with(conv)
    x = rng.normal(size=(1, 5))
    assert model.encode(x, "streaming").data.tobytes() == model.encode(x, "nonstreaming").data.tobytes()


def test_downsampled_length(rng):
    model = model_with(downsample=3)
    for T in (1, 2, 3, 7, 9):
        out = model.encode(rng.normal(size=(T, 5)), Mode.STREAMING)
        assert out.shape == (model.encoded_length(T), 8) == (-(-T // 3), 8)


def test_encode_rejects_bad_input():
    model = model_with()
    with pytest.raises(ad.ShapeError):
        model.encode(np.zeros((3, 4)), Mode.STREAMING)
    with pytest.raises(ad.ShapeError):
        model.encode(np.zeros((0, 5)), Mode.STREAMING)


def test_prediction_network_prefixes():
    model = model_with()
    assert model.predict([]).shape == (1, 6)
    a = model.predict([1, 2, 3]).data
    b = model.predict([1, 2, 4]).data
    assert a[:3].tobytes() == b[:3].tobytes()
    assert not np.array_equal(a[3], b[3])
    c, d = model.predict([2, 1]).data, model.predict([2, 3]).data
    assert c[1].tobytes() == d[1].tobytes()
    with pytest.raises(ValueError):
        model.predict([0])


def test_predict_step_matches_predict():
    model = model_with()
    state = model.start_state()
    for y in (3, 1, 2):
        state = model.predict_step(y, state)
    np.testing.assert_allclose(state[0].data, model.predict([3, 1, 2]).data[-1], rtol=0, atol=1e-15)


def test_joint_with_zero_weights_is_uniform(rng):
    model = model_with()
    model.store.update({n: np.zeros(model.store[n].shape) for n in model.store.names() if n.startswith("joint.")})
    logits = model.join(rng.normal(size=8), rng.normal(size=6)).data
    assert logits.shape == (model.config.num_outputs,) == (5,)
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_allclose(np.exp(ad.log_softmax(logits)), 1 / 5, atol=1e-15)


def test_joint_lattice_matches_join_and_normalises(rng):
    model = model_with()
    enc = model.encode(rng.normal(size=(4, 5)), Mode.NONSTREAMING)
    pred = model.predict([1, 2])
    grid = model.joint_lattice(enc, pred).data
    assert grid.shape == (4, 3, 5)
    np.testing.assert_allclose(grid[2, 1], model.join(enc[2], pred[1]).data, atol=1e-12)
    lse = ad.logsumexp(ad.log_softmax(grid))
    assert np.abs(lse).max() <= 1e-12


def test_checkpoint_round_trip(tmp_path):
    model = model_with()
    save_checkpoint(model, 17, tmp_path / "ck")
    loaded = load_checkpoint(tmp_path / "ck")
    assert loaded.config == model.config
    assert loaded.store.step == 17
    for name in model.store.names():
        assert loaded.store[name].tobytes() == model.store[name].tobytes()


def test_checkpoint_bytes_are_stable(tmp_path):
    model = model_with()
    save_checkpoint(model, 1, tmp_path / "a")
    save_checkpoint(model, 2, tmp_path / "b")
    assert (tmp_path / "a/params.bin").read_bytes() == (tmp_path / "b/params.bin").read_bytes()
    a = json.loads((tmp_path / "a/manifest.json").read_text())
    b = json.loads((tmp_path / "b/manifest.json").read_text())
    a.pop("step"), b.pop("step")
    assert a == b


def test_checkpoint_shape_edit_names_tensor(tmp_path):
    save_checkpoint(model_with(), 0, tmp_path / "ck")
    path = tmp_path / "ck/manifest.json"
    manifest = json.loads(path.read_text())
    manifest["tensors"][3]["shape"] = [1, 2, 3]
    name = manifest["tensors"][3]["name"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=name.replace(".", r"\.")):
        load_checkpoint(tmp_path / "ck")


def test_one_store_backs_both_modes(rng):
    model = model_with()
    x = rng.normal(size=(6, 5))
    before = [model.encode(x, m).data for m in Mode]
    model.store.update({"enc.in.b": model.store["enc.in.b"] + 0.5})
    after = [model.encode(x, m).data for m in Mode]
    for b, a in zip(before, after):
        assert not np.array_equal(a, b)
