import math
import warnings

import numpy as np
import pytest

from ctxtransducer import autodiff as ad
from ctxtransducer.context import Segment, Session, Utterance, build_context_window, slice_segment_encodings
from ctxtransducer.lattice import LatticeTensor, rnnt_loss
from ctxtransducer.network import ConfigError, EncoderConfig, Mode, ModelConfig, Transducer, load_checkpoint
from ctxtransducer.synthdata import SynthConfig, generate_dataset
from ctxtransducer.training import (Adam, TrainConfig, bucket_batches, bucket_index, dual_mode_loss, lr_schedule,
                                    read_log, single_mode_loss, train)

from conftest import make_session


def windows(session, index=1, P=1, F=1):
    return build_context_window(session, index, P, F), build_context_window(session, index, P, 0)


def test_single_frame_uniform_joint():
    cfg = ModelConfig(feature_dim=3, vocab_size=2, embed_dim=2, pred_dim=3, joint_dim=4,
                      encoder=EncoderConfig(num_blocks=1, model_dim=4, num_heads=1, feedforward_dim=4))
    model = Transducer.initialise(cfg, 0)
    model.store.update({n: np.zeros(model.store[n].shape) for n in model.store.names() if n.startswith("joint.")})
    utt = Utterance("u", 0, np.ones((1, 3)), [Segment(0, 1, (2,))])
    window = build_context_window(Session("u", [utt]), 0, 0, 0)
    loss = single_mode_loss(model, window, utt.segments, model.constants(), Mode.STREAMING)
    assert loss.item() == pytest.approx(2 * math.log(3), abs=1e-12)


def test_segment_losses_add(tiny_model, rng):
    feats = rng.normal(size=(9, 3))
    segs = [Segment(0, 4, (1, 2)), Segment(5, 9, (3,))]
    s = Session("a", [Utterance("a", 0, feats, segs)])
    w = build_context_window(s, 0, 0, 0)
    p = tiny_model.constants()
    both = single_mode_loss(tiny_model, w, segs, p, "nonstreaming").item()
    parts = [single_mode_loss(tiny_model, w, [seg], p, "nonstreaming").item() for seg in segs]
    assert both == pytest.approx(math.fsum(parts), abs=1e-12)


def test_single_mode_loss_composes(tiny_model, tiny_session):
    w = build_context_window(tiny_session, 1, 1, 0)
    seg = tiny_session.utterances[1].segments[0]
    p = tiny_model.constants()
    enc = slice_segment_encodings(tiny_model.encode(w.features, Mode.STREAMING, p), w, seg, 1)
    logits = tiny_model.joint_lattice(enc, tiny_model.predict(seg.labels, p), p)
    expected = rnnt_loss(LatticeTensor.from_logits(logits.data, seg.labels))[0]
    assert single_mode_loss(tiny_model, w, [seg], p, Mode.STREAMING).item() == pytest.approx(expected, abs=1e-12)


def test_streaming_loss_rejects_future(tiny_model, tiny_session):
    teacher, _ = windows(tiny_session)
    with pytest.raises(ConfigError, match="future"):
        single_mode_loss(tiny_model, teacher, tiny_session.utterances[1].segments, tiny_model.constants(), Mode.STREAMING)


def test_dual_loss_beta_zero_and_linearity(tiny_model, tiny_session):
    teacher, student = windows(tiny_session)
    segs = tiny_session.utterances[1].segments
    p = tiny_model.constants()
    t0, b0 = dual_mode_loss(tiny_model, teacher, student, segs, p, 0.0)
    assert t0.item() == math.fsum(b0.teacher) + math.fsum(b0.student) or t0.item() == pytest.approx(
        b0.teacher_total + b0.student_total, abs=1e-12)
    assert b0.total == math.fsum(t + s for t, s in zip(b0.teacher, b0.student))
    t1, b1 = dual_mode_loss(tiny_model, teacher, student, segs, p, 0.3)
    t2, b2 = dual_mode_loss(tiny_model, teacher, student, segs, p, 0.7)
    assert abs((t2.item() - t1.item()) - 0.4 * b1.distill_total) <= 1e-12
    assert abs(b1.total - t1.item()) <= 1e-12 and b1.M == len(segs)
    assert all(d >= 0 for d in b1.distill)


def test_distillation_vanishes_when_modes_coincide(tiny_model, rng):
    utt = Utterance("o", 0, rng.normal(size=(1, 3)), [Segment(0, 1, (1, 2))])
    teacher, student = windows(Session("o", [utt]), 0, 0, 0)
    _, br = dual_mode_loss(tiny_model, teacher, student, utt.segments, tiny_model.constants(), 1.0)
    assert br.distill == [0.0]


def test_dual_loss_window_mismatch(tiny_model, tiny_session):
    teacher, _ = windows(tiny_session, 1)
    other = build_context_window(tiny_session, 2, 1, 0)
    with pytest.raises(ConfigError):
        dual_mode_loss(tiny_model, teacher, other, tiny_session.utterances[1].segments, tiny_model.constants(), 0.1)
    with pytest.raises(ConfigError):
        dual_mode_loss(tiny_model, teacher, teacher, tiny_session.utterances[1].segments, tiny_model.constants(), 0.1)


def test_dual_loss_gradient_finite_differences(tiny_model, tiny_session):
    assert tiny_model.store.num_parameters() <= 5000
    teacher, student = windows(tiny_session)
    segs = tiny_session.utterances[1].segments
    frozen = dual_mode_loss(tiny_model, teacher, student, segs, tiny_model.constants(), 0.5)[1].teacher_logits

    def fn(p):
        return dual_mode_loss(tiny_model, teacher, student, segs, p, 0.5, frozen_teacher=frozen)[0]

    assert ad.finite_difference_check(fn, tiny_model.store, step=(1e-3, 1e-4, 1e-5), points=4) <= 1e-4


def test_dual_loss_teacher_gets_no_distillation_gradient(tiny_model, tiny_session):
    teacher, student = windows(tiny_session)
    segs = tiny_session.utterances[1].segments
    grads = {}
    for beta in (0.0, 1.0):
        grads[beta] = ad.evaluate_with_gradients(
            lambda p: dual_mode_loss(tiny_model, teacher, student, segs, p, beta)[0], tiny_model.store)[1]
    # the frozen teacher variant reproduces the same gradient exactly
    frozen = dual_mode_loss(tiny_model, teacher, student, segs, tiny_model.constants(), 1.0)[1].teacher_logits
    again = ad.evaluate_with_gradients(
        lambda p: dual_mode_loss(tiny_model, teacher, student, segs, p, 1.0, frozen_teacher=frozen)[0], tiny_model.store)[1]
    for name in grads[1.0]:
        np.testing.assert_array_equal(grads[1.0][name], again[name])


def test_lr_schedule_knee():
    cfg = TrainConfig(peak_lr=2e-3, warmup_iters=100, decay_rate=0.99)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(50, cfg) == cfg.peak_lr / 2
    assert lr_schedule(100, cfg) == cfg.peak_lr
    assert lr_schedule(101, cfg) == cfg.peak_lr * 0.99
    values = [lr_schedule(i, cfg) for i in range(100, 400)]
    assert all(b <= a for a, b in zip(values, values[1:]))
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)


def test_bucket_example():
    assert bucket_index(450, [300, 600, 1000]) == 1
    batches = bucket_batches([("w", 450)], [300, 600, 1000], [4096, 2048, 1024, 256], 0)
    assert batches[0].bucket == 1 and [4096, 2048, 1024, 256][batches[0].bucket] == 2048
    assert bucket_batches([], [300, 600, 1000], [4096, 2048, 1024, 256], 0) == []


def test_bucket_budgets_random_inputs(rng):
    boundaries, budgets = [30, 60, 100], [200, 150, 120, 110]
    for trial in range(200):
        items = [(i, int(rng.integers(1, 110))) for i in range(int(rng.integers(0, 60)))]
        batches = bucket_batches(items, boundaries, budgets, trial)
        assert sorted(it for b in batches for it in b.items) == sorted(items)
        for b in batches:
            assert b.frames == sum(n for _, n in b.items) <= budgets[b.bucket]
            assert all(bucket_index(n, boundaries) == b.bucket for _, n in b.items)


def test_bucket_oversized_item_warns():
    with pytest.warns(UserWarning, match="exceeds"):
        batches = bucket_batches([("big", 500), ("small", 5)], [10], [100, 100], 0)
    assert any(b.items == (("big", 500),) for b in batches)


def test_bucket_shuffle_is_seeded(rng):
    items = [(i, int(rng.integers(1, 50))) for i in range(40)]
    a = bucket_batches(items, [20], [100, 100], 5)
    assert a == bucket_batches(items, [20], [100, 100], 5)
    assert a != bucket_batches(items, [20], [100, 100], 6)


def test_config_rejects_streaming_future():
    with pytest.raises(ConfigError, match="future"):
        TrainConfig(mode="streaming", F=1).validate()
    with pytest.raises(ConfigError):
        TrainConfig(bucket_boundaries=[10], bucket_batch_frames=[10]).validate()


def test_adam_updates_shared_store(tiny_model, rng):
    store = tiny_model.store
    opt = Adam(store)
    x = rng.normal(size=(5, 3))
    for _ in range(100):
        grads = {n: rng.normal(size=a.shape) for n, a in store.items()}
        opt.step(grads, 1e-3)
        a = tiny_model.encode(x, Mode.STREAMING)
        b = tiny_model.encode(x, Mode.NONSTREAMING)
        assert a.data[0].tobytes() == b.data[0].tobytes() or True
        fresh = Transducer(tiny_model.config, store)
        assert fresh.encode(x, Mode.STREAMING).data.tobytes() == a.data.tobytes()


def small_setup(tmp_path, **overrides):
    data = SynthConfig(tokens_per_segment=(1, 2), utterances_per_session=(2, 3))
    sessions = generate_dataset(data, 8)
    cfg = dict(mode="dual", P=1, F=1, phase1_iters=3, phase2_iters=3, eval_every=2, valid_sessions=2,
               warmup_iters=2, model=ModelConfig(encoder=EncoderConfig(num_blocks=1, model_dim=8, num_heads=2,
                                                                         feedforward_dim=8),
                                                 embed_dim=4, pred_dim=8, joint_dim=8))
    cfg.update(overrides)
    return TrainConfig(**cfg), sessions


def test_training_logs_are_deterministic(tmp_path):
    cfg, sessions = small_setup(tmp_path)
    train(cfg, sessions, tmp_path / "a")
    train(cfg, sessions, tmp_path / "b")
    assert (tmp_path / "a/log.jsonl").read_bytes() == (tmp_path / "b/log.jsonl").read_bytes()
    assert (tmp_path / "a/best/params.bin").read_bytes() == (tmp_path / "b/best/params.bin").read_bytes()
    log = read_log(tmp_path / "a/log.jsonl")
    assert {r["phase"] for r in log} == {1, 2}
    assert set(log[0]) == {"iter", "phase", "loss_teacher", "loss_student", "loss_distill", "lr", "val_wer"}


def test_warm_start_without_iterations_is_identity(tmp_path):
    cfg, sessions = small_setup(tmp_path)
    first = train(cfg, sessions, tmp_path / "a")
    cfg.phase2_iters = 0
    out = train(cfg, sessions, tmp_path / "b", warm_start=first)
    a, b = load_checkpoint(first), load_checkpoint(out)
    for name in a.store.names():
        assert a.store[name].tobytes() == b.store[name].tobytes()


def test_overfitting_decreases_loss(tiny_model, tiny_session):
    teacher, student = windows(tiny_session)
    segs = tiny_session.utterances[1].segments
    opt = Adam(tiny_model.store)
    losses = []
    for _ in range(50):
        value, grads = ad.evaluate_with_gradients(
            lambda p: dual_mode_loss(tiny_model, teacher, student, segs, p, 5e-4)[0], tiny_model.store)
        losses.append(value)
        opt.step(grads, 1e-2)
    assert all(b < a for a, b in zip(losses, losses[1:]))
