import math

import numpy as np
import pytest

from trn import dataio as dio
from trn import numeric as nm
from trn import training as tr
from trn.model import ChunkStreams, FusionVariant, TrnConfig, TrnParams
from trn.numeric import ValidationError
from trn.streaming import OnlineDetector


def tiny_model(**kw):
    base = dict(
        fusion_variant=FusionVariant.TWO_STREAM,
        appearance_dim=3,
        motion_dim=2,
        pose_dim=None,
        hidden_size=4,
        decoder_steps=2,
        num_actions=2,
        chunk_size=6,
        fps=30,
    )
    base.update(kw)
    return TrnConfig(**base)


def tiny_train(**kw):
    base = dict(decoder_steps=2, seq_len=4, batch_size=2, epochs=1, seed=0, eval_every=0)
    base.update(kw)
    return tr.TrainConfig(**base)


def random_sequence(rng, cfg, t):
    return [
        ChunkStreams(
            appearance=rng.normal(size=cfg.appearance_dim),
            motion=rng.normal(size=cfg.motion_dim),
        )
        for _ in range(t)
    ]


# ---------------------------------------------------------------------------
# loss


def test_train_config_defaults():
    cfg = tr.TrainConfig()
    assert cfg.learning_rate == 5e-4
    assert cfg.weight_decay == 5e-4
    assert cfg.batch_size == 2
    assert cfg.seq_len == 64
    assert cfg.decoder_steps == 8


def test_decoder_target_pairs_masking_example():
    pairs = tr.decoder_target_pairs(4, 8)
    assert len(pairs) == 6
    assert pairs == [(0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (2, 1)]


def test_sequence_loss_uniform_is_two_log_classes():
    cfg = tiny_model(num_actions=20)
    params = TrnParams.zeros(cfg)
    rng = np.random.default_rng(0)
    seq = random_sequence(rng, cfg, 4)
    labels = rng.integers(0, 21, size=4)
    loss = tr.sequence_loss(params, tiny_train(), seq, labels)
    assert abs(loss.item() - 2.0 * math.log(21)) < 1e-12


def test_sequence_loss_nonnegative_random():
    cfg = tiny_model()
    params = TrnParams.init(cfg, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    for t in (1, 2, 5):
        seq = random_sequence(rng, cfg, t)
        labels = rng.integers(0, 3, size=t)
        assert tr.sequence_loss(params, tiny_train(), seq, labels).item() >= 0.0


def test_sequence_loss_single_chunk_has_no_decoder_term():
    cfg = tiny_model(num_actions=20)
    params = TrnParams.zeros(cfg)
    seq = random_sequence(np.random.default_rng(3), cfg, 1)
    loss = tr.sequence_loss(params, tiny_train(), seq, np.array([5]))
    assert abs(loss.item() - math.log(21)) < 1e-12  # encoder head only


def test_sequence_loss_label_out_of_range():
    cfg = tiny_model()
    params = TrnParams.zeros(cfg)
    seq = random_sequence(np.random.default_rng(4), cfg, 2)
    with pytest.raises(ValidationError):
        tr.sequence_loss(params, tiny_train(), seq, np.array([0, 3]))
    with pytest.raises(ValidationError):
        tr.sequence_loss(params, tiny_train(), seq, np.array([-1, 0]))


def test_sequence_loss_decoder_steps_mismatch():
    cfg = tiny_model(decoder_steps=3)
    params = TrnParams.zeros(cfg)
    seq = random_sequence(np.random.default_rng(5), cfg, 2)
    with pytest.raises(ValidationError):
        tr.sequence_loss(params, tiny_train(decoder_steps=2), seq, np.array([0, 1]))


def test_sequence_loss_batch_equals_mean_of_singles():
    cfg = tiny_model()
    params = TrnParams.init(cfg, np.random.default_rng(6))
    rng = np.random.default_rng(7)
    t, b = 4, 3
    singles = [random_sequence(rng, cfg, t) for _ in range(b)]
    labels = rng.integers(0, 3, size=(t, b))
    batched = [
        ChunkStreams(
            appearance=np.stack([singles[j][tt].appearance for j in range(b)], axis=1),
            motion=np.stack([singles[j][tt].motion for j in range(b)], axis=1),
        )
        for tt in range(t)
    ]
    tc = tiny_train()
    batch_loss = tr.sequence_loss(params, tc, batched, labels).item()
    single_losses = [
        tr.sequence_loss(params, tc, singles[j], labels[:, j]).item() for j in range(b)
    ]
    assert abs(batch_loss - np.mean(single_losses)) < 1e-12


def test_sequence_loss_gradient_matches_finite_differences():
    cfg = tiny_model()
    params = TrnParams.init(cfg, np.random.default_rng(8))
    rng = np.random.default_rng(9)
    seq = random_sequence(rng, cfg, 3)
    labels = rng.integers(0, 3, size=3)
    tc = tiny_train()
    err = nm.grad_check(
        lambda: tr.sequence_loss(params, tc, seq, labels), list(params.named().values())
    )
    assert err < 1e-4


def test_sequence_loss_lambda_weights():
    cfg = tiny_model(num_actions=20)
    params = TrnParams.zeros(cfg)
    rng = np.random.default_rng(10)
    seq = random_sequence(rng, cfg, 4)
    labels = rng.integers(0, 21, size=4)
    loss = tr.sequence_loss(
        params, tiny_train(lambda_enc=2.0, lambda_dec=0.5), seq, labels
    )
    assert abs(loss.item() - 2.5 * math.log(21)) < 1e-12


# ---------------------------------------------------------------------------
# optimizer


def one_param_setup(theta):
    cfg = tiny_model(hidden_size=1, appearance_dim=1, motion_dim=1, num_actions=1, decoder_steps=1)
    params = TrnParams.zeros(cfg)
    params.embed.b.data[:] = theta
    return params


def test_adam_zero_grad_zero_decay_is_identity():
    params = one_param_setup(1.0)
    state = tr.AdamState.init(params)
    zeros = {k: np.zeros_like(t.data) for k, t in params.named().items()}
    before = {k: t.data.copy() for k, t in params.named().items()}
    tr.adam_step(params, zeros, state, tiny_train(decoder_steps=1, weight_decay=0.0))
    for k, t in params.named().items():
        assert np.array_equal(t.data, before[k])


def test_adam_single_step_hand_example():
    # f(theta) = theta^2 / 2, theta = 1, grad = 1, lr = 0.1: after bias
    # correction the first update magnitude is ~lr
    params = one_param_setup(1.0)
    state = tr.AdamState.init(params)
    grads = {k: np.zeros_like(t.data) for k, t in params.named().items()}
    grads["embed.b"] = np.array([1.0])
    tc = tiny_train(decoder_steps=1, learning_rate=0.1, weight_decay=0.0)
    tr.adam_step(params, grads, state, tc)
    theta = params.embed.b.data[0]
    assert abs(theta - 0.9) < 1e-6
    assert state.t == 1


def test_adam_first_update_magnitude_is_lr_for_any_scale():
    for g in (1e-6, 1.0, 1e6):
        params = one_param_setup(0.0)
        state = tr.AdamState.init(params)
        grads = {k: np.zeros_like(t.data) for k, t in params.named().items()}
        grads["embed.b"] = np.array([g])
        tr.adam_step(
            params, grads, state, tiny_train(decoder_steps=1, learning_rate=0.01, weight_decay=0.0)
        )
        assert abs(abs(params.embed.b.data[0]) - 0.01) < 1e-4


def test_adam_nonfinite_gradient_names_parameter():
    params = one_param_setup(1.0)
    state = tr.AdamState.init(params)
    grads = {k: np.zeros_like(t.data) for k, t in params.named().items()}
    grads["decoder.cls.b"] = np.array([np.nan])
    with pytest.raises(ValidationError) as exc:
        tr.adam_step(params, grads, state, tiny_train(decoder_steps=1))
    assert "decoder.cls.b" in str(exc.value)


def test_adam_decay_only_shrinks_monotonically():
    params = one_param_setup(1.0)
    state = tr.AdamState.init(params)
    zeros = {k: np.zeros_like(t.data) for k, t in params.named().items()}
    tc = tiny_train(decoder_steps=1, learning_rate=0.1, weight_decay=0.5)
    norms = [abs(params.embed.b.data[0])]
    for _ in range(5):
        tr.adam_step(params, zeros, state, tc)
        norms.append(abs(params.embed.b.data[0]))
    assert all(b < a for a, b in zip(norms, norms[1:]))
    assert norms[1] == pytest.approx(1.0 - 0.1 * 0.5)


def test_adam_deterministic():
    results = []
    for _ in range(2):
        params = one_param_setup(1.0)
        state = tr.AdamState.init(params)
        rng = np.random.default_rng(0)
        tc = tiny_train(decoder_steps=1)
        for _ in range(10):
            grads = {k: rng.normal(size=t.data.shape) for k, t in params.named().items()}
            tr.adam_step(params, grads, state, tc)
        results.append({k: t.data.copy() for k, t in params.named().items()})
    for k in results[0]:
        assert np.array_equal(results[0][k], results[1][k])


# ---------------------------------------------------------------------------
# end-to-end training


def synth_manifest(tmp_path, **kw):
    base = dict(
        num_classes=2,
        appearance_dim=5,
        motion_dim=4,
        sigma_ratio=0.15,
        mean_segment_len=4,
        background_prior=0.4,
        num_videos=4,
        video_len=12,
        train_fraction=0.5,
        seed=3,
    )
    base.update(kw)
    path = dio.generate_synthetic(dio.SyntheticSpec(**base), str(tmp_path))
    return dio.load_manifest(path)


def test_train_loss_decreases(tmp_path):
    manifest = synth_manifest(tmp_path)
    mc = tiny_model(appearance_dim=5, motion_dim=4, hidden_size=8, decoder_steps=2)
    tc = tiny_train(seq_len=6, epochs=3, learning_rate=5e-3)
    params, metrics = tr.train(manifest, mc, tc)
    assert len(metrics) == 3
    assert metrics[-1].mean_loss < metrics[0].mean_loss


def test_train_deterministic(tmp_path):
    manifest = synth_manifest(tmp_path)
    mc = tiny_model(appearance_dim=5, motion_dim=4, hidden_size=6, decoder_steps=2)
    tc = tiny_train(seq_len=6, epochs=2)
    params1, metrics1 = tr.train(manifest, mc, tc)
    params2, metrics2 = tr.train(manifest, mc, tc)
    for k, t in params1.named().items():
        assert np.array_equal(t.data, params2.named()[k].data), k
    assert [m.mean_loss for m in metrics1] == [m.mean_loss for m in metrics2]


def test_train_heldout_metrics(tmp_path):
    manifest = synth_manifest(tmp_path)
    mc = tiny_model(appearance_dim=5, motion_dim=4, hidden_size=6, decoder_steps=2)
    tc = tiny_train(seq_len=6, epochs=2, eval_every=2)
    _, metrics = tr.train(manifest, mc, tc)
    assert metrics[0].heldout_map is None
    assert metrics[1].heldout_map is not None
    assert 0.0 <= metrics[1].heldout_map <= 1.0


def test_train_class_map_mismatch(tmp_path):
    manifest = synth_manifest(tmp_path)
    mc = tiny_model(appearance_dim=5, motion_dim=4, num_actions=7)
    with pytest.raises(ValidationError):
        tr.train(manifest, mc, tiny_train())


def test_predict_manifest_matches_streaming(tmp_path):
    manifest = synth_manifest(tmp_path)
    mc = tiny_model(appearance_dim=5, motion_dim=4, hidden_size=6, decoder_steps=2)
    params = TrnParams.init(mc, np.random.default_rng(0))
    dump = tr.predict_manifest(params, manifest, "test")
    videos = manifest.split("test")
    assert set(dump.videos.keys()) == {v.video_id for v in videos}
    det = OnlineDetector(params)
    for video in videos:
        det.reset()
        streams = dio.load_video_streams(manifest, video)
        pred = dump.videos[video.video_id]
        for t in range(video.num_chunks):
            out = det.push_chunk(
                ChunkStreams(appearance=streams["appearance"][t], motion=streams["motion"][t])
            )
            assert np.allclose(out.present, pred.present[t], atol=1e-12)
            for i in range(mc.decoder_steps):
                assert np.allclose(out.anticipated[i], pred.anticipated[t, i], atol=1e-12)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip(tmp_path):
    cfg = tiny_model(hidden_size=5, decoder_steps=2)
    params = TrnParams.init(cfg, np.random.default_rng(11))
    adam = tr.AdamState.init(params)
    rng = np.random.default_rng(12)
    tc = tiny_train()
    for _ in range(3):
        grads = {k: rng.normal(size=t.data.shape) for k, t in params.named().items()}
        tr.adam_step(params, grads, adam, tc)
    path = str(tmp_path / "model.trnc")
    tr.save_checkpoint(path, params, adam, meta={"note": "unit"})
    loaded, adam2, meta = tr.load_checkpoint(path)
    assert meta == {"note": "unit"}
    assert loaded.config == cfg
    for k, t in params.named().items():
        assert np.array_equal(loaded.named()[k].data, t.data)
    assert adam2.t == adam.t
    for k in adam.m:
        assert np.array_equal(adam2.m[k], adam.m[k])
        assert np.array_equal(adam2.v[k], adam.v[k])


def test_checkpoint_without_adam(tmp_path):
    cfg = tiny_model()
    params = TrnParams.init(cfg, np.random.default_rng(13))
    path = str(tmp_path / "m.trnc")
    tr.save_checkpoint(path, params)
    loaded, adam, _ = tr.load_checkpoint(path)
    assert adam is None
    for k, t in params.named().items():
        assert np.array_equal(loaded.named()[k].data, t.data)


def test_checkpoint_deterministic_bytes(tmp_path):
    cfg = tiny_model()
    params = TrnParams.init(cfg, np.random.default_rng(14))
    a, b = str(tmp_path / "a.trnc"), str(tmp_path / "b.trnc")
    tr.save_checkpoint(a, params, meta={"x": 1})
    tr.save_checkpoint(b, params, meta={"x": 1})
    assert open(a, "rb").read() == open(b, "rb").read()


def test_checkpoint_corruption_errors(tmp_path):
    cfg = tiny_model()
    params = TrnParams.init(cfg, np.random.default_rng(15))
    path = tmp_path / "m.trnc"
    tr.save_checkpoint(str(path), params)
    blob = path.read_bytes()

    path.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(dio.BadMagicError):
        tr.load_checkpoint(str(path))
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(dio.TruncatedFileError):
        tr.load_checkpoint(str(path))
    path.write_bytes(blob + b"\x00")
    with pytest.raises(dio.HeaderError):
        tr.load_checkpoint(str(path))


def test_checkpoint_preserves_predictions(tmp_path):
    manifest = synth_manifest(tmp_path / "data")
    mc = tiny_model(appearance_dim=5, motion_dim=4, hidden_size=6, decoder_steps=2)
    params = TrnParams.init(mc, np.random.default_rng(16))
    path = str(tmp_path / "m.trnc")
    tr.save_checkpoint(path, params)
    loaded, _, _ = tr.load_checkpoint(path)
    a = tr.predict_manifest(params, manifest, "test")
    b = tr.predict_manifest(loaded, manifest, "test")
    for vid in a.videos:
        assert np.array_equal(a.videos[vid].present, b.videos[vid].present)
        assert np.array_equal(a.videos[vid].anticipated, b.videos[vid].anticipated)
