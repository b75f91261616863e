import math

import numpy as np
import pytest

from stcn.backbone import BackboneConfig, FeatureSequence, truncate
from stcn.data import split_channels, synth_gestures
from stcn.errors import ConfigError, InputError, NumericError
from stcn.nn import decays
from stcn.tcn import TcnConfig
from stcn.tensor import Tensor
from stcn.train import (
    TrainConfig, TrainState, adam_step, clips_for, confusion_matrix, evaluate, evaluate_predictions,
    extract_features, load_backbone, load_extractor, load_tcn, lr_at, full_scale_backbone_config, full_scale_tcn_config,
    pretrain_backbone, read_feature_cache, save_backbone, save_tcn, train_tcn, write_feature_cache,
)

TINY = dict(frames=4, height=8, width=8, in_channels=1, block_layers=(1, 1), growth_rate=2, num_classes=2)


def scalar_state(value=1.0, name="weight"):
    return TrainState({name: Tensor(np.array([value]), requires_grad=True)})


# -- Adam and the schedule -----------------------------------------------------------


def test_first_adam_step_by_hand():
    state = scalar_state()
    adam_step(state, {"weight": np.array([1.0])}, 0.1, TrainConfig(eps=1e-8))
    assert state.params["weight"].data[0] == 1.0 - 0.1 * (1.0 / (1.0 + 1e-8))


def test_zero_gradient_zero_decay_leaves_params():
    state = scalar_state(0.3)
    for _ in range(5):
        adam_step(state, {"weight": np.zeros(1)}, 0.1, TrainConfig())
    assert state.params["weight"].data[0] == 0.3


def test_zero_betas_give_sign_like_step():
    cfg = TrainConfig(beta1=0.0, beta2=0.0, eps=1e-8)
    state = scalar_state(2.0)
    adam_step(state, {"weight": np.array([-3.0])}, 0.5, cfg)
    assert state.params["weight"].data[0] == 2.0 - 0.5 * (-3.0 / (3.0 + 1e-8))


def test_quadratic_bowl_shrinks():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
    state = TrainState({"weight": p})
    start = np.linalg.norm(p.data)
    for _ in range(100):
        adam_step(state, {"weight": 2.0 * p.data}, 1e-3, TrainConfig())
    assert np.linalg.norm(p.data) < start


def test_weight_decay_skips_norm_and_bias():
    names = ["stem.weight", "stem_norm.gamma", "stem_norm.beta", "head.bias", "blocks.0.tse.w1", "blocks.0.tse.w2"]
    assert [decays(n) for n in names] == [True, False, False, False, True, True]
    results = {}
    for wd in (0.0, 1e-2):
        state = TrainState({n: Tensor(np.ones(2), requires_grad=True) for n in names})
        for _ in range(3):
            adam_step(state, {n: np.zeros(2) for n in names}, 0.1, TrainConfig(weight_decay=wd))
        results[wd] = {n: p.data.copy() for n, p in state.params.items()}
    for n in names:
        if decays(n):
            assert np.all(results[1e-2][n] < results[0.0][n])
        else:
            np.testing.assert_array_equal(results[1e-2][n], results[0.0][n])


def test_non_finite_gradient_is_numeric_error():
    with pytest.raises(NumericError):
        adam_step(scalar_state(), {"weight": np.array([np.nan])}, 0.1, TrainConfig())


def test_lr_schedule():
    cfg = full_scale_backbone_config()
    assert lr_at(0, cfg) == 6.4e-4
    assert math.isclose(lr_at(25, cfg), 6.4e-5, rel_tol=1e-12)
    assert lr_at(24, cfg) == 6.4e-4
    lrs = [lr_at(e, cfg) for e in range(100)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    flat = TrainConfig(lr_init=1e-3, lr_decay_factor=1.0)
    assert {lr_at(e, flat) for e in range(60)} == {1e-3}


def test_preset_tcn_config():
    cfg = full_scale_tcn_config()
    assert (cfg.lr_init, cfg.eps, cfg.stage) == (1e-4, 1e-8, "tcn")


def test_config_validation():
    for bad in (dict(lr_init=0.0), dict(eps=0.0), dict(lr_decay_factor=1.5), dict(epochs=0), dict(stage="x")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"momentum": 0.9})


# -- backbone stage -------------------------------------------------------------------------


def two_clips():
    rng = np.random.default_rng(0)
    return rng.standard_normal((2, 1, 4, 8, 8)), [0, 1]


def test_backbone_overfits_two_samples():
    clips, labels = two_clips()
    cfg = TrainConfig(stage="backbone", lr_init=1e-2, epochs=200, batch_size=2, lr_decay_factor=1.0)
    _, history = pretrain_backbone(clips, labels, BackboneConfig(**TINY, dropout=0.0), cfg)
    assert any(h["accuracy"] == 1.0 for h in history)
    assert history[-1]["accuracy"] == 1.0


def test_backbone_training_is_bit_identical_and_starts_near_log_k():
    clips, labels = two_clips()
    cfg = TrainConfig(stage="backbone", lr_init=1e-2, epochs=3, batch_size=1, seed=4)
    runs = [pretrain_backbone(clips, labels, BackboneConfig(**TINY), cfg) for _ in range(2)]
    assert [h["loss"] for h in runs[0][1]] == [h["loss"] for h in runs[1][1]]
    for (_, a), (_, b) in zip(runs[0][0].named_parameters(), runs[1][0].named_parameters()):
        np.testing.assert_array_equal(a.data, b.data)
    assert abs(runs[0][1][0]["loss"] - math.log(2)) < 0.1


def test_backbone_rejects_bad_labels():
    clips, _ = two_clips()
    with pytest.raises(InputError):
        pretrain_backbone(clips, [0, 2], BackboneConfig(**TINY), TrainConfig(stage="backbone", epochs=1))


def test_backbone_checkpoint_roundtrip(tmp_path):
    clips, labels = two_clips()
    model, _ = pretrain_backbone(clips, labels, BackboneConfig(**TINY),
                                 TrainConfig(stage="backbone", epochs=1, batch_size=2))
    save_backbone(tmp_path / "b.ckpt", model, "rgb")
    loaded = load_backbone(tmp_path / "b.ckpt")
    np.testing.assert_array_equal(loaded(clips).data, model(clips).data)
    with pytest.raises(InputError):
        load_tcn(tmp_path / "b.ckpt")


# -- features -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def extractors():
    samples = synth_gestures(2, 2, shape=(6, 8, 8), seed=0)
    out = {}
    for i, m in enumerate(("rgb", "depth")):
        cfg = BackboneConfig(**{**TINY, "growth_rate": 3})
        model, _ = pretrain_backbone(clips_for(samples, m, 4), [s.label for s in samples], cfg,
                                     TrainConfig(stage="backbone", epochs=2, batch_size=2, seed=i))
        out[m] = truncate(model)
    return samples, out


def test_extract_shapes_and_fusion_slices(extractors):
    samples, ext = extractors
    fused = extract_features(samples, ext, T=2)
    assert len(fused) == len(samples)
    c = ext["rgb"].feature_channels
    assert all(s.values.shape == (2, 2 * c) and s.modality == "rgb+depth" for s in fused)
    single = extract_features(samples, {"depth": ext["depth"]}, T=2)
    for f, s in zip(fused, single):
        np.testing.assert_array_equal(split_channels(f, [c, c])[1], s.values)


def test_extract_is_bit_identical_and_thread_independent(extractors):
    samples, ext = extractors
    a = extract_features(samples, ext, T=2)
    b = extract_features(samples, ext, T=2, threads=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.values, y.values)


def test_extract_rejects_non_divisor(extractors):
    samples, ext = extractors
    with pytest.raises(ConfigError):
        extract_features(samples, ext, T=3)


def test_feature_cache_roundtrip(tmp_path, extractors):
    samples, ext = extractors
    seqs = extract_features(samples, ext, T=4)
    write_feature_cache(tmp_path, seqs)
    back = read_feature_cache(tmp_path)
    assert [s.sample_id for s in back] == [s.sample_id for s in seqs]
    for x, y in zip(seqs, back):
        np.testing.assert_array_equal(x.values, y.values)
        assert (x.label, x.modality) == (y.label, y.modality)


def test_missing_cache_mentions_extract(tmp_path):
    with pytest.raises(InputError, match="extract"):
        read_feature_cache(tmp_path / "nope")


# -- TCN stage ------------------------------------------------------------------------------


def class_sequences(per_class=2, classes=4, T=4, C=3, seed=0):
    rng = np.random.default_rng(seed)
    protos = rng.standard_normal((classes, T, C))
    return [FeatureSequence(protos[c] + 0.1 * rng.standard_normal((T, C)), c, "rgb", f"c{c}_{j}")
            for c in range(classes) for j in range(per_class)]


def test_tcn_overfits_eight_sequences():
    seqs = class_sequences()
    tcfg = TcnConfig(seq_len=4, in_channels=3, channels=(8, 8), dropout=0.0, num_classes=4)
    model, history = train_tcn(seqs, tcfg, TrainConfig(lr_init=1e-2, epochs=500, lr_decay_factor=1.0))
    assert evaluate(model, seqs).accuracy == 1.0


def test_tcn_training_is_bit_identical(tmp_path):
    seqs = class_sequences()
    tcfg = TcnConfig(seq_len=4, in_channels=3, channels=(4,), num_classes=4)
    cfg = TrainConfig(lr_init=1e-2, epochs=3, batch_size=3, seed=9)
    (m1, h1), (m2, h2) = train_tcn(seqs, tcfg, cfg), train_tcn(seqs, tcfg, cfg)
    assert h1 == h2
    save_tcn(tmp_path / "a", m1)
    save_tcn(tmp_path / "b", m2)
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    x = np.stack([s.values for s in seqs])
    np.testing.assert_array_equal(load_tcn(tmp_path / "a")(x).data, m1(x).data)


def test_tcn_rejects_mismatched_features():
    with pytest.raises(InputError):
        train_tcn(class_sequences(T=4), TcnConfig(seq_len=8, in_channels=3, channels=(2,)), TrainConfig(epochs=1))


# -- evaluation --------------------------------------------------------------------------------


def test_perfect_predictor_is_diagonal():
    ev = evaluate_predictions([0, 1, 2, 2], [0, 1, 2, 2], 3)
    assert ev.accuracy == 1.0
    np.testing.assert_array_equal(ev.confusion, np.diag([1, 1, 2]))


def test_constant_predictor_balanced_classes():
    labels = [0, 0, 1, 1, 2, 2, 3, 3]
    ev = evaluate_predictions(labels, [1] * 8, 4)
    assert ev.accuracy == 0.25
    assert ev.confusion.sum() == 8
    np.testing.assert_array_equal(ev.confusion.sum(axis=1), [2, 2, 2, 2])


def test_confusion_rows_are_true_class():
    m = confusion_matrix([0, 1], [1, 1], 2)
    np.testing.assert_array_equal(m, [[0, 1], [0, 1]])


def test_evaluate_empty_is_input_error():
    with pytest.raises(InputError):
        evaluate_predictions([], [], 2)
