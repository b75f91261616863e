import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stcn.backbone import FeatureSequence
from stcn.data import (
    ARCHETYPES, AugmentSpec, BlobMotion, VideoSample, augment, crop, fuse_modalities, mirror, random_crop,
    random_crop_sample, random_motion, read_manifest, read_sample, read_split, render_blobs, resize_smaller_side,
    reverse, select_indices, spatial_resize, split_channels, stratified_split, synth_gestures, synth_label_map,
    temporal_normalize, write_dataset,
)
from stcn.errors import ConfigError, InputError


def video(n=6, h=4, w=5, seed=0, flow=False):
    rng = np.random.default_rng(seed)
    frames = {"rgb": rng.standard_normal((n, h, w, 3)), "depth": rng.standard_normal((n, h, w, 1))}
    if flow:
        frames["flow"] = rng.standard_normal((n, h, w, 2))
    return VideoSample(frames, label=1, sample_id="v")


def same(a: VideoSample, b: VideoSample):
    assert set(a.frames) == set(b.frames)
    for m in a.frames:
        np.testing.assert_array_equal(a.frames[m], b.frames[m])


# -- temporal normalization --------------------------------------------------------------


def test_identity_when_n_equals_k():
    assert temporal_normalize(video(n=32), 32).source_indices == list(range(1, 33))


def test_halving_picks_lower_midpoint():
    assert select_indices(64, 32) == list(range(1, 64, 2))


def test_uneven_sections_put_longer_first():
    # 10 into 4: sizes 3,3,2,2 starting at 1,4,7,9
    assert select_indices(10, 4) == [2, 5, 7, 9]


def test_stretching_duplicates_follow_their_source():
    idx = select_indices(20, 32)
    assert len(idx) == 32 and idx == sorted(idx)
    assert set(idx) == set(range(1, 21))
    assert sum(1 for a, b in zip(idx, idx[1:]) if a == b) == 12


def test_normalized_frames_follow_source_indices():
    v = video(n=7)
    out = temporal_normalize(v, 11)
    np.testing.assert_array_equal(out.frames["rgb"], v.frames["rgb"][np.array(out.source_indices) - 1])


def test_empty_video_is_input_error():
    with pytest.raises(InputError):
        select_indices(0, 4)


def test_full_sweep_length_and_monotonicity():
    rng = np.random.default_rng(0)
    for n in range(1, 65):
        for k in range(1, 65):
            for mode in ("deterministic", "random"):
                idx = select_indices(n, k, mode, rng)
                assert len(idx) == k
                assert all(a <= b for a, b in zip(idx, idx[1:]))
                assert 1 <= idx[0] and idx[-1] <= n
                if n <= k:
                    assert set(idx) == set(range(1, n + 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**32))
def test_random_mode_is_pure_in_seed(n, k, seed):
    v = video(n=n, h=2, w=2)
    a, b = temporal_normalize(v, k, "random", seed), temporal_normalize(v, k, "random", seed)
    assert a.source_indices == b.source_indices
    assert temporal_normalize(v, k, seed=1).source_indices == temporal_normalize(v, k, seed=2).source_indices


def test_more_duplicates_than_frames_allowed():
    idx = select_indices(2, 9, "random", np.random.default_rng(3))
    assert len(idx) == 9 and set(idx) == {1, 2}


# -- augmentation ------------------------------------------------------------------------


def test_reverse_and_mirror_are_involutions():
    v = video(flow=True)
    same(reverse(reverse(v)), v)
    same(mirror(mirror(v)), v)


def test_reverse_and_mirror_commute():
    v = video(flow=True)
    same(reverse(mirror(v)), mirror(reverse(v)))


def test_mirror_negates_horizontal_flow_only():
    v = video(flow=True)
    m = mirror(v)
    np.testing.assert_array_equal(m.frames["flow"][..., 0], -v.frames["flow"][:, :, ::-1, 0])
    np.testing.assert_array_equal(m.frames["flow"][..., 1], v.frames["flow"][:, :, ::-1, 1])
    np.testing.assert_array_equal(m.frames["depth"], v.frames["depth"][:, :, ::-1])


def test_all_ops_give_four_samples_with_mapped_labels():
    out = augment(video(), AugmentSpec(label_map={("reverse", 1): 2, ("mirror", 1): 1, ("reverse+mirror", 1): 0}))
    assert [s.sample_id for s in out] == ["v", "v~reverse", "v~mirror", "v~reverse+mirror"]
    assert [s.label for s in out] == [1, 2, 1, 0]


def test_partial_label_map_is_config_error():
    with pytest.raises(ConfigError):
        augment(video(), AugmentSpec(ops=("reverse",), label_map={("mirror", 1): 1}))


def test_augment_commutes_with_identity_normalization():
    v = video(n=8)
    spec = AugmentSpec()
    a = [temporal_normalize(s, 8) for s in augment(v, spec)]
    b = augment(temporal_normalize(v, 8), spec)
    for x, y in zip(a, b):
        same(x, y)


def test_unknown_op_rejected():
    with pytest.raises(ConfigError):
        AugmentSpec(ops=("rotate",))


# -- spatial sizing ----------------------------------------------------------------------


def test_resize_to_own_size_is_exact():
    f = np.random.default_rng(0).standard_normal((3, 7, 9, 2))
    assert np.max(np.abs(spatial_resize(f, (7, 9)) - f)) == 0.0


def test_constant_frame_stays_constant():
    f = np.full((2, 5, 8, 1), 0.37)
    out = spatial_resize(f, (13, 3))
    assert out.shape == (2, 13, 3, 1)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def test_resize_smaller_side_keeps_aspect():
    assert resize_smaller_side(np.zeros((1, 20, 40, 1)), 10).shape == (1, 10, 20, 1)


def test_crop_is_seeded_and_shared_across_modalities():
    v = video(n=3, h=8, w=8)
    a, b = random_crop_sample(v, (4, 5), seed=11), random_crop_sample(v, (4, 5), seed=11)
    same(a, b)
    rgb = a.frames["rgb"]
    for top in range(5):
        for left in range(4):
            if np.array_equal(crop(v.frames["rgb"], top, left, (4, 5)), rgb):
                np.testing.assert_array_equal(a.frames["depth"], crop(v.frames["depth"], top, left, (4, 5)))
                return
    pytest.fail("crop not found")


def test_crop_larger_than_frame():
    with pytest.raises(InputError):
        random_crop(np.zeros((1, 4, 4, 1)), (5, 2), seed=0)


# -- fusion ------------------------------------------------------------------------------


def seq(c, modality, label=0, T=8, seed=0):
    return FeatureSequence(np.random.default_rng(seed).standard_normal((T, c)), label, modality, "s")


def test_fusion_shape_and_canonical_order():
    fused = fuse_modalities([seq(64, "depth", seed=1), seq(64, "rgb", seed=2)])
    assert fused.values.shape == (8, 128) and fused.modality == "rgb+depth"
    rgb, depth = split_channels(fused, [64, 64])
    np.testing.assert_array_equal(rgb, seq(64, "rgb", seed=2).values)
    np.testing.assert_array_equal(depth, seq(64, "depth", seed=1).values)


def test_single_modality_fusion_is_identity():
    s = seq(5, "rgb")
    np.testing.assert_array_equal(fuse_modalities([s]).values, s.values)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=3), st.integers(0, 2**31))
def test_fusion_slices_recover_inputs(channels, seed):
    names = ["rgb", "depth", "flow"][:len(channels)]
    seqs = [seq(c, m, seed=seed + i) for i, (c, m) in enumerate(zip(channels, names))]
    parts = split_channels(fuse_modalities(seqs[::-1]), channels)
    for s, p in zip(seqs, parts):
        np.testing.assert_array_equal(p, s.values)


def test_fusion_mismatch_errors():
    with pytest.raises(InputError):
        fuse_modalities([seq(2, "rgb", T=8), seq(2, "depth", T=4)])
    with pytest.raises(InputError):
        fuse_modalities([seq(2, "rgb", label=0), seq(2, "depth", label=1)])


# -- synthetic gestures --------------------------------------------------------------------


def test_synth_is_bit_identical_per_seed():
    a, b = synth_gestures(4, 3, seed=5), synth_gestures(4, 3, seed=5)
    for x, y in zip(a, b):
        same(x, y)
    c = synth_gestures(4, 3, seed=6)
    assert not np.array_equal(a[0].frames["rgb"], c[0].frames["rgb"])


def test_synth_modalities_and_labels():
    data = synth_gestures(3, 2, shape=(5, 12, 10))
    assert [s.label for s in data] == [0, 0, 1, 1, 2, 2]
    np.testing.assert_array_equal(data[0].frames["depth"], 1.0 - data[0].frames["rgb"])
    assert data[0].frames["rgb"].shape == (5, 12, 10, 1)


def test_synth_rejects_too_many_classes():
    with pytest.raises(ConfigError):
        synth_gestures(9, 1)


def thresholded_centroid(frame, level=0.05):
    w = np.where(frame > level, frame, 0.0)
    yy, xx = np.mgrid[0:frame.shape[0], 0:frame.shape[1]]
    return np.array([(w * xx).sum() / w.sum(), (w * yy).sum() / w.sum()])


@pytest.mark.parametrize("archetype", ARCHETYPES)
def test_rendered_centroid_follows_analytic_path(archetype):
    for seed in range(5):
        motion = random_motion(archetype, 16, 16, np.random.default_rng(seed))
        centres, sigmas = motion.path(8, 16)
        frames = render_blobs(centres, sigmas, 16, 16)
        for f, c in zip(frames, centres):
            assert np.all(np.abs(thresholded_centroid(f) - c) < 0.5)


def test_reversed_left_is_a_right_trajectory():
    left = BlobMotion("left", (10.0, 6.0), 0.8, 1.2)
    c, s = left.path(8, 16)
    right = BlobMotion("right", (10.0 - 0.8 * 0.4 * 16, 6.0), 0.8, 1.2)
    c2, s2 = right.path(8, 16)
    np.testing.assert_allclose(c[::-1], c2, atol=1e-12)
    np.testing.assert_allclose(render_blobs(c, s, 16, 16)[::-1], render_blobs(c2, s2, 16, 16), atol=1e-12)


def test_synth_label_map_matches_archetype_symmetry():
    m = synth_label_map(8)
    assert m[("reverse", 0)] == 1 and m[("mirror", 2)] == 2 and m[("reverse+mirror", 4)] == 4
    assert m[("reverse", 6)] == 7 and m[("mirror", 6)] == 6
    with pytest.raises(ConfigError):
        synth_label_map(5, ["reverse"])  # clockwise reverses into class 5, which is absent


def test_clockwise_turns_clockwise_on_screen():
    motion = BlobMotion("clockwise", (8.0, 8.0), 1.0, 1.0, radius=4.0, phase=0.0)
    c, _ = motion.path(8, 16)
    # start at the right of centre; clockwise on screen (y down) moves downward first
    assert c[1, 1] > c[0, 1]


# -- splits and disk layout ------------------------------------------------------------------


def test_stratified_split_counts():
    data = synth_gestures(4, 10, seed=0)
    splits = stratified_split(data, 2, seed=0)
    assert len(splits["train"]) == 32 and len(splits["test"]) == 8
    assert not set(splits["train"]) & set(splits["test"])
    with pytest.raises(ConfigError):
        stratified_split(data, 10, seed=0)


def test_dataset_roundtrip(tmp_path):
    data = synth_gestures(2, 3, shape=(4, 6, 6), seed=1)
    splits = stratified_split(data, 1, seed=0)
    write_dataset(tmp_path, data, splits, ["left", "right"])
    assert read_manifest(tmp_path)["class_names"] == ["left", "right"]
    assert len([p for p in tmp_path.iterdir() if p.is_dir()]) == 6
    same(read_sample(tmp_path, data[0].sample_id), data[0])
    assert [s.sample_id for s in read_split(tmp_path, "test")] == splits["test"]
    with pytest.raises(InputError):
        read_sample(tmp_path, "missing")


def test_video_sample_shape_checks():
    with pytest.raises(InputError):
        VideoSample({"rgb": np.zeros((3, 4, 4, 1)), "depth": np.zeros((2, 4, 4, 1))}, 0)
    with pytest.raises(InputError):
        VideoSample({}, 0)
