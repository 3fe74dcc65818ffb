import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtryon.core import (DEFAULT_LABEL_SETS, N_JOINTS, N_LABELS, ConfigurationError, DatasetIntegrityError,
                         DatasetNotFoundError, Frame, ParsingMap, PoseKeypoints, RegionHeatmaps, RegionKind,
                         RegionMask, ShapeError, VideoClip, extract_region_mask, load_clip, load_manifest,
                         load_split, make_toy_dataset, parsing_to_heatmaps, pose_to_heatmaps, read_image,
                         read_parsing, read_pose, write_image, write_parsing, write_pose)

label_maps = arrays(np.int64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, N_LABELS - 1))


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# --- types -------------------------------------------------------------------

def test_frame_rejects_out_of_range_pixels():
    with pytest.raises(ValueError):
        Frame(np.full((2, 2, 3), 1.5))
    with pytest.raises(ShapeError):
        Frame(np.zeros((2, 2)))


def test_types_are_read_only():
    f = Frame(np.zeros((2, 2, 3)))
    with pytest.raises(ValueError):
        f.pixels[0, 0, 0] = 1.0


def test_pose_needs_18_joints():
    with pytest.raises(ShapeError):
        PoseKeypoints(np.zeros((17, 3)))


def test_parsing_label_range():
    with pytest.raises(ValueError):
        ParsingMap(np.array([[20]]))


def test_region_mask_binary():
    with pytest.raises(ValueError):
        RegionMask(np.array([[0.5]]))


def test_video_clip_lengths_must_agree():
    frame = Frame(np.zeros((2, 2, 3)))
    pose = PoseKeypoints(np.zeros((N_JOINTS, 3)))
    parsing = ParsingMap(np.zeros((2, 2), dtype=int))
    with pytest.raises(DatasetIntegrityError):
        VideoClip([frame, frame], [pose], [parsing, parsing], "bad")
    with pytest.raises(DatasetIntegrityError):
        VideoClip([], [], [], "empty")


# --- parsing_to_heatmaps -------------------------------------------------------

def test_heatmaps_of_background():
    h = parsing_to_heatmaps(ParsingMap(np.zeros((3, 4), dtype=int)))
    assert np.all(h.channels[0] == 1)
    assert np.all(h.channels[1:] == 0)


def test_heatmaps_2x2_example():
    h = parsing_to_heatmaps(ParsingMap(np.array([[0, 5], [5, 0]])))
    np.testing.assert_array_equal(h.channels[5], [[0, 1], [1, 0]])
    np.testing.assert_array_equal(h.channels[0], [[1, 0], [0, 1]])


@given(label_maps)
def test_heatmaps_one_hot(labels):
    h = parsing_to_heatmaps(ParsingMap(labels)).channels
    assert set(np.unique(h)) <= {0.0, 1.0}
    np.testing.assert_array_equal(h.sum(0), 1)
    np.testing.assert_array_equal(h.argmax(0), labels)


# --- extract_region_mask -------------------------------------------------------

def test_background_only_gives_empty_clothes_mask():
    h = parsing_to_heatmaps(ParsingMap(np.zeros((4, 4), dtype=int)))
    m = extract_region_mask(h, "clothes_arms")
    assert m.region_kind is RegionKind.CLOTHES_ARMS
    assert m.mask.sum() == 0


def test_clothes_labels_tiling_gives_full_mask():
    labels = np.array([[5, 14], [15, 5]])
    m = extract_region_mask(parsing_to_heatmaps(ParsingMap(labels)), RegionKind.CLOTHES_ARMS)
    np.testing.assert_array_equal(m.mask, 1)


@given(label_maps)
def test_clothes_and_face_masks_disjoint(labels):
    h = parsing_to_heatmaps(ParsingMap(labels))
    mc = extract_region_mask(h, "clothes_arms").mask
    mf = extract_region_mask(h, "face_neck_hair").mask
    assert np.all(mc * mf == 0)


@given(label_maps, st.sets(st.integers(0, N_LABELS - 1), min_size=1), st.sets(st.integers(0, N_LABELS - 1)))
def test_region_mask_monotone(labels, base, extra):
    h = parsing_to_heatmaps(ParsingMap(labels))
    small = extract_region_mask(h, "custom", labels=sorted(base)).mask
    big = extract_region_mask(h, "custom", labels=sorted(base | extra)).mask
    assert np.all(big >= small)


def test_foreground_mask_is_non_background():
    labels = np.array([[0, 3], [19, 0]])
    m = extract_region_mask(parsing_to_heatmaps(ParsingMap(labels)), "foreground").mask
    np.testing.assert_array_equal(m, [[0, 1], [1, 0]])


def test_empty_custom_label_set_is_configuration_error():
    h = parsing_to_heatmaps(ParsingMap(np.zeros((2, 2), dtype=int)))
    with pytest.raises(ConfigurationError):
        extract_region_mask(h, "custom", labels=[])
    with pytest.raises(ConfigurationError):
        extract_region_mask(h, "clothes_arms", label_sets={"clothes_arms": []})


# --- pose_to_heatmaps ----------------------------------------------------------

def _pose(points, conf=1.0):
    j = np.zeros((N_JOINTS, 3))
    for k, (x, y) in enumerate(points):
        j[k] = (x, y, conf)
    return PoseKeypoints(j)


def test_heatmap_peak_at_centre():
    hm = pose_to_heatmaps(_pose([(24, 32)] * N_JOINTS), 64, 48, sigma=1.0)
    assert hm[0].max() == pytest.approx(1.0)
    assert np.unravel_index(hm[0].argmax(), hm[0].shape) == (32, 24)


def test_zero_confidence_joint_has_empty_channel():
    j = np.tile([10.0, 10.0, 1.0], (N_JOINTS, 1))
    j[3, 2] = 0.0
    hm = pose_to_heatmaps(PoseKeypoints(j), 32, 32)
    assert hm[3].max() == 0
    assert hm[2].max() == pytest.approx(1.0)


def test_heatmaps_deterministic(toy_root):
    p = read_pose(toy_root / "clip_000" / "poses" / "00000.json")
    np.testing.assert_array_equal(pose_to_heatmaps(p, 64, 48), pose_to_heatmaps(read_pose(
        toy_root / "clip_000" / "poses" / "00000.json"), 64, 48))


@settings(max_examples=30, deadline=None)
@given(st.integers(-6, 6), st.integers(-6, 6), st.integers(0, 11))
def test_heatmaps_translation_equivariant(toy_root, dx, dy, t):
    pose = read_pose(toy_root / "clip_001" / "poses" / f"{t:05d}.json")
    H, W, m = 64, 48, 8  # compare away from the border where bumps get cropped
    a = pose_to_heatmaps(pose, H, W)
    b = pose_to_heatmaps(pose.shifted(dx, dy), H, W)
    inner = b[:, m:H - m, m:W - m]
    shifted = a[:, m - dy:H - m - dy, m - dx:W - m - dx]
    np.testing.assert_allclose(inner, shifted, atol=1e-6)


# --- disk IO and loaders -------------------------------------------------------

def test_io_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 4, 3)) / 255.0
    write_image(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_image(tmp_path / "a.png"), img, atol=1e-7)
    labels = rng.integers(0, N_LABELS, size=(5, 4))
    write_parsing(tmp_path / "p.png", ParsingMap(labels))
    np.testing.assert_array_equal(read_parsing(tmp_path / "p.png").labels, labels)
    pose = PoseKeypoints(np.c_[rng.uniform(0, 4, (N_JOINTS, 2)), rng.uniform(0, 1, N_JOINTS)])
    write_pose(tmp_path / "k.json", pose)
    np.testing.assert_array_equal(read_pose(tmp_path / "k.json").joints, pose.joints)


def test_toy_dataset_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    make_toy_dataset(a, n_clips=2, frames_per_clip=5, height=64, width=48, seed=7)
    make_toy_dataset(b, n_clips=2, frames_per_clip=5, height=64, width=48, seed=7)
    assert _tree_bytes(a) == _tree_bytes(b)
    c = tmp_path / "c"
    make_toy_dataset(c, n_clips=2, frames_per_clip=5, height=64, width=48, seed=8)
    assert _tree_bytes(a) != _tree_bytes(c)


def test_toy_manifest(toy_root):
    manifest = load_manifest(toy_root)
    assert len(manifest["clips"]) == 5
    assert {c["split"] for c in manifest["clips"]} == {"train", "test"}
    assert [c["id"] for c in manifest["clips"] if c["split"] == "test"] == ["clip_004"]
    assert manifest["label_sets"]["clothes_arms"] == list(DEFAULT_LABEL_SETS["clothes_arms"])


def test_toy_clip_round_trip(toy_root):
    clip = load_clip(toy_root, "clip_002")
    assert len(clip) == len(clip.poses) == len(clip.parsing) == 12
    assert [f.index for f in clip.frames] == list(range(12))
    for t, (pose, parsing) in enumerate(zip(clip.poses, clip.parsing)):
        raw = json.loads((toy_root / "clip_002" / "poses" / f"{t:05d}.json").read_text())
        np.testing.assert_array_equal(pose.joints, [[d["x"], d["y"], d["c"]] for d in raw])
        assert pose.check_bounds(64, 48)
        h = parsing_to_heatmaps(parsing).channels
        np.testing.assert_array_equal(h.sum(0), 1)
    assert clip.model is not None and clip.model_pose is not None and clip.model_parsing is not None


def test_toy_figure_has_every_region(toy_root):
    labels = load_clip(toy_root, "clip_000").parsing[0].labels
    for lab in (0, 2, 5, 9, 10, 13, 14, 15):
        assert (labels == lab).any(), lab


def test_model_wears_a_different_colour(toy_root):
    clip = load_clip(toy_root, "clip_000")
    frame_col = clip.frames[0].pixels[clip.parsing[0].labels == 5].mean(0)
    model_col = clip.model.pixels[clip.model_parsing.labels == 5].mean(0)
    assert np.abs(frame_col - model_col).max() > 0.1


def test_missing_clip_is_not_found(toy_root):
    with pytest.raises(DatasetNotFoundError):
        load_clip(toy_root, "clip_999")
    with pytest.raises(DatasetNotFoundError):
        load_split(toy_root / "nowhere")


def test_pose_count_mismatch_is_integrity_error(tmp_path):
    make_toy_dataset(tmp_path, n_clips=1, frames_per_clip=5, seed=1)
    (tmp_path / "clip_000" / "poses" / "00004.json").unlink()
    with pytest.raises(DatasetIntegrityError, match="clip_000"):
        load_clip(tmp_path, "clip_000")


def test_misaligned_indices_are_integrity_error(tmp_path):
    make_toy_dataset(tmp_path, n_clips=1, frames_per_clip=3, seed=1)
    poses = tmp_path / "clip_000" / "poses"
    shutil.move(poses / "00002.json", poses / "00007.json")
    with pytest.raises(DatasetIntegrityError):
        load_clip(tmp_path, "clip_000")
