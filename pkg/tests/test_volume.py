import json

import numpy as np
import pytest

from patchbalance.volume import (LabelVolume, OrganSpec, PhantomSpec, ProbVolume,
                                 SpacingRule, VolumeFormatError, argmax_labels,
                                 compute_target_spacing, generate_phantom,
                                 load_volume, one_hot, resample, save_volume)

from conftest import random_label_volume


def small_label(seed=0, dims=(4, 4, 4), num_classes=3):
    rng = np.random.default_rng(seed)
    return random_label_volume(rng, dims, num_classes, spacing=(0.5, 0.75, 2.5))


# ---------------------------------------------------------------------------
# file round trips


@pytest.mark.parametrize("suffix", [".mha", ".mhd", ".json"])
def test_label_round_trip_bit_exact(tmp_path, suffix):
    volume = small_label()
    path = save_volume(volume, tmp_path / f"vol{suffix}")
    loaded = load_volume(path, "label")
    assert np.array_equal(loaded.data, volume.data)
    assert loaded.data.dtype == volume.data.dtype
    assert loaded.dims == volume.dims
    assert loaded.spacing == volume.spacing


def test_json_round_trip_keeps_class_names(tmp_path):
    volume = small_label()
    path = save_volume(volume, tmp_path / "vol.json")
    loaded = load_volume(path, "label")
    assert loaded.class_names == volume.class_names


def test_int16_labels_round_trip(tmp_path):
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    names = tuple(f"c{i}" for i in range(8))
    volume = LabelVolume((2, 2, 2), (1, 1, 1), data, names)
    for suffix in (".mha", ".json"):
        loaded = load_volume(save_volume(volume, tmp_path / f"v{suffix}"), "label")
        assert np.array_equal(loaded.data, data)
        assert loaded.data.dtype == np.int16


@pytest.mark.parametrize("suffix", [".mha", ".mhd", ".json"])
def test_prob_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(3)
    raw = rng.random((3, 4, 5, 2)).astype(np.float32)
    raw /= raw.sum(axis=0)
    volume = ProbVolume((4, 5, 2), (1.0, 1.0, 3.0), raw.astype(np.float64),
                        ("background", "a", "b"))
    loaded = load_volume(save_volume(volume, tmp_path / f"p{suffix}"), "prob")
    assert loaded.channels == 3
    assert loaded.normalized
    # payload is f32 on disk; the f64 copy of f32 data round-trips exactly
    assert np.array_equal(loaded.data.astype(np.float32), raw)


def test_raw_payload_is_x_fastest_channel_outermost(tmp_path):
    volume = small_label(dims=(3, 2, 2))
    save_volume(volume, tmp_path / "v.json")
    payload = np.fromfile(tmp_path / "v.raw", dtype=np.uint8)
    expected = [volume.data[x, y, z]
                for z in range(2) for y in range(2) for x in range(3)]
    assert payload.tolist() == expected


def test_cross_writer_oracle(tmp_path):
    # header and payload produced by an independent writer: explicit loops,
    # no package code involved
    rng = np.random.default_rng(11)
    arr = rng.integers(0, 4, size=(16, 16, 16)).astype(np.uint8)
    header = {
        "dims": [16, 16, 16],
        "spacing": [0.9, 0.9, 3.0],
        "dtype": "u8",
        "channels": 1,
        "class_names": ["background", "a", "b", "c"],
    }
    (tmp_path / "ext.json").write_text(json.dumps(header))
    payload = bytes(
        int(arr[x, y, z])
        for z in range(16) for y in range(16) for x in range(16))
    (tmp_path / "ext.raw").write_bytes(payload)

    loaded = load_volume(tmp_path / "ext.json", "label")
    assert np.array_equal(loaded.data, arr)
    assert loaded.spacing == (0.9, 0.9, 3.0)


# ---------------------------------------------------------------------------
# malformed inputs


def test_dimsize_arity_error(tmp_path):
    path = tmp_path / "bad.mha"
    path.write_bytes(b"ObjectType = Image\nNDims = 3\nDimSize = 4 4\n"
                     b"ElementSpacing = 1 1 1\nElementType = MET_UCHAR\n"
                     b"ElementDataFile = LOCAL\n" + bytes(64))
    with pytest.raises(VolumeFormatError, match="DimSize arity"):
        load_volume(path, "label")


def test_compressed_data_rejected(tmp_path):
    path = tmp_path / "bad.mha"
    path.write_bytes(b"ObjectType = Image\nNDims = 3\nCompressedData = True\n"
                     b"DimSize = 2 2 2\nElementSpacing = 1 1 1\n"
                     b"ElementType = MET_UCHAR\nElementDataFile = LOCAL\n"
                     + bytes(8))
    with pytest.raises(VolumeFormatError, match="CompressedData"):
        load_volume(path, "label")


def test_unsupported_element_type(tmp_path):
    path = tmp_path / "bad.mha"
    path.write_bytes(b"ObjectType = Image\nNDims = 3\nDimSize = 2 2 2\n"
                     b"ElementSpacing = 1 1 1\nElementType = MET_DOUBLE\n"
                     b"ElementDataFile = LOCAL\n" + bytes(64))
    with pytest.raises(VolumeFormatError, match="ElementType"):
        load_volume(path, "label")


def test_payload_size_mismatch(tmp_path):
    path = tmp_path / "bad.mha"
    path.write_bytes(b"ObjectType = Image\nNDims = 3\nDimSize = 4 4 4\n"
                     b"ElementSpacing = 1 1 1\nElementType = MET_UCHAR\n"
                     b"ElementDataFile = LOCAL\n" + bytes(8))
    with pytest.raises(VolumeFormatError, match="payload"):
        load_volume(path, "label")


def test_json_bad_dtype(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({
        "dims": [2, 2, 2], "spacing": [1, 1, 1], "dtype": "f64",
        "channels": 1, "class_names": ["background"]}))
    (tmp_path / "bad.raw").write_bytes(bytes(8))
    with pytest.raises(VolumeFormatError, match="dtype"):
        load_volume(tmp_path / "bad.json", "label")


def test_missing_file():
    with pytest.raises(VolumeFormatError, match="not found"):
        load_volume("/nonexistent/vol.mha", "label")


# ---------------------------------------------------------------------------
# phantoms


def test_box_phantom_counts():
    spec = PhantomSpec(dims=(4, 4, 4), organs=(
        OrganSpec(1, "box", (1.5, 1.5, 1.5), (1.0, 1.0, 1.0)),))
    volume, report = generate_phantom(spec, seed=0)
    counts = volume.class_counts()
    assert counts[1] == 8
    assert counts[0] == 56
    assert report["class_counts"] == {"background": 56, "organ_1": 8}


def test_empty_organ_list_gives_background():
    volume, _ = generate_phantom(PhantomSpec(dims=(5, 5, 5)), seed=0)
    assert volume.data.max() == 0
    assert volume.class_names == ("background",)


def test_ellipsoid_matches_brute_force_scan():
    spec = PhantomSpec(dims=(16, 16, 16), organs=(
        OrganSpec(1, "ellipsoid", (7.0, 8.0, 7.5), (3.0, 3.0, 2.0)),))
    volume, _ = generate_phantom(spec, seed=0)

    brute = 0
    for x in range(16):
        for y in range(16):
            for z in range(16):
                if (((x - 7.0) / 3.0) ** 2 + ((y - 8.0) / 3.0) ** 2
                        + ((z - 7.5) / 2.0) ** 2) <= 1.0:
                    brute += 1
                    assert volume.data[x, y, z] == 1
    assert volume.class_counts()[1] == brute


def test_phantom_out_of_bounds_names_organ():
    with pytest.raises(ValueError, match="organ 1"):
        PhantomSpec(dims=(8, 8, 8), organs=(
            OrganSpec(1, "box", (4.0, 4.0, 4.0), (1.0, 1.0, 1.0)),
            OrganSpec(2, "box", (7.0, 4.0, 4.0), (2.0, 1.0, 1.0)),
        ))


def test_later_organs_overwrite_earlier():
    spec = PhantomSpec(dims=(8, 8, 8), organs=(
        OrganSpec(1, "box", (3.5, 3.5, 3.5), (2.0, 2.0, 2.0)),
        OrganSpec(2, "box", (3.5, 3.5, 3.5), (1.0, 1.0, 1.0)),
    ))
    volume, _ = generate_phantom(spec, seed=0)
    assert volume.data[3, 3, 3] == 2
    assert volume.data[2, 2, 2] == 1


def test_phantom_deterministic(two_organ_phantom):
    volume, _ = two_organ_phantom
    again, _ = generate_phantom(PhantomSpec(
        dims=(24, 24, 24), spacing=(1.0, 1.0, 2.0),
        organs=(OrganSpec(1, "ellipsoid", (8.0, 8.0, 8.0), (5.0, 5.0, 4.0)),
                OrganSpec(2, "box", (18.0, 18.0, 18.0), (1.0, 1.0, 1.0)))),
        seed=7)
    assert np.array_equal(volume.data, again.data)


# ---------------------------------------------------------------------------
# target spacing


def _volumes_with_spacings(spacings):
    out = []
    for s in spacings:
        data = np.zeros((2, 2, 2), dtype=np.uint8)
        out.append(LabelVolume((2, 2, 2), s, data, ("background",)))
    return out


def test_single_volume_is_identity():
    volumes = _volumes_with_spacings([(0.7, 0.8, 3.0)])
    assert compute_target_spacing(volumes) == (0.7, 0.8, 3.0)


def hand_percentile(values, p):
    """Independent linear-interpolation percentile between closest ranks."""
    values = sorted(values)
    rank = p / 100.0 * (len(values) - 1)
    lower = int(np.floor(rank))
    upper = min(lower + 1, len(values) - 1)
    frac = rank - lower
    return values[lower] + frac * (values[upper] - values[lower])


def test_out_plane_tenth_percentile():
    out_spacings = [2.0, 2.5, 3.0, 3.0, 5.0]
    volumes = _volumes_with_spacings([(1.0, 1.0, s) for s in out_spacings])
    target = compute_target_spacing(volumes)
    assert target[2] == pytest.approx(2.2, abs=1e-12)
    assert target[2] == pytest.approx(hand_percentile(out_spacings, 10.0),
                                      abs=1e-12)


def test_in_plane_median():
    volumes = _volumes_with_spacings(
        [(0.5, 1.5, 2.0), (1.0, 1.0, 2.0), (2.0, 0.5, 2.0)])
    target = compute_target_spacing(volumes)
    assert target[:2] == (1.0, 1.0)


def test_spacing_rule_validation():
    with pytest.raises(ValueError):
        SpacingRule(out_plane_percentile=150.0)
    with pytest.raises(ValueError):
        compute_target_spacing([])


# ---------------------------------------------------------------------------
# resampling


def test_resample_identity(two_organ_phantom):
    volume, _ = two_organ_phantom
    out = resample(volume, volume.spacing)
    assert out.dims == volume.dims
    assert np.array_equal(out.data, volume.data)


def test_resample_blocky_round_trip():
    # blocks of >= 2 voxels survive a 2x up / 2x down cycle
    rng = np.random.default_rng(5)
    coarse = rng.integers(0, 3, size=(5, 4, 3)).astype(np.uint8)
    data = coarse.repeat(2, 0).repeat(2, 1).repeat(2, 2)
    names = ("background", "a", "b")
    volume = LabelVolume(data.shape, (2.0, 2.0, 2.0), data, names)
    up = resample(volume, (1.0, 1.0, 1.0))
    assert up.dims == (20, 16, 12)
    down = resample(up, (2.0, 2.0, 2.0))
    assert down.dims == volume.dims
    assert np.array_equal(down.data, volume.data)


def test_resample_prob_stays_normalized():
    rng = np.random.default_rng(9)
    raw = rng.random((3, 6, 5, 4))
    raw /= raw.sum(axis=0)
    volume = ProbVolume((6, 5, 4), (1.0, 1.0, 2.5), raw, ("background", "a", "b"))
    out = resample(volume, (0.7, 1.3, 1.0))
    sums = out.data.sum(axis=0)
    assert np.abs(sums - 1.0).max() <= 1e-5
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_resample_dims_rule():
    volume = LabelVolume((10, 10, 10), (1.0, 1.0, 1.0),
                         np.zeros((10, 10, 10), dtype=np.uint8), ("background",))
    out = resample(volume, (3.0, 0.25, 100.0))
    # round(10/3) = 3, round(10/0.25) = 40, round(10/100) = 0 -> floor of 1
    assert out.dims == (3, 40, 1)


def test_resample_rejects_bad_spacing(two_organ_phantom):
    volume, _ = two_organ_phantom
    with pytest.raises(ValueError):
        resample(volume, (0.0, 1.0, 1.0))


# ---------------------------------------------------------------------------
# one-hot


def test_one_hot_background_only():
    volume, _ = generate_phantom(PhantomSpec(dims=(3, 3, 3)), seed=0)
    encoded = one_hot(volume, num_classes=2)
    assert np.array_equal(encoded.data[0], np.ones((3, 3, 3)))
    assert encoded.data[1].sum() == 0


def test_one_hot_argmax_round_trip(two_organ_phantom):
    volume, _ = two_organ_phantom
    encoded = one_hot(volume)
    assert np.array_equal(argmax_labels(encoded).data, volume.data)


def test_one_hot_channel_sums_match_phantom_counts(two_organ_phantom):
    volume, report = two_organ_phantom
    encoded = one_hot(volume)
    sums = encoded.data.sum(axis=(1, 2, 3))
    for class_id, name in enumerate(volume.class_names):
        assert sums[class_id] == report["class_counts"][name]


def test_one_hot_out_of_range():
    volume, _ = generate_phantom(PhantomSpec(
        dims=(4, 4, 4),
        organs=(OrganSpec(2, "box", (1.5, 1.5, 1.5), (1.0, 1.0, 1.0)),)), seed=0)
    with pytest.raises(ValueError, match="out of range"):
        one_hot(volume, num_classes=2)


def test_invariants_rejected():
    with pytest.raises(ValueError):
        LabelVolume((2, 2, 2), (1.0, 0.0, 1.0),
                    np.zeros((2, 2, 2), np.uint8), ("background",))
    with pytest.raises(ValueError):
        LabelVolume((2, 2, 2), (1.0, 1.0, 1.0),
                    np.ones((2, 2, 2), np.uint8), ("background",))
    with pytest.raises(ValueError):
        ProbVolume((2, 2, 2), (1.0, 1.0, 1.0),
                   np.full((2, 2, 2, 2), 0.4), ("background", "a"))


def test_resample_idempotent_at_new_spacing():
    rng = np.random.default_rng(4)
    data = rng.integers(0, 3, size=(13, 9, 7)).astype(np.uint8)
    volume = LabelVolume((13, 9, 7), (0.98, 0.98, 2.5), data,
                         ("background", "a", "b"))
    once = resample(volume, (1.5, 0.7, 3.0))
    twice = resample(once, (1.5, 0.7, 3.0))
    assert once.dims == twice.dims
    assert np.array_equal(once.data, twice.data)
