# tests/test_volume.py
import json

import numpy as np
import pytest

from src.utils.errors import VolumeFormatError
from src.volume import (
    CoordTransform,
    LabelVolume,
    foreground_arrays,
    foreground_voxels,
    load_volume,
    make_transform,
    save_volume,
)


def _volume():
    data = np.zeros((5, 4, 3), dtype=np.uint8)      # z, y, x
    data[3, 1, 2] = 5
    data[0, 0, 0] = 1
    return LabelVolume.from_array(data, spacing=(0.5, 1.0, 2.0))


def test_save_load_keeps_bytes_and_header(tmp_path):
    vol = _volume()
    header = save_volume(vol, tmp_path / "v.json")
    loaded = load_volume(header)

    assert loaded == vol
    assert loaded.dims == (3, 4, 5)
    assert loaded.spacing == (0.5, 1.0, 2.0)
    assert json.loads(header.read_text())["dims"] == [3, 4, 5]


def test_blob_is_x_fastest(tmp_path):
    header = save_volume(_volume(), tmp_path / "v.json")
    raw = (tmp_path / "v.u8").read_bytes()
    assert len(raw) == 60
    assert raw[2 + 1 * 3 + 3 * 12] == 5
    assert raw[0] == 1


def test_label_at_uses_xyz():
    assert _volume().label_at((2, 1, 3)) == 5


def test_missing_header_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_volume(tmp_path / "nope.json")


def test_truncated_blob_raises(tmp_path):
    save_volume(_volume(), tmp_path / "v.json")
    (tmp_path / "v.u8").write_bytes(b"\x00" * 59)
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.json")


def test_label_above_num_classes_raises(tmp_path):
    save_volume(_volume(), tmp_path / "v.json")
    header = json.loads((tmp_path / "v.json").read_text())
    header["num_classes"] = 4
    (tmp_path / "v.json").write_text(json.dumps(header))
    with pytest.raises(VolumeFormatError):
        load_volume(tmp_path / "v.json")


def test_data_is_read_only():
    vol = _volume()
    with pytest.raises(ValueError):
        vol.data[0, 0, 0] = 3


def test_foreground_arrays_are_z_major():
    coords, labels = foreground_arrays(_volume())
    assert coords.tolist() == [[0, 0, 0], [2, 1, 3]]
    assert labels.tolist() == [1, 5]


def test_foreground_voxels_rebuild_the_volume():
    vol = _volume()
    voxels = foreground_voxels(vol)
    assert voxels == [((0, 0, 0), 1), ((2, 1, 3), 5)]

    rebuilt = np.zeros_like(vol.data)
    for (x, y, z), label in voxels:
        rebuilt[z, y, x] = label
    np.testing.assert_array_equal(rebuilt, vol.data)


def test_transform_maps_bbox_into_unit_cube():
    vol = _volume()
    t = make_transform(vol)
    coords, _ = foreground_arrays(vol)
    normalized = t.to_normalized(coords)
    assert np.abs(normalized).max() == pytest.approx(1.0)
    np.testing.assert_array_equal(t.to_voxel_index(normalized), coords)


def test_single_voxel_transform_uses_unit_scale():
    data = np.zeros((3, 3, 3), dtype=np.uint8)
    data[1, 1, 1] = 2
    t = make_transform(LabelVolume.from_array(data))
    assert t.scale == 1.0
    np.testing.assert_allclose(t.to_normalized([(1, 1, 1)]), [[0.0, 0.0, 0.0]])


def test_empty_foreground_transform_raises():
    with pytest.raises(VolumeFormatError):
        make_transform(LabelVolume.from_array(np.zeros((2, 2, 2), dtype=np.uint8)))


def test_transform_dict_round_trip():
    t = CoordTransform((1.0, 2.0, 3.0), 0.25, (0.5, 0.5, 1.0))
    assert CoordTransform.from_dict(t.to_dict()) == t
