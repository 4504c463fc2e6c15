import json
import struct

import numpy as np
import pytest

from tensorgrade.io import (
    NonFiniteDataError,
    SizeMismatchError,
    UnreadableFileError,
    UnsupportedFormatError,
    VolumeIOError,
    load_volume,
    save_volume,
)
from tensorgrade.volume import Volume


def oracle_nifti_header(dims, spacing, channels=1, datatype=16, bitpix=32,
                        magic=b"n+1\x00", sizeof_hdr=348, scl=(1.0, 0.0)):
    """Independent NIfTI-1 header writer used as a read-back oracle.

    Built field by field in declaration order, unlike the implementation's
    offset-based packing.
    """
    nx, ny, nz = dims
    ndim = 3 if channels == 1 else 4
    parts = [
        struct.pack("<i", sizeof_hdr),           # sizeof_hdr
        b"\x00" * 36,                            # data_type .. dim_info
        struct.pack("<8h", ndim, nx, ny, nz, channels, 1, 1, 1),
        struct.pack("<3f", 0.0, 0.0, 0.0),       # intent_p1..p3
        struct.pack("<h", 0),                    # intent_code
        struct.pack("<hh", datatype, bitpix),
        struct.pack("<h", 0),                    # slice_start
        struct.pack("<8f", 1.0, *spacing, 1.0, 0.0, 0.0, 0.0),
        struct.pack("<f", 352.0),                # vox_offset
        struct.pack("<ff", *scl),                # scl_slope, scl_inter
        struct.pack("<h", 0),                    # slice_end
        b"\x00\x00",                             # slice_code, xyzt_units
        struct.pack("<4f", 0.0, 0.0, 0.0, 0.0),  # cal_max .. toffset
        struct.pack("<ii", 0, 0),                # glmax, glmin
        b"\x00" * 80,                            # descrip
        b"\x00" * 24,                            # aux_file
        struct.pack("<hh", 0, 0),                # qform_code, sform_code
        struct.pack("<6f", *([0.0] * 6)),        # quatern_b .. qoffset_z
        struct.pack("<12f", *([0.0] * 12)),      # srow_x/y/z
        b"\x00" * 16,                            # intent_name
        magic,
    ]
    header = b"".join(parts)
    assert len(header) == 348
    return header


def oracle_nifti_file(path, data_zyxc, spacing, **kw):
    """Full file via the oracle writer; data is (nz, ny, nx, channels)."""
    channels = data_zyxc.shape[3]
    nz, ny, nx = data_zyxc.shape[:3]
    header = oracle_nifti_header((nx, ny, nz), spacing, channels=channels, **kw)
    disk = np.ascontiguousarray(data_zyxc.astype("<f4").transpose(3, 0, 1, 2))
    path.write_bytes(header + b"\x00" * 4 + disk.tobytes())


class TestRawFormat:
    def test_zero_volume_round_trip_bit_identical(self, tmp_path):
        vol = Volume(np.zeros((4, 4, 4, 1)), (1.0, 1.0, 1.0))
        save_volume(vol, tmp_path / "zero.f32")
        first = (tmp_path / "zero.f32").read_bytes()
        back = load_volume(tmp_path / "zero.f32")
        save_volume(back, tmp_path / "zero2.f32")
        assert (tmp_path / "zero2.f32").read_bytes() == first
        assert np.array_equal(back.data, vol.data)

    def test_random_round_trip_within_float32(self, rng, tmp_path):
        vol = Volume(rng.standard_normal((3, 5, 4, 6)), (0.7, 0.8, 0.9))
        save_volume(vol, tmp_path / "r.f32")
        back = load_volume(tmp_path / "r.json")
        assert back.dims == vol.dims
        assert back.channels == vol.channels
        assert np.allclose(back.spacing, vol.spacing)
        assert np.array_equal(back.data, vol.data.astype(np.float32).astype(np.float64))
        assert np.abs(back.data - vol.data).max() < 1e-6

    def test_payload_layout_is_x_fastest_channel_groups(self, tmp_path):
        data = np.arange(2 * 2 * 2 * 2, dtype=np.float64).reshape(2, 2, 2, 2)
        save_volume(Volume(data), tmp_path / "lay.f32")
        flat = np.frombuffer((tmp_path / "lay.f32").read_bytes(), dtype="<f4")
        # First voxel's channel group, then the +x neighbor's group.
        assert flat[:4].tolist() == [0.0, 1.0, 2.0, 3.0]
        sidecar = json.loads((tmp_path / "lay.json").read_text())
        assert sidecar == {"dims": [2, 2, 2], "spacing": [1.0, 1.0, 1.0], "channels": 2}

    def test_size_mismatch(self, tmp_path):
        vol = Volume(np.zeros((2, 2, 2, 1)))
        save_volume(vol, tmp_path / "bad.f32")
        payload = (tmp_path / "bad.f32").read_bytes()
        (tmp_path / "bad.f32").write_bytes(payload[:-4])  # drop one value
        with pytest.raises(SizeMismatchError, match="bad.f32"):
            load_volume(tmp_path / "bad.f32")

    def test_nonfinite_payload(self, tmp_path):
        data = np.zeros((2, 2, 2, 1), dtype="<f4")
        data[0, 0, 0, 0] = np.inf
        (tmp_path / "inf.f32").write_bytes(data.tobytes())
        (tmp_path / "inf.json").write_text(
            json.dumps({"dims": [2, 2, 2], "spacing": [1, 1, 1], "channels": 1})
        )
        with pytest.raises(NonFiniteDataError, match="1 non-finite"):
            load_volume(tmp_path / "inf.f32")

    @pytest.mark.parametrize(
        "sidecar",
        [
            {"dims": [2, 2], "spacing": [1, 1, 1], "channels": 1},
            {"dims": [2, 2, 0], "spacing": [1, 1, 1], "channels": 1},
            {"dims": [2, 2, 2], "spacing": [1, 1, 1], "channels": 0},
            {"dims": [2, 2, 2], "spacing": [1, 1, 1]},
            {"spacing": [1, 1, 1], "channels": 1},
        ],
    )
    def test_bad_sidecars(self, tmp_path, sidecar):
        (tmp_path / "x.f32").write_bytes(np.zeros(8, dtype="<f4").tobytes())
        (tmp_path / "x.json").write_text(json.dumps(sidecar))
        with pytest.raises(UnsupportedFormatError):
            load_volume(tmp_path / "x.f32")

    def test_missing_file(self, tmp_path):
        with pytest.raises(UnreadableFileError):
            load_volume(tmp_path / "nothing.f32")

    def test_unsupported_suffix(self, tmp_path):
        (tmp_path / "x.dat").write_bytes(b"")
        with pytest.raises(UnsupportedFormatError):
            load_volume(tmp_path / "x.dat")
        with pytest.raises(UnsupportedFormatError):
            save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "x.dat")

    def test_write_to_directory_fails(self, tmp_path):
        with pytest.raises(VolumeIOError):
            save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "x.f32" / "y.f32")

    def test_float32_overflow_rejected(self, tmp_path):
        vol = Volume(np.full((2, 2, 2, 1), 1e300))
        with pytest.raises(VolumeIOError, match="float32 range"):
            save_volume(vol, tmp_path / "big.f32")


class TestNifti:
    def test_read_oracle_written_file(self, rng, tmp_path):
        data = rng.standard_normal((7, 6, 5, 1)).astype(np.float32).astype(np.float64)
        oracle_nifti_file(tmp_path / "o.nii", data, (1.5, 2.0, 2.5))
        vol = load_volume(tmp_path / "o.nii")
        assert vol.dims == (5, 6, 7)
        assert vol.channels == 1
        assert np.allclose(vol.spacing, (1.5, 2.0, 2.5), atol=1e-6)
        assert np.array_equal(vol.data, data)

    def test_read_oracle_multichannel(self, rng, tmp_path):
        data = rng.standard_normal((3, 4, 5, 6)).astype(np.float32).astype(np.float64)
        oracle_nifti_file(tmp_path / "m.nii", data, (1.0, 1.0, 1.0))
        vol = load_volume(tmp_path / "m.nii")
        assert vol.dims == (5, 4, 3)
        assert vol.channels == 6
        assert np.array_equal(vol.data, data)

    def test_round_trip(self, rng, tmp_path):
        vol = Volume(rng.standard_normal((4, 3, 6, 9)), (0.9, 1.1, 1.3))
        save_volume(vol, tmp_path / "rt.nii")
        back = load_volume(tmp_path / "rt.nii")
        assert back.dims == vol.dims
        assert back.channels == vol.channels
        assert np.allclose(back.spacing, vol.spacing, atol=1e-6)
        assert np.array_equal(back.data, vol.data.astype(np.float32).astype(np.float64))

    def test_own_write_read_by_oracle_layout(self, rng, tmp_path):
        # The implementation's file must carry the payload in disk order
        # (x fastest, channel slowest) exactly like the oracle's.
        data = rng.standard_normal((2, 3, 4, 2))
        save_volume(Volume(data), tmp_path / "a.nii")
        oracle_nifti_file(tmp_path / "b.nii", data, (1.0, 1.0, 1.0))
        assert (tmp_path / "a.nii").read_bytes()[352:] == (tmp_path / "b.nii").read_bytes()[352:]

    def test_scl_slope_applied(self, tmp_path):
        data = np.ones((2, 2, 2, 1))
        oracle_nifti_file(tmp_path / "s.nii", data, (1, 1, 1), scl=(2.5, -1.0))
        vol = load_volume(tmp_path / "s.nii")
        assert np.allclose(vol.data, 1.5)

    def test_size_mismatch_error_names_counts(self, rng, tmp_path):
        data = rng.standard_normal((5, 5, 4, 1))
        oracle_nifti_file(tmp_path / "t.nii", data, (1, 1, 1))
        blob = (tmp_path / "t.nii").read_bytes()
        (tmp_path / "t.nii").write_bytes(blob[:-4])
        with pytest.raises(SizeMismatchError, match="100 values"):
            load_volume(tmp_path / "t.nii")

    def test_unsupported_datatype(self, tmp_path):
        data = np.zeros((2, 2, 2, 1))
        oracle_nifti_file(tmp_path / "d.nii", data, (1, 1, 1), datatype=4)
        with pytest.raises(UnsupportedFormatError, match="datatype"):
            load_volume(tmp_path / "d.nii")

    def test_bad_magic(self, tmp_path):
        oracle_nifti_file(tmp_path / "g.nii", np.zeros((2, 2, 2, 1)), (1, 1, 1), magic=b"ni1\x00")
        with pytest.raises(UnsupportedFormatError, match="magic"):
            load_volume(tmp_path / "g.nii")

    def test_wrong_sizeof_hdr(self, tmp_path):
        oracle_nifti_file(tmp_path / "h.nii", np.zeros((2, 2, 2, 1)), (1, 1, 1), sizeof_hdr=540)
        with pytest.raises(UnsupportedFormatError, match="sizeof_hdr"):
            load_volume(tmp_path / "h.nii")

    def test_truncated_header(self, tmp_path):
        (tmp_path / "t.nii").write_bytes(b"\x00" * 100)
        with pytest.raises(UnreadableFileError, match="truncated"):
            load_volume(tmp_path / "t.nii")

    def test_nonfinite_payload(self, tmp_path):
        data = np.zeros((2, 2, 2, 1))
        data[0, 0, 0, 0] = np.nan
        oracle_nifti_file(tmp_path / "n.nii", data, (1, 1, 1))
        with pytest.raises(NonFiniteDataError, match="non-finite"):
            load_volume(tmp_path / "n.nii")

    def test_bad_pixdim(self, tmp_path):
        oracle_nifti_file(tmp_path / "p.nii", np.zeros((2, 2, 2, 1)), (0.0, 1.0, 1.0))
        with pytest.raises(UnsupportedFormatError, match="pixdim"):
            load_volume(tmp_path / "p.nii")
