import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vbiopsy.volume import (
    MASK_MAGIC, VOLUME_MAGIC, BadMagicError, DimensionOverflowError, Mask, NonFiniteVoxelError, PriorMap,
    TruncatedPayloadError, Volume, VolumeFormatError, axial_slices, load_mask, load_volume, mask_from_bytes,
    mask_to_bytes, nearest_indices, resample_nearest, restack, save_mask, save_volume, volume_from_bytes,
    volume_to_bytes,
)

dims3 = st.tuples(*[st.integers(1, 6)] * 3)


def test_slices_count_and_shape():
    v = Volume(np.zeros((4, 8, 8)))
    s = axial_slices(v)
    assert s.count == 4
    assert all(sl.shape == (8, 8) for sl in s.slices)


def test_slice_pixel_equals_voxel():
    a = np.zeros((4, 8, 8))
    a[2, 3, 5] = 7.5
    assert axial_slices(Volume(a)).slices[2][3, 5] == 7.5


@given(dims3, st.integers(0, 2**31))
def test_restack_roundtrip(dims, seed):
    v = Volume(np.random.default_rng(seed).normal(size=dims))
    assert restack(axial_slices(v)) == v


def test_volume_is_read_only():
    v = Volume(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 3


def test_zero_volume_roundtrip(tmp_path):
    v = Volume(np.zeros((2, 2, 2)))
    save_volume(v, tmp_path / "z.vbv")
    raw = (tmp_path / "z.vbv").read_bytes()
    assert raw[:4] == VOLUME_MAGIC
    assert len(raw) == 28 + 8 * 4
    w = load_volume(tmp_path / "z.vbv")
    assert w == v
    save_volume(w, tmp_path / "z2.vbv")
    assert (tmp_path / "z2.vbv").read_bytes() == raw


@given(dims3, st.integers(0, 2**31))
def test_bytes_roundtrip_bit_exact(dims, seed):
    a = np.random.default_rng(seed).normal(size=dims).astype(np.float32)
    v = Volume(a, (1.0, 0.5, 2.0))
    b = volume_to_bytes(v)
    w = volume_from_bytes(b)
    assert w == v and w.spacing == v.spacing
    assert volume_to_bytes(w) == b


def test_little_endian_layout():
    v = Volume(np.arange(8, dtype=np.float32).reshape(2, 2, 2))
    b = volume_to_bytes(v)
    magic, d, h, w, *sp = struct.unpack_from("<4s3I3f", b)
    assert (magic, d, h, w) == (b"VBV1", 2, 2, 2)
    assert np.frombuffer(b[28:], "<f4").tolist() == list(range(8))


def test_rejections_are_distinct():
    good = volume_to_bytes(Volume(np.ones((2, 2, 2))))
    with pytest.raises(BadMagicError):
        volume_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(TruncatedPayloadError):
        volume_from_bytes(good[:-1])
    huge = struct.pack("<4s3I3f", b"VBV1", 4096, 4096, 4096, 1, 1, 1)
    with pytest.raises(DimensionOverflowError):
        volume_from_bytes(huge)
    nan = bytearray(good)
    nan[28:32] = struct.pack("<f", float("nan"))
    with pytest.raises(NonFiniteVoxelError):
        volume_from_bytes(bytes(nan))
    classes = {BadMagicError, TruncatedPayloadError, DimensionOverflowError, NonFiniteVoxelError}
    assert len(classes) == 4 and all(issubclass(c, VolumeFormatError) for c in classes)


def test_trailing_bytes_rejected():
    good = volume_to_bytes(Volume(np.ones((2, 2, 2))))
    with pytest.raises(VolumeFormatError):
        volume_from_bytes(good + b"\0")


def test_nan_volume_rejected_at_construction():
    with pytest.raises(NonFiniteVoxelError):
        Volume(np.full((2, 2, 2), np.nan))


def test_mask_roundtrip(tmp_path):
    m = Mask(np.random.default_rng(0).random((3, 4, 5)) > 0.5)
    save_mask(m, tmp_path / "m.vbm")
    raw = (tmp_path / "m.vbm").read_bytes()
    assert raw[:4] == MASK_MAGIC
    assert load_mask(tmp_path / "m.vbm") == m
    with pytest.raises(BadMagicError):
        volume_from_bytes(raw)
    bad = bytearray(mask_to_bytes(m))
    bad[-1] = 7
    with pytest.raises(VolumeFormatError):
        mask_from_bytes(bytes(bad))


def test_prior_map_range():
    with pytest.raises(ValueError):
        PriorMap(np.full((2, 2, 2), 1.5))
    p = PriorMap(np.linspace(0, 1, 8).reshape(2, 2, 2))
    assert p.binarize(0.5).count == 4


def test_resample_identity_and_constant():
    v = Volume(np.random.default_rng(1).normal(size=(3, 4, 5)))
    assert resample_nearest(v, v.dims).data.tobytes() == v.data.tobytes()
    c = resample_nearest(Volume(np.full((2, 2, 2), 3.0)), (4, 4, 4))
    assert c.dims == (4, 4, 4) and np.all(c.data == 3.0)


def _brute_nearest(n_in, n_out):
    # centre of output voxel i in source index coordinates; ties go to the lower index
    out = []
    for i in range(n_out):
        x = (i + 0.5) * n_in / n_out - 0.5
        cands = sorted(range(n_in), key=lambda j: (abs(j - x), j))
        out.append(cands[0])
    return out


@given(st.integers(1, 12), st.integers(1, 12))
def test_nearest_indices_match_brute_force(n_in, n_out):
    assert nearest_indices(n_in, n_out).tolist() == _brute_nearest(n_in, n_out)


def test_impulse_downsample():
    a = np.zeros((4, 4, 4))
    a[0, 0, 0] = 1.0
    out = resample_nearest(Volume(a), (2, 2, 2)).data
    idx = [_brute_nearest(4, 2)] * 3
    ref = a[np.ix_(*idx)]
    assert np.array_equal(out, ref)
    assert out[0, 0, 0] == 1.0 and out.sum() == 1.0


def test_resample_zero_dim_rejected():
    with pytest.raises(ValueError):
        resample_nearest(Volume(np.ones((2, 2, 2))), (0, 2, 2))


def test_resample_mask_stays_binary():
    m = Mask(np.random.default_rng(3).random((5, 5, 5)) > 0.5)
    r = resample_nearest(m, (7, 3, 9))
    assert isinstance(r, Mask) and set(np.unique(r.bits)) <= {0, 1}
