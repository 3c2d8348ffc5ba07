import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lfx.errors import BadMagic, DimensionOverflow, IoFailure, KTooLarge, LfxError, OutOfRange, TruncatedFile
from lfx.lightfield import (HEADER_SIZE, LightField, Strategy, ViewCoord, decode_lfr, extract_view, load_lfr,
                            parse_coords, save_lfr, select_views)


def random_lf(rng, shape):
    return LightField(rng.random(shape, dtype=np.float32))


def write_lfr_by_hand(path, dims, value):
    """Independent byte-level writer: header via struct, payload one float at a time."""
    with open(path, "wb") as fh:
        fh.write(b"LFR1")
        for d in dims:
            fh.write(struct.pack("<I", d))
        packed = struct.pack("<f", value)
        fh.write(packed * int(np.prod(dims)))


# --- file format -------------------------------------------------------------

def test_roundtrip_identity(tmp_path, rng):
    lf = random_lf(rng, (3, 2, 5, 4, 3))
    save_lfr(lf, tmp_path / "a.lfr")
    back = load_lfr(tmp_path / "a.lfr")
    assert back == lf
    assert back.data.tobytes() == lf.data.tobytes()


@settings(max_examples=40, deadline=None)
@given(dims=st.tuples(*[st.integers(1, 4)] * 5), seed=st.integers(0, 2**32 - 1))
def test_roundtrip_property(tmp_path_factory, dims, seed):
    lf = random_lf(np.random.default_rng(seed), dims)
    path = tmp_path_factory.mktemp("rt") / "x.lfr"
    save_lfr(lf, path)
    assert load_lfr(path) == lf


def test_constant_file_from_byte_writer(tmp_path):
    path = tmp_path / "const.lfr"
    write_lfr_by_hand(path, (9, 9, 32, 32, 3), 0.5)
    lf = load_lfr(path)
    assert lf.shape == (9, 9, 32, 32, 3)
    assert lf.data.size == 248832
    assert (lf.data == np.float32(0.5)).all()


def test_saved_bytes_match_byte_writer(tmp_path):
    write_lfr_by_hand(tmp_path / "hand.lfr", (2, 3, 4, 5, 1), 0.25)
    save_lfr(LightField.constant(0.25, 2, 3, 4, 5, 1), tmp_path / "lib.lfr")
    assert (tmp_path / "hand.lfr").read_bytes() == (tmp_path / "lib.lfr").read_bytes()


def test_file_size_of_tiny_field(tmp_path):
    save_lfr(LightField.constant(0.1, 1, 1, 2, 2, 1), tmp_path / "t.lfr")
    assert HEADER_SIZE == 24
    assert (tmp_path / "t.lfr").stat().st_size == 24 + 16


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.lfr"
    path.write_bytes(b"XXXX" + struct.pack("<5I", 1, 1, 1, 1, 1) + b"\0" * 4)
    with pytest.raises(BadMagic):
        load_lfr(path)


def test_truncated_payload(tmp_path):
    raw = struct.pack("<4s5I", b"LFR1", 1, 1, 2, 2, 1) + b"\0" * 12
    with pytest.raises(TruncatedFile):
        decode_lfr(raw)
    with pytest.raises(TruncatedFile):
        decode_lfr(b"LFR1" + b"\0" * 7)


@pytest.mark.parametrize("dims", [(0, 1, 1, 1, 1), (1, 1, 1, 0, 3), (2**32 - 1,) * 5])
def test_dimension_overflow(dims):
    with pytest.raises(DimensionOverflow):
        decode_lfr(struct.pack("<4s5I", b"LFR1", *dims))


def test_unwritable_path(tmp_path):
    with pytest.raises(IoFailure):
        save_lfr(LightField.constant(0.0, 1, 1, 1, 1), tmp_path / "missing" / "x.lfr")


def test_sample_domain_enforced():
    with pytest.raises(LfxError):
        LightField(np.full((1, 1, 2, 2, 1), 1.5))
    with pytest.raises(LfxError):
        LightField(np.full((1, 1, 2, 2, 1), np.nan))


def test_uint8_import_rescales():
    lf = LightField.from_uint8(np.array([0, 51, 255], dtype=np.uint8).reshape(1, 1, 1, 3, 1))
    np.testing.assert_array_equal(lf.data.ravel(), np.float32([0.0, 0.2, 1.0]))


# --- views -------------------------------------------------------------------

def test_extract_center_view(rng):
    lf = random_lf(rng, (9, 9, 4, 4, 2))
    assert lf.center == ViewCoord(4, 4)
    np.testing.assert_array_equal(extract_view(lf, lf.center), lf.data[4, 4])


def test_extract_view_out_of_range():
    lf = LightField.constant(0.3, 9, 9, 2, 2)
    with pytest.raises(OutOfRange):
        extract_view(lf, ViewCoord(9, 0))
    with pytest.raises(OutOfRange):
        extract_view(lf, ViewCoord(0, -1))


def test_extract_view_is_a_copy():
    lf = LightField.constant(0.3, 3, 3, 2, 2, 1)
    img = extract_view(lf, ViewCoord(1, 1))
    assert (img == np.float32(0.3)).all()
    img[:] = 0.9
    assert (lf.data == np.float32(0.3)).all()
    with pytest.raises(ValueError):
        lf.data[0, 0, 0, 0, 0] = 1.0


def test_extract_view_matches_flat_index(rng):
    av, au, h, w, c = 3, 4, 5, 6, 2
    lf = random_lf(rng, (av, au, h, w, c))
    flat = lf.data.reshape(-1)
    for v, u in itertools.product(range(av), range(au)):
        img = extract_view(lf, ViewCoord(u, v))
        for y, x, ch in itertools.product(range(h), range(w), range(c)):
            assert img[y, x, ch] == flat[(((v * au + u) * h + y) * w + x) * c + ch]


# --- selection ---------------------------------------------------------------

def brute_nearest(au, av, k):
    cu, cv = (au - 1) // 2, (av - 1) // 2
    scored = []
    for v in range(av):
        for u in range(au):
            scored.append(((u - cu) ** 2 + (v - cv) ** 2, v, u))
    scored.sort()
    return [ViewCoord(u, v) for _, v, u in scored[:k]]


def brute_farthest(au, av, k):
    cu, cv = (au - 1) // 2, (av - 1) // 2
    chosen = [(cu, cv)]
    while len(chosen) < k:
        best, best_d = None, -1
        for v in range(av):
            for u in range(au):
                if (u, v) in chosen:
                    continue
                d = min((u - a) ** 2 + (v - b) ** 2 for a, b in chosen)
                if d > best_d:
                    best, best_d = (u, v), d
        chosen.append(best)
    return [ViewCoord(u, v) for u, v in chosen]


def test_corners_plus_center_9x9():
    lf = LightField.constant(0.5, 9, 9, 2, 2)
    sel = select_views(lf, "corners", 5)
    assert sel.coords == (ViewCoord(0, 0), ViewCoord(8, 8), ViewCoord(4, 4))
    assert str(sel) == "0,0 8,8 4,4"
    assert sel.K == 3


def test_nearest_five_9x9():
    lf = LightField.constant(0.5, 9, 9, 2, 2)
    sel = select_views(lf, Strategy.MIN_ANGULAR_DIFFERENCE, 5)
    assert list(sel.coords) == brute_nearest(9, 9, 5)
    assert sel.coords == (ViewCoord(4, 4), ViewCoord(4, 3), ViewCoord(3, 4), ViewCoord(5, 4), ViewCoord(4, 5))


@pytest.mark.parametrize("au,av,k", [(9, 9, 4), (9, 9, 9), (5, 3, 6), (4, 4, 16)])
def test_sparse_matches_brute_force(au, av, k):
    lf = LightField.constant(0.5, av, au, 1, 1)
    assert list(select_views(lf, "sparse", k).coords) == brute_farthest(au, av, k)
    assert list(select_views(lf, "nearest", k).coords) == brute_nearest(au, av, k)


def test_sparse_full_is_permutation():
    lf = LightField.constant(0.5, 5, 4, 1, 1)
    sel = select_views(lf, "sparse", 20)
    assert sorted(sel.coords) == sorted(lf.coords())


def test_fixed_five_9x9():
    lf = LightField.constant(0.5, 9, 9, 1, 1)
    sel = select_views(lf, "fixed5", 1)
    assert set(sel.coords) == {ViewCoord(4, 4), ViewCoord(4, 0), ViewCoord(0, 4), ViewCoord(8, 4), ViewCoord(4, 8)}
    assert sel.coords[0] == ViewCoord(4, 4)


@pytest.mark.parametrize("strategy", ["corners", "sparse", "nearest", "fixed5"])
def test_single_view_field(strategy):
    lf = LightField.constant(0.5, 1, 1, 2, 2)
    assert select_views(lf, strategy, 1).coords == (ViewCoord(0, 0),)


@pytest.mark.parametrize("strategy", ["corners", "sparse", "nearest", "fixed5"])
def test_k_too_large(strategy):
    lf = LightField.constant(0.5, 3, 3, 2, 2)
    with pytest.raises(KTooLarge):
        select_views(lf, strategy, 10)


def test_selection_deterministic():
    lf = LightField.constant(0.5, 7, 9, 1, 1)
    for strategy in ("corners", "sparse", "nearest", "fixed5"):
        assert select_views(lf, strategy, 6) == select_views(lf, strategy, 6)


def test_explicit_selection():
    lf = LightField.constant(0.5, 3, 3, 1, 1)
    sel = select_views(lf, "explicit", 1, parse_coords("0,0 2,1"))
    assert sel.coords == (ViewCoord(0, 0), ViewCoord(2, 1))
    with pytest.raises(LfxError):
        select_views(lf, "explicit", 1, parse_coords("0,0 0,0"))
    with pytest.raises(OutOfRange):
        select_views(lf, "explicit", 1, parse_coords("3,0"))
