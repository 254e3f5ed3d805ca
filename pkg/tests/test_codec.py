import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flagdit.codec import (
    NEXTFRAME,
    NEXTLINE,
    PAD,
    PATCH,
    Layout,
    LayoutError,
    StructureError,
    TokenSequence,
    decode_sequence,
    encode_sequence,
    layout_for,
    pad_batch,
    patchify,
    read_grid,
    unpatchify,
    write_grid,
    write_pnm,
)
from oracles import sequence_length

P, NL, NF = PATCH, NEXTLINE, NEXTFRAME


def test_patchify_single_patch_row_major():
    g = np.arange(4.0).reshape(2, 2, 1, 1)
    np.testing.assert_array_equal(patchify(g, 2), [[[[0.0, 1.0, 2.0, 3.0]]]])


def test_patchify_index_oracle():
    g = np.arange(16.0).reshape(4, 4, 1, 1)
    pat = patchify(g, 2)
    assert pat.shape == (1, 2, 2, 4)
    # patch (0, 1): rows 0-1, columns 2-3
    np.testing.assert_array_equal(pat[0, 0, 1], [g[0, 2, 0, 0], g[0, 3, 0, 0],
                                                 g[1, 2, 0, 0], g[1, 3, 0, 0]])


def test_patchify_channels_and_p1():
    rng = np.random.default_rng(0)
    g = rng.standard_normal((4, 6, 2, 3))
    pat = patchify(g, 2)
    for t in range(2):
        for r in range(2):
            for c in range(3):
                np.testing.assert_array_equal(pat[t, r, c], g[2 * r:2 * r + 2, 2 * c:2 * c + 2, t].ravel())
    np.testing.assert_array_equal(patchify(g, 1).reshape(-1), g.transpose(2, 0, 1, 3).reshape(-1))


def test_patchify_rejects_indivisible():
    with pytest.raises(LayoutError, match="H=5, W=4.*p=2"):
        patchify(np.zeros((5, 4, 1, 1)), 2)


def test_patchify_batched_matches_loop():
    g = np.random.default_rng(1).standard_normal((3, 4, 4, 2, 1))
    np.testing.assert_array_equal(patchify(g, 2), np.stack([patchify(x, 2) for x in g]))


@pytest.mark.parametrize("h,w,T,kinds", [
    (2, 2, 1, [P, P, NL, P, P, NL, NF]),
    (1, 1, 1, [P, NL, NF]),
])
def test_encode_kinds(h, w, T, kinds):
    seq = encode_sequence(np.zeros((T, h, w, 3)))
    assert seq.kinds.tolist() == kinds
    assert seq.positions.tolist() == list(range(len(kinds)))


def test_encode_two_frames():
    seq = encode_sequence(np.zeros((2, 2, 2, 1)))
    assert len(seq) == 14
    assert np.flatnonzero(seq.kinds == NF).tolist() == [6, 13]


def test_decode_errors_and_pad_transparency():
    x = np.random.default_rng(2).standard_normal((1, 2, 2, 4))
    seq = encode_sequence(x)
    truncated = TokenSequence(seq.kinds[:-1], seq.payloads, seq.layout)
    with pytest.raises(StructureError, match="token 6"):
        decode_sequence(truncated)
    bad = seq.kinds.copy()
    bad[1] = NL  # NEXTLINE after one patch
    with pytest.raises(StructureError, match="token 1"):
        decode_sequence(TokenSequence(bad, seq.payloads, seq.layout))
    padded = TokenSequence(np.concatenate([seq.kinds, [PAD] * 3]), seq.payloads, seq.layout)
    np.testing.assert_array_equal(decode_sequence(padded), x)
    inner_pad = np.concatenate([seq.kinds[:3], [PAD], seq.kinds[3:]])
    with pytest.raises(StructureError):
        decode_sequence(TokenSequence(inner_pad, seq.payloads, seq.layout))


shapes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
                   st.integers(1, 3), st.integers(1, 3))


@settings(max_examples=100)
@given(shapes, st.integers(0, 2**31 - 1))
def test_round_trip_is_bitwise(shape, seed):
    h, w, T, C, p = shape
    g = np.random.default_rng(seed).standard_normal((h * p, w * p, T, C)).astype(np.float32)
    seq = encode_sequence(patchify(g, p), p)
    assert len(seq) == sequence_length(h * p, w * p, T, p)
    assert len(seq) == layout_for(h * p, w * p, T, p)["length"]
    out = unpatchify(decode_sequence(seq), p, C)
    assert out.tobytes() == g.tobytes()


def test_pad_batch_rules():
    a = encode_sequence(np.ones((1, 2, 2, 1)))
    b = encode_sequence(np.ones((2, 2, 2, 1)))
    batch = pad_batch([a, b])
    assert batch.kinds.shape == (2, 14)
    assert (batch.kinds[0] == PAD).sum() == 7 and not batch.mask[0, 7:].any()
    assert batch.mask[1].all()
    single = pad_batch([a])
    assert single.mask.all() and (single.kinds != PAD).all()
    same = pad_batch([a, a])
    assert (same.kinds != PAD).all()


@pytest.mark.parametrize("H,W,T,p,length,nf", [
    (8, 8, 1, 2, 21, [20]),
    (2, 2, 1, 2, 3, [2]),
    (4, 4, 3, 2, 21, [6, 13, 20]),
])
def test_layout_for(H, W, T, p, length, nf):
    lay = layout_for(H, W, T, p)
    assert lay["length"] == length == sequence_length(H, W, T, p)
    assert lay["nextframe"] == nf
    with pytest.raises(LayoutError):
        layout_for(H + 1, W, T, p) if p > 1 else layout_for(0, W, T, p)


def test_layout_kinds_invariants():
    lay = Layout(6, 4, 2, 2)
    k = lay.kinds()
    frame = k[: len(k) // 2]
    assert frame.tolist() == [P, P, NL] * 3 + [NF]


def test_grid_file_round_trip(tmp_path):
    g = np.random.default_rng(3).standard_normal((4, 6, 2, 3)).astype(np.float32)
    path = tmp_path / "g.lfg"
    write_grid(path, g)
    raw = path.read_bytes()
    assert raw[:4] == b"LFG1" and len(raw) == 20 + 4 * g.size
    assert read_grid(path).tobytes() == g.tobytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        read_grid(path)


def test_pgm_preview(tmp_path):
    g = np.linspace(-1, 1, 8, dtype=np.float32).reshape(2, 4, 1, 1)
    write_pnm(tmp_path / "a.pgm", g)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n4 2\n255\n")
    px = np.frombuffer(raw[-8:], dtype=np.uint8)
    assert px[0] == 0 and px[-1] == 255
