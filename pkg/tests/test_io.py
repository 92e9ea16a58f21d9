import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ibf.io import (
    SYNTH_PRESETS,
    CutError,
    SynthSpec,
    load_cut,
    load_image,
    make_synthetic_cut,
    render_ring,
    save_cut,
    save_frame,
    to_bytes,
)


def write_rgb(path, arr):
    Image.fromarray(np.asarray(arr, np.uint8), mode="RGB").save(path)
    return path


@pytest.mark.parametrize("byte,value", [(255, 1.0), (0, 0.0), (128, 128 / 255)])
def test_decode_values(tmp_path, byte, value):
    p = write_rgb(tmp_path / "a.png", np.full((2, 3, 3), byte))
    img = load_image(p)
    assert img.shape == (3, 2, 3) and img.dtype == np.float32
    assert np.all(img == np.float32(value))


@pytest.mark.parametrize("value,byte", [(0.5, 128), (1.0, 255), (0.0, 0), (1.7, 255), (-0.2, 0), (0.499 / 255, 0)])
def test_encode_rounding(value, byte):
    assert to_bytes(np.full((3, 1, 1), value))[0, 0, 0] == byte


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_roundtrip_within_quantisation(tmp_path_factory, seed):
    img = np.random.default_rng(seed).random((3, 5, 7)).astype(np.float32)
    p = save_frame(img, tmp_path_factory.mktemp("rt") / "x.png")
    assert np.max(np.abs(load_image(p) - img)) <= 0.5 / 255 + 1e-7


def test_alpha_composited_over_white(tmp_path):
    rgba = np.zeros((1, 2, 4), np.uint8)
    rgba[0, 0] = (0, 0, 0, 0)      # fully transparent black -> white
    rgba[0, 1] = (0, 0, 0, 255)    # opaque black stays black
    Image.fromarray(rgba, mode="RGBA").save(tmp_path / "a.png")
    img = load_image(tmp_path / "a.png")
    np.testing.assert_allclose(img[:, 0, 0], 1.0)
    np.testing.assert_allclose(img[:, 0, 1], 0.0)


def test_grayscale_promoted(tmp_path):
    Image.fromarray(np.array([[0, 51]], np.uint8), mode="L").save(tmp_path / "g.png")
    img = load_image(tmp_path / "g.png")
    assert img.shape == (3, 1, 2)
    np.testing.assert_allclose(img[:, 0, 1], 0.2)


def test_sixteen_bit_uses_high_byte(tmp_path):
    Image.fromarray(np.array([[0x80FF, 0xFFFF]], np.uint16)).save(tmp_path / "d.png")
    img = load_image(tmp_path / "d.png")
    np.testing.assert_allclose(img[0, 0], [0x80 / 255, 1.0])


def test_lexicographic_order(tmp_path):
    for name, v in [("b.png", 20), ("a10.png", 10), ("a2.png", 30)]:
        write_rgb(tmp_path / name, np.full((2, 2, 3), v))
    (tmp_path / "notes.txt").write_text("ignored")
    cut = load_cut(tmp_path)
    assert cut.names == ["a10.png", "a2.png", "b.png"]
    assert [round(f[0, 0, 0] * 255) for f in cut.frames] == [10, 30, 20]


def test_mixed_sizes_fatal(tmp_path):
    write_rgb(tmp_path / "0001.png", np.zeros((4, 4, 3)))
    write_rgb(tmp_path / "0002.png", np.zeros((4, 4, 3)))
    write_rgb(tmp_path / "0003.png", np.zeros((4, 6, 3)))
    with pytest.raises(CutError, match="0003.png"):
        load_cut(tmp_path)


def test_too_few_frames(tmp_path):
    write_rgb(tmp_path / "0001.png", np.zeros((4, 4, 3)))
    with pytest.raises(CutError):
        load_cut(tmp_path)
    with pytest.raises(CutError):
        load_cut(tmp_path / "missing")


def test_long_cut(tmp_path):
    frames = [np.full((3, 8, 8), i / 20, np.float32) for i in range(21)]
    save_cut(frames, tmp_path)
    assert load_cut(tmp_path).n_frames == 21


def test_synthetic_cut_files(tmp_path):
    cut, mids = make_synthetic_cut(SYNTH_PRESETS["circle"], tmp_path)
    assert cut.n_frames == 9 and len(mids) == 8 and cut.size == (128, 128)
    assert len(list(tmp_path.glob("*.png"))) == 9
    assert sorted(p.name for p in (tmp_path / "mid").glob("*.png"))[0] == "0001_5.png"
    assert load_cut(tmp_path).n_frames == 9


def test_synthetic_static_frames_identical():
    cut, mids = make_synthetic_cut(SYNTH_PRESETS["circle-static"])
    assert all(f.tobytes() == cut.frames[0].tobytes() for f in cut.frames + mids)


def test_ring_moves_with_velocity():
    spec = SynthSpec(width=64, height=64, velocity=(4.0, 0.0), radius=8)
    a, b = render_ring(spec, 0), render_ring(spec, 1)
    np.testing.assert_array_equal(a[:, :, :-4], b[:, :, 4:])
    assert a.min() == 0.0 and a.max() == 1.0
