import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cntc.texture import (CropSpec, TextureInputError, TextureSet, downsample, generate_mip_chain,
                          load_texture_set, num_mips, parse_manifest, procedural_texture, random_crop,
                          read_image, read_ntxr, write_image, write_ntxr)


def test_num_mips():
    assert num_mips(2048, 2048) == 9
    assert num_mips(64, 64) == 4
    assert num_mips(64, 16) == 4
    assert num_mips(4, 4) == 0


def test_chain_extents_and_coarsest_level():
    chain = generate_mip_chain(procedural_texture(64, 3, seed=1))
    assert chain.M == 4
    assert [lv.h for lv in chain.levels] == [64, 32, 16, 8, 4]
    assert chain[chain.M].h == 4


def test_box_filter_matches_loop():
    rng = np.random.default_rng(0)
    v = rng.random((2, 8, 8))
    ref = np.zeros((2, 4, 4))
    for i in range(4):
        for j in range(4):
            ref[:, i, j] = v[:, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2].mean(axis=(1, 2))
    np.testing.assert_allclose(downsample(v), ref)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([4, 8, 16, 32]))
def test_chain_preserves_mean(seed, size):
    v = np.random.default_rng(seed).random((2, size, size))
    chain = generate_mip_chain(TextureSet(v))
    for lv in chain.levels:
        np.testing.assert_allclose(lv.values.mean(axis=(1, 2)), v.mean(axis=(1, 2)), atol=1e-12)


def test_non_power_of_two_rejected():
    with pytest.raises(TextureInputError):
        generate_mip_chain(TextureSet(np.zeros((1, 12, 16))))


def test_values_outside_unit_interval_rejected():
    with pytest.raises(TextureInputError):
        TextureSet(np.full((1, 4, 4), 1.5))


def test_crop_rules():
    CropSpec(8, 16, 64)
    with pytest.raises(TextureInputError):
        CropSpec(4, 0, 64)
    with pytest.raises(TextureInputError):
        CropSpec(0, 0, 48)
    with pytest.raises(TextureInputError):
        CropSpec(0, 0, 32)


def test_aligned_crop_windows_every_level():
    chain = generate_mip_chain(procedural_texture(256, 2, seed=3))
    crop = random_crop(chain, CropSpec(64, 128, 64))
    assert crop.M == 4
    for m, lv in enumerate(crop.levels):
        f = 1 << m
        np.testing.assert_array_equal(lv.values, chain[m].values[:, 64 // f : (64 + 64) // f, 128 // f : (128 + 64) // f])


def test_unaligned_crop_filters_itself():
    chain = generate_mip_chain(procedural_texture(256, 1, seed=3))
    crop = random_crop(chain, CropSpec(8, 24, 64))
    for m in range(1, crop.M + 1):
        np.testing.assert_allclose(crop[m].values, downsample(crop[m - 1].values))


def test_ntxr_round_trip(tmp_path):
    v = np.random.default_rng(0).random((5, 8, 4)).astype(np.float32)
    write_ntxr(tmp_path / "a.ntxr", v)
    np.testing.assert_array_equal(read_ntxr(tmp_path / "a.ntxr"), v)


def test_png_scaling(tmp_path):
    v = np.random.default_rng(0).random((3, 8, 8))
    write_image(tmp_path / "a.png", v)
    back = read_image(tmp_path / "a.png")
    assert np.max(np.abs(back - v)) <= 0.5 / 255 + 1e-12
    write_image(tmp_path / "b.png", v[:1], bits=16)
    back16 = read_image(tmp_path / "b.png")
    assert np.max(np.abs(back16 - v[:1])) <= 0.5 / 65535 + 1e-12


def test_manifest_stacks_channels(tmp_path):
    rng = np.random.default_rng(0)
    write_image(tmp_path / "albedo.png", rng.random((3, 16, 16)))
    write_ntxr(tmp_path / "rough.ntxr", rng.random((1, 16, 16)))
    (tmp_path / "manifest.txt").write_text("# set\nalbedo.png diffuse.r diffuse.g diffuse.b\nrough.ntxr\n")
    t = load_texture_set(parse_manifest(tmp_path / "manifest.txt"))
    assert t.c == 4
    assert t.channel_labels == ["diffuse.r", "diffuse.g", "diffuse.b", "rough.0"]


def test_manifest_extent_mismatch(tmp_path):
    write_ntxr(tmp_path / "a.ntxr", np.zeros((1, 16, 16)))
    write_ntxr(tmp_path / "b.ntxr", np.zeros((1, 8, 8)))
    (tmp_path / "m.txt").write_text("a.ntxr\nb.ntxr\n")
    with pytest.raises(TextureInputError):
        load_texture_set(parse_manifest(tmp_path / "m.txt"))


def test_procedural_is_seeded():
    a = procedural_texture(32, 4, seed=5).values
    b = procedural_texture(32, 4, seed=5).values
    c = procedural_texture(32, 4, seed=6).values
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.min() >= 0.05 - 1e-12 and a.max() <= 0.95 + 1e-12
