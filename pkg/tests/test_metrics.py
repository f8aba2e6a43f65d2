import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cntc import metrics as mt
from cntc.texture import generate_mip_chain, procedural_texture


@pytest.fixture(scope="module")
def chain():
    return [lv.values for lv in generate_mip_chain(procedural_texture(64, 3, seed=4)).levels]


def test_psnr_uniform_error(chain):
    shifted = [lv + 0.1 for lv in chain]
    assert mt.psnr_mips(chain, shifted) == pytest.approx(20.0, abs=1e-4)


def test_psnr_identical_is_inf(chain):
    assert mt.psnr_mips(chain, chain) == math.inf


def test_psnr_is_joint_not_averaged(chain):
    # error only on the 4x4 level counts by its texel share
    rec = [lv.copy() for lv in chain]
    rec[-1] = rec[-1] + 0.1
    n = sum(lv.size for lv in chain)
    expect = -10 * math.log10(0.01 * chain[-1].size / n)
    assert mt.psnr_mips(chain, rec) == pytest.approx(expect)


def test_ssim_identical_is_one(chain):
    assert mt.ssim_mips(chain, chain) == 1.0


def test_ssim_matches_direct_formula():
    # plane exactly the window size: one valid position, so SSIM is the closed form
    rng = np.random.default_rng(0)
    a, b = rng.random((11, 11)), rng.random((11, 11))
    g = np.exp(-((np.arange(11) - 5) ** 2) / (2 * 1.5 ** 2))
    w2 = np.outer(g, g) / np.outer(g, g).sum()
    mu_a, mu_b = (w2 * a).sum(), (w2 * b).sum()
    va = (w2 * a * a).sum() - mu_a ** 2
    vb = (w2 * b * b).sum() - mu_b ** 2
    cab = (w2 * a * b).sum() - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ref = (2 * mu_a * mu_b + c1) * (2 * cab + c2) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    assert mt.ssim_plane(a, b) == pytest.approx(max(ref, 0.0), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([4, 8, 16, 32]))
def test_ssim_bounded(seed, size):
    rng = np.random.default_rng(seed)
    a, b = rng.random((size, size)), rng.random((size, size))
    assert 0.0 <= mt.ssim_plane(a, b) <= 1.0


def test_shape_mismatch(chain):
    with pytest.raises(mt.MetricInputError):
        mt.psnr_mips(chain, chain[:-1])


def curve(rates, qualities):
    return mt.RDCurve([mt.RDPoint(r, q) for r, q in zip(rates, qualities)])


@pytest.mark.parametrize("piecewise", [False, True])
def test_bd_rate_of_scaled_curve(piecewise):
    rates = np.array([0.1, 0.2, 0.4, 0.8])
    q = np.array([30.0, 33.0, 35.5, 37.0])
    assert mt.bd_rate(curve(rates, q), curve(rates * 0.9, q), piecewise) == pytest.approx(-10.0, abs=1e-6)


def test_bd_rate_identity_is_zero():
    c = curve([0.1, 0.3, 0.5], [30, 34, 36])
    assert mt.bd_rate(c, c) == pytest.approx(0.0, abs=1e-9)


def test_bd_rate_no_overlap():
    with pytest.raises(mt.EvaluationError):
        mt.bd_rate(curve([0.1, 0.2], [20, 25]), curve([0.1, 0.2], [30, 35]))


def test_rd_point_validation():
    with pytest.raises(mt.MetricInputError):
        mt.RDPoint(0.0, 30.0)
    with pytest.raises(mt.MetricInputError):
        curve([0.2, 0.2], [30, 31])


def test_bppc():
    bits = {"grid_bits": 1000, "weight_bits": 24, "header_bits": 100, "grid_padding_bits": 4}
    assert mt.bppc(bits, 8, 8, 2) == 1024 / 128
    assert mt.bppc(bits, 8, 8, 2, include_header=True) == 1128 / 128


def test_csv_round_trip_and_order():
    text = mt.emit_rd_csv([("b", 0.5, 30.123456789, 0.9), ("a", 0.2, math.inf, 1.0), ("a", 0.1, 28.0, None)])
    lines = text.splitlines()
    assert lines[0] == "label,bppc,psnr_db,ssim"
    assert lines[1] == "a,0.1,28,"
    assert lines[2] == "a,0.2,inf,1"
    assert lines[3] == "b,0.5,30.1235,0.9"
    rows = mt.parse_rd_csv(text)
    assert rows[1]["psnr_db"] == math.inf and rows[0]["ssim"] is None


def test_csv_errors_carry_line_numbers():
    with pytest.raises(mt.CSVFormatError) as e:
        mt.parse_rd_csv("label,bppc,psnr_db,ssim\na,0.1,30,0.9\nb,zero,31,0.9\n")
    assert e.value.line == 3
    with pytest.raises(mt.CSVFormatError) as e:
        mt.parse_rd_csv("label,psnr_db\n")
    assert e.value.line == 1


def test_channel_groups():
    assert mt.channel_groups(["diffuse.r", "diffuse.g", "normal.x", "rough"], 4) == {
        "diffuse": [0, 1], "normal": [2], "rough": [3]}
    assert mt.channel_groups([], 2) == {"all": [0, 1]}
