import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cntc import training as tr
from cntc.texture import TextureInputError, TextureSet, procedural_texture


def test_schedule_for_2048():
    stages = tr.default_schedule(2048, 2048)
    got = [(s.crop_size, s.learning_rate, s.steps, s.mip_range, s.quantizer_mode) for s in stages]
    assert got == [
        (256, 1e-4, 160_000, (0, 8), "noise"),
        (512, 5e-5, 80_000, (0, 9), "noise"),
        (512, 1e-5, 20_000, (0, 9), "ste"),
    ]


def test_small_schedule_ends_with_ste():
    stages = tr.default_schedule(64, 64, steps=1000)
    assert [s.quantizer_mode for s in stages] == ["noise", "ste"]
    assert sum(s.steps for s in stages) == 1000
    assert stages[0].crop_size == 64 and stages[0].mip_range == (0, 4)


def test_parse_stages():
    stages = tr.parse_stages("64:1e-3:100:0-4:noise; 64:1e-4:10:0-4:ste")
    assert stages[1] == tr.TrainStage(64, 1e-4, 10, (0, 4), "ste")
    with pytest.raises(ValueError):
        tr.parse_stages("64:1e-3:100:0-4:round")


@pytest.mark.parametrize("M", [1, 4, 9])
def test_mip_pmf(M):
    pmf = tr.MipSampler(M).pmf()
    assert pmf.sum() == pytest.approx(1.0)
    geo = 4.0 ** -np.arange(M + 1)
    np.testing.assert_allclose(pmf, 0.9 * geo / geo.sum() + 0.1 / (M + 1))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 9), st.integers(0, 10_000))
def test_mip_samples_in_range(M, seed):
    draws = tr.MipSampler(M).sample(np.random.default_rng(seed), 500)
    assert draws.min() >= 0 and draws.max() <= M


def test_config_text_round_trip():
    cfg = tr.TrainConfig(seed=9, grid_channels=(4, 12), learning_rate=3e-4, stages="64:1e-3:10:0-4:noise")
    assert tr.parse_config_text(cfg.to_text()) == cfg


def test_config_text_rejects_unknown_key():
    with pytest.raises(ValueError, match="line 2"):
        tr.parse_config_text("seed=1\nwidth=3\n")


def test_training_is_deterministic():
    t = procedural_texture(64, 2, seed=1)
    cfg = tr.desk_config(seed=5, steps=3, texels_per_crop=32, heldout_texels=16, synth_width=8)
    a, b = tr.train(t, cfg), tr.train(t, cfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert a.losses == b.losses


def test_mode_trace_and_logs():
    cfg = tr.desk_config(seed=0, steps=10, texels_per_crop=32, heldout_texels=16, synth_width=8, log_every=2)
    res = tr.train(procedural_texture(64, 2, seed=1), cfg)
    assert res.mode_trace == [(0, "noise"), (9, "ste")]
    assert [r["step"] for r in res.losses] == [0, 2, 4, 6, 8, 9]
    assert all(math.isfinite(h) for _, h in res.heldout)


def test_crops_on_larger_texture():
    cfg = tr.desk_config(seed=0, stages="64:1e-3:2:0-4:noise;64:1e-4:1:0-4:ste", texels_per_crop=16,
                         heldout_texels=8, synth_width=8, encoder_width=8)
    res = tr.train(procedural_texture(128, 2, seed=1), cfg)
    assert res.grid_codes[0][0].shape == (8, 16, 16)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises():
    cfg = tr.desk_config(seed=0, steps=3, learning_rate=1e30, texels_per_crop=32, heldout_texels=8,
                         synth_width=8)
    with pytest.raises(tr.TrainingError) as e:
        tr.train(procedural_texture(64, 2, seed=1), cfg)
    assert e.value.step >= 0


def test_bad_extent_rejected():
    with pytest.raises(TextureInputError):
        tr.train(TextureSet(np.zeros((1, 48, 48))), tr.desk_config(steps=1))
