"""Small fixtures shared by unit and acceptance tests."""
import numpy as np

from cntc import model as mdl
from cntc.texture import generate_mip_chain, num_mips, procedural_texture


def toy_config(variant="full", channels=2, size=16, **kw):
    base = dict(channels=channels, mips=num_mips(size, size), latent_channels=4, encoder_width=4,
                encoder_res_blocks=1, grid_channels=(2, 3), synth_width=8, synth_depth=1, pe_freqs=2,
                variant=variant)
    base.update(kw)
    return mdl.ModelConfig(**base)


def toy_problem(variant="full", size=16, channels=2, n=24, seed=0, **kw):
    """(chain arrays, float64 params, config, xs, ys, ms) for gradient checks."""
    cfg = toy_config(variant, channels, size, **kw)
    rng = np.random.default_rng(seed)
    params = mdl.init_params(cfg, rng, grid_shape=(size // 8, size // 8), dtype=np.float64)
    chain = [lv.values for lv in generate_mip_chain(procedural_texture(size, channels, seed=seed)).levels]
    ms = rng.integers(0, cfg.mips + 1, n)
    xs, ys = [], []
    for m in ms:
        hm = size >> m
        x, y = mdl.texel_centers(rng.integers(0, hm), rng.integers(0, hm), hm, hm)
        xs.append(x)
        ys.append(y)
    return chain, params, cfg, np.array(xs), np.array(ys), ms
