"""Encoder, grid constructors, strided grid samplers, positional encoding and synthesizer.

Coordinate convention: ``x`` runs along columns (width), ``y`` along rows
(height), both in [-1, 1]. A lattice of extent H is addressed with
align-corners mapping ``u = (y + 1) / 2 * (H_eff - 1)`` where ``H_eff`` is the
number of lattice points visited at the request's stride.
"""
from __future__ import annotations

from dataclasses import dataclass, asdict, replace

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .quantization import QuantizerSpec, hard_quantize, noise_surrogate, ste_quantize

PROFILES = {
    "cntc16": {"grid_channels": (8, 8)},
    "cntc32": {"grid_channels": (16, 16)},
    "cntc64": {"grid_channels": (32, 32)},
}

VARIANTS = ("full", "no_encoder", "multires")


@dataclass(frozen=True)
class ModelConfig:
    channels: int
    mips: int  # M of the full texture set; the mip level is normalised by it
    latent_channels: int = 32
    encoder_width: int = 64
    encoder_res_blocks: int = 2
    grid_channels: tuple = (8, 8)
    bits: tuple = (4, 4)
    synth_width: int = 64
    synth_depth: int = 4
    pe_freqs: int = 6
    activation: str = "gelu"
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.synth_depth < 0 or self.pe_freqs < 0:
            raise ValueError("synth_depth and pe_freqs must be non-negative")
        object.__setattr__(self, "grid_channels", tuple(int(v) for v in self.grid_channels))
        object.__setattr__(self, "bits", tuple(int(v) for v in self.bits))

    @property
    def quantizers(self):
        return tuple(QuantizerSpec(b) for b in self.bits)

    @property
    def synth_in(self) -> int:
        return 4 * self.grid_channels[0] + self.grid_channels[1] + 1 + 4 * self.pe_freqs

    @property
    def synth_dims(self) -> list:
        return [self.synth_in] + [self.synth_width] * (self.synth_depth + 1) + [self.channels]

    @property
    def grid_levels(self) -> int:
        return max(self.mips - 2, 1) if self.variant == "multires" else 1

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(1.0 / fan_in)
    return ad.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


def _zeros(shape, dtype):
    return ad.parameter(np.zeros(shape), dtype=dtype)


def init_params(config: ModelConfig, rng: np.random.Generator, grid_shape=None, dtype=np.float32) -> dict:
    """Fresh parameter dict. ``grid_shape`` (h_z, w_z) is needed only for the no-encoder variant."""
    p = {}
    if config.variant == "no_encoder":
        if grid_shape is None:
            raise ValueError("no_encoder variant needs grid_shape")
        for i, cg in enumerate(config.grid_channels):
            p[f"grid{i}"] = ad.parameter(rng.uniform(-0.05, 0.05, size=(cg, *grid_shape)), dtype=dtype)
    else:
        we, cin = config.encoder_width, config.channels
        for s in range(3):
            p[f"enc.s{s}.down.weight"] = _uniform(rng, (we, cin, 5, 5), cin * 25, dtype)
            p[f"enc.s{s}.down.bias"] = _zeros((we,), dtype)
            for r in range(config.encoder_res_blocks):
                for part in ("a", "b"):
                    p[f"enc.s{s}.res{r}.{part}.weight"] = _uniform(rng, (we, we, 3, 3), we * 9, dtype)
                    p[f"enc.s{s}.res{r}.{part}.bias"] = _zeros((we,), dtype)
            cin = we
        p["enc.out.weight"] = _uniform(rng, (config.latent_channels, we, 1, 1), we, dtype)
        p["enc.out.bias"] = _zeros((config.latent_channels,), dtype)
        cz = config.latent_channels
        for lvl in range(config.grid_levels):
            for i, cg in enumerate(config.grid_channels):
                p[f"con{i}.l{lvl}.weight"] = _uniform(rng, (cg, cz, 1, 1), cz, dtype)
                p[f"con{i}.l{lvl}.bias"] = _zeros((cg,), dtype)
    dims = config.synth_dims
    names = ["synth.in"] + [f"synth.block{r}" for r in range(config.synth_depth)] + ["synth.out"]
    for name, n_in, n_out in zip(names, dims[:-1], dims[1:]):
        p[f"{name}.weight"] = _uniform(rng, (n_out, n_in), n_in, dtype)
        p[f"{name}.bias"] = _zeros((n_out,), dtype)
    return p


def synth_layer_names(config: ModelConfig) -> list:
    return ["synth.in"] + [f"synth.block{r}" for r in range(config.synth_depth)] + ["synth.out"]


# ---------------------------------------------------------------------------
# encoder and constructors
# ---------------------------------------------------------------------------

def global_transform(texture, params: dict, config: ModelConfig) -> Tensor:
    """c x h x w texture -> c_z x h/8 x w/8 latent in (-0.5, 0.5)."""
    x = ad._as_tensor(texture)
    _, h, w = x.shape
    if h % 8 or w % 8:
        raise DimensionError(f"encoder input {h}x{w} is not divisible by 8")
    act = config.activation
    for s in range(3):
        x = ad.conv2d(x, params[f"enc.s{s}.down.weight"], params[f"enc.s{s}.down.bias"], stride=2, padding=2)
        x = ad.activation(x, act)
        for r in range(config.encoder_res_blocks):
            y = ad.conv2d(x, params[f"enc.s{s}.res{r}.a.weight"], params[f"enc.s{s}.res{r}.a.bias"], padding=1)
            y = ad.activation(y, act)
            y = ad.conv2d(y, params[f"enc.s{s}.res{r}.b.weight"], params[f"enc.s{s}.res{r}.b.bias"], padding=1)
            x = ad.add(x, y)
    return ad.half_tanh(ad.conv2d(x, params["enc.out.weight"], params["enc.out.bias"]))


def apply_quantizer(x, spec: QuantizerSpec, mode: str, rng=None):
    if mode == "hard":
        return hard_quantize(x, spec)
    if mode == "noise":
        if rng is None:
            raise ValueError("noise mode needs an rng")
        return noise_surrogate(x, spec, rng)
    if mode == "ste":
        return ste_quantize(x, spec)
    if mode == "none":
        return ad._as_tensor(x)
    raise ValueError(f"unknown quantizer mode {mode!r}")


def grid_construct(z, params: dict, config: ModelConfig, i: int, mode: str, rng=None, level: int = 0) -> Tensor:
    """Project the latent to grid i (1x1 conv, then half-tanh) and quantize/surrogate it."""
    pre = ad.half_tanh(ad.conv2d(z, params[f"con{i}.l{level}.weight"], params[f"con{i}.l{level}.bias"]))
    return apply_quantizer(pre, config.quantizers[i], mode, rng)


def mip_to_level(m):
    """Grid-pair level used for mip m by the multi-resolution variant."""
    return np.maximum(np.asarray(m) - 3, 0)


def construct_multires_grids(z, params: dict, config: ModelConfig, levels, mode: str, rng=None) -> list:
    """Grid pairs pooled by 2**l for each l in ``levels``."""
    z = ad._as_tensor(z)
    out = []
    for lvl in levels:
        k = 1 << lvl
        if z.shape[1] % k or z.shape[2] % k:
            raise DimensionError(f"latent {z.shape[1:]} not divisible by pool size {k}")
        pair = []
        for i in range(2):
            pre = ad.half_tanh(ad.conv2d(z, params[f"con{i}.l{lvl}.weight"], params[f"con{i}.l{lvl}.bias"]))
            if k > 1:
                pre = ad.avg_pool2d(pre, k)
            pair.append(apply_quantizer(pre, config.quantizers[i], mode, rng))
        out.append(tuple(pair))
    return out


def build_grids(texture, params: dict, config: ModelConfig, mode: str, rng=None, max_level=None,
                grid_window=None) -> list:
    """Grid-pair list (one entry per level) for a texture (or crop) at mip 0.

    For the no-encoder variant the grids are parameters; ``grid_window``
    (row, col, h, w in lattice cells) selects the part covering a crop.
    """
    if config.variant == "no_encoder":
        pair = []
        for i in range(2):
            g = params[f"grid{i}"]
            if grid_window is not None and tuple(grid_window[2:]) != g.shape[1:]:
                g = ad.crop2d(g, *grid_window)
            pair.append(apply_quantizer(g, config.quantizers[i], mode, rng))
        return [tuple(pair)]
    z = global_transform(texture, params, config)
    if config.variant == "multires":
        n = config.grid_levels if max_level is None else min(config.grid_levels, max_level + 1)
        return construct_multires_grids(z, params, config, range(n), mode, rng)
    return [tuple(grid_construct(z, params, config, i, mode, rng) for i in range(2))]


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------

def stride_for_mip(m):
    m = np.asarray(m)
    return np.where(m > 3, 2 ** np.maximum(m - 3, 0), 1)


def lattice_indices(h: int, w: int, xs, ys, strides):
    """Top-left/bottom-right corner indices and fractional offsets on a (strided) lattice.

    Returns r0, r1, c0, c1 (absolute lattice indices) and fu, fv (row/column
    fractions in [0, 1]).
    """
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    s = np.broadcast_to(np.asarray(strides, dtype=np.int64), xs.shape)
    h_eff = (h - 1) // s + 1
    w_eff = (w - 1) // s + 1
    u = np.clip((ys + 1.0) / 2.0 * (h_eff - 1), 0.0, h_eff - 1)
    v = np.clip((xs + 1.0) / 2.0 * (w_eff - 1), 0.0, w_eff - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), np.maximum(h_eff - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), np.maximum(w_eff - 2, 0))
    fu = u - i0
    fv = v - j0
    i1 = np.minimum(i0 + 1, h_eff - 1)
    j1 = np.minimum(j0 + 1, w_eff - 1)
    return s * i0, s * i1, s * j0, s * j1, fu, fv


def _sampling_strides(ms, strided: bool):
    return stride_for_mip(ms) if strided else np.ones_like(np.asarray(ms))


def grid_sample_concat(grid, xs, ys, ms, strided: bool = True) -> Tensor:
    """N x 4c: corner features concatenated as top-left, top-right, bottom-left, bottom-right."""
    grid = ad._as_tensor(grid)
    _, h, w = grid.shape
    r0, r1, c0, c1, _, _ = lattice_indices(h, w, xs, ys, _sampling_strides(ms, strided))
    return ad.gather_corners(grid, r0, r1, c0, c1)


def grid_sample_bilinear(grid, xs, ys, ms, strided: bool = True) -> Tensor:
    """N x c: bilinear blend of the same four corners."""
    grid = ad._as_tensor(grid)
    _, h, w = grid.shape
    r0, r1, c0, c1, fu, fv = lattice_indices(h, w, xs, ys, _sampling_strides(ms, strided))
    return ad.gather_bilinear(grid, r0, r1, c0, c1, fu, fv)


def positional_encode(xs, ys, n_freqs: int) -> np.ndarray:
    """N x 4F features [sin(2^k pi x), cos(2^k pi x), sin(2^k pi y), cos(2^k pi y)] per band k."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
    out = np.empty((xs.shape[0], 4 * n_freqs))
    for k in range(n_freqs):
        f = (2.0 ** k) * np.pi
        out[:, 4 * k] = np.sin(f * xs)
        out[:, 4 * k + 1] = np.cos(f * xs)
        out[:, 4 * k + 2] = np.sin(f * ys)
        out[:, 4 * k + 3] = np.cos(f * ys)
    return out


def normalized_mip(ms, n_mips: int) -> np.ndarray:
    ms = np.atleast_1d(np.asarray(ms, dtype=np.float64))
    return ms / n_mips if n_mips > 0 else np.zeros_like(ms)


# ---------------------------------------------------------------------------
# synthesizer
# ---------------------------------------------------------------------------

def synthesize(inputs, params: dict, config: ModelConfig) -> Tensor:
    """MLP with additive residual blocks; ``inputs`` is N x synth_in."""
    inputs = ad._as_tensor(inputs)
    if inputs.shape[1] != config.synth_in:
        raise DimensionError(f"synthesizer expects {config.synth_in} inputs, got {inputs.shape[1]}")
    h = ad.activation(ad.linear(inputs, params["synth.in.weight"], params["synth.in.bias"]), config.activation)
    for r in range(config.synth_depth):
        y = ad.linear(h, params[f"synth.block{r}.weight"], params[f"synth.block{r}.bias"])
        h = ad.add(h, ad.activation(y, config.activation))
    return ad.linear(h, params["synth.out.weight"], params["synth.out.bias"])


def synthesize_texel(y0, y1, m_norm, p, params: dict, config: ModelConfig) -> Tensor:
    """Single-texel convenience wrapper; vectors in, length-c tensor out."""
    y0, y1 = ad._as_tensor(y0), ad._as_tensor(y1)
    dt = y0.dtype
    parts = [ad.reshape(y0, (1, -1)), ad.reshape(y1, (1, -1)),
             Tensor(np.array([[m_norm]], dtype=dt)), Tensor(np.asarray(p, dtype=dt).reshape(1, -1))]
    out = synthesize(ad.concat(parts, axis=1), params, config)
    return ad.reshape(out, (config.channels,))


def synth_inputs(grids: list, config: ModelConfig, xs, ys, ms) -> Tensor:
    """Sampler features + normalized mip + positional encoding, for requests at a single grid level."""
    ms = np.atleast_1d(np.asarray(ms))
    if config.variant == "multires":
        lv = mip_to_level(ms)
        if np.any(lv != lv[0]):
            raise ValueError("synth_inputs needs requests that share one grid level")
        g0, g1 = grids[int(lv[0])]
        strided = False
    else:
        g0, g1 = grids[0]
        strided = True
    dt = g0.dtype
    y0 = grid_sample_concat(g0, xs, ys, ms, strided)
    y1 = grid_sample_bilinear(g1, xs, ys, ms, strided)
    mcol = normalized_mip(ms, config.mips).astype(dt)[:, None]
    pe = positional_encode(xs, ys, config.pe_freqs).astype(dt)
    parts = [y0, y1, Tensor(mcol)]
    if config.pe_freqs:
        parts.append(Tensor(pe))
    return ad.concat(parts, axis=1)


def predict(grids: list, params: dict, config: ModelConfig, xs, ys, ms) -> Tensor:
    return synthesize(synth_inputs(grids, config, xs, ys, ms), params, config)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def texel_centers(row, col, h_m: int, w_m: int):
    """(x, y) of texel centres at a mip with extents h_m x w_m."""
    x = 2.0 * (np.asarray(col, dtype=np.float64) + 0.5) / w_m - 1.0
    y = 2.0 * (np.asarray(row, dtype=np.float64) + 0.5) / h_m - 1.0
    return x, y


def texel_at(values: np.ndarray, xs, ys) -> np.ndarray:
    """Nearest-texel lookup of a c x h x w array at (x, y); returns N x c."""
    _, h, w = values.shape
    col = np.clip(np.floor((np.asarray(xs) + 1.0) / 2.0 * w).astype(np.int64), 0, w - 1)
    row = np.clip(np.floor((np.asarray(ys) + 1.0) / 2.0 * h).astype(np.int64), 0, h - 1)
    return values[:, row, col].T


def forward_loss(chain, params: dict, config: ModelConfig, xs, ys, ms, mode: str, rng=None) -> Tensor:
    """Mean squared texel error over a batch of requests against the mip chain.

    ``chain`` is a sequence of c x h_m x w_m arrays (index = mip level) or a MipChain.
    """
    levels = [getattr(lv, "values", lv) for lv in getattr(chain, "levels", chain)]
    xs, ys, ms = (np.atleast_1d(np.asarray(a)) for a in (xs, ys, ms))
    if xs.size == 0:
        raise ValueError("empty batch")
    dt = params[next(iter(params))].dtype
    grids = build_grids(levels[0].astype(dt), params, config, mode, rng)
    preds, targets = [], []
    keys = mip_to_level(ms) if config.variant == "multires" else np.zeros_like(ms)
    for key in np.unique(keys):
        sel = keys == key
        preds.append(predict(grids, params, config, xs[sel], ys[sel], ms[sel]))
        tgt = np.empty((int(sel.sum()), levels[0].shape[0]))
        for m in np.unique(ms[sel]):
            hit = ms[sel] == m
            tgt[hit] = texel_at(levels[m], xs[sel][hit], ys[sel][hit])
        targets.append(tgt)
    pred = preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)
    return ad.mse(pred, np.concatenate(targets).astype(dt))


def params_to_numpy(params: dict) -> dict:
    return {k: v.data.copy() for k, v in params.items()}


def with_depth(config: ModelConfig, depth: int) -> ModelConfig:
    return replace(config, synth_depth=depth)
