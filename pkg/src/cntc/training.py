"""Staged per-texture training: crop schedule, mip sampling, quantizer-mode switching."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .quantization import quantize
from .texture import CropSpec, TextureSet, num_mips, pyramid

log = logging.getLogger(__name__)

# small-input schedule: total steps per mip-0 texel for extents <= 256
STEPS_PER_TEXEL = 0.75

# CPU-minute overfit runs on small textures: shorter, faster, fewer texels per crop
DESK_OVERRIDES = {"steps": 3000, "texels_per_crop": 1024, "learning_rate": 1e-3}


class TrainingError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainStage:
    crop_size: int
    learning_rate: float
    steps: int
    mip_range: tuple  # inclusive (lo, hi)
    quantizer_mode: str

    def __post_init__(self):
        if self.steps <= 0:
            raise ValueError("stage needs a positive step count")
        if self.crop_size < 1 or self.crop_size & (self.crop_size - 1):
            raise ValueError(f"crop size {self.crop_size} is not a power of two")
        if self.quantizer_mode not in ("noise", "ste"):
            raise ValueError(f"quantizer mode must be noise or ste, got {self.quantizer_mode!r}")


@dataclass(frozen=True)
class MipSampler:
    """Mixture of a truncated geometric law P(m) ~ 4**-m and a uniform law on 0..M."""

    M: int
    rate: float = math.log(4.0)
    uniform_fraction: float = 0.10

    def pmf(self) -> np.ndarray:
        m = np.arange(self.M + 1)
        geo = np.exp(-self.rate * m)
        geo /= geo.sum()
        return (1.0 - self.uniform_fraction) * geo + self.uniform_fraction / (self.M + 1)

    def sample(self, rng: np.random.Generator, size=None):
        n = 1 if size is None else size
        m = np.arange(self.M + 1)
        geo = np.exp(-self.rate * m)
        cdf = np.cumsum(geo / geo.sum())
        cdf[-1] = 1.0
        branch = rng.random(n)
        u = rng.random(n)
        geo_draw = np.searchsorted(cdf, u, side="right")
        uni_draw = np.minimum((u * (self.M + 1)).astype(np.int64), self.M)
        out = np.where(branch < self.uniform_fraction, uni_draw, geo_draw)
        return int(out[0]) if size is None else out


def sample_mip_level(sampler: MipSampler, rng: np.random.Generator) -> int:
    return sampler.sample(rng)


def default_schedule(h: int, w: int, steps: int | None = None, lr: float = 1e-4) -> list:
    """Training stages for an h x w texture set.

    Extents above 256 follow the 2048^2 recipe: crop 256 then 512 (lr halving,
    step count halving), then an STE stage at lr 1e-5 for 20000 steps. Mip
    ranges stop where a crop window shrinks to one texel. Smaller inputs train on
    the whole texture in one noise stage followed by STE for the last 10%.
    ``steps`` overrides the total step count of the small-input schedule.
    """
    M = num_mips(h, w)
    extent = min(h, w)
    if extent <= 256:
        total = steps if steps is not None else max(100, int(round(STEPS_PER_TEXEL * h * w)))
        n_ste = max(1, int(round(0.1 * total)))
        crop = extent
        return [
            TrainStage(crop, lr, total - n_ste, (0, M), "noise"),
            TrainStage(crop, lr, n_ste, (0, M), "ste"),
        ]
    stages = []
    crop, stage_lr, n = 256, lr, 160_000
    while crop <= min(extent, 512):
        stages.append(TrainStage(crop, stage_lr, n, (0, min(M, int(math.log2(crop)))), "noise"))
        crop, stage_lr, n = crop * 2, stage_lr / 2, n // 2
    last = stages[-1]
    stages.append(TrainStage(last.crop_size, 1e-5, 20_000, last.mip_range, "ste"))
    return stages


def parse_stages(text: str) -> list:
    """``crop:lr:steps:lo-hi:mode`` entries separated by ``;`` or ``,``."""
    stages = []
    for chunk in text.replace(",", ";").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        crop, lr, steps, mips, mode = chunk.split(":")
        lo, hi = mips.split("-")
        stages.append(TrainStage(int(crop), float(lr), int(steps), (int(lo), int(hi)), mode))
    return stages


@dataclass
class TrainConfig:
    profile: str = "cntc16"
    variant: str = "full"
    seed: int = 0
    batch_size: int = 4
    texels_per_crop: int = 4096
    latent_channels: int = 32
    encoder_width: int = 64
    encoder_res_blocks: int = 2
    grid_channels: tuple | None = None  # None -> from profile
    bits: int = 4
    synth_width: int = 64
    synth_depth: int = 4
    pe_freqs: int = 6
    activation: str = "gelu"
    learning_rate: float = 1e-4
    steps: int | None = None
    stages: str | None = None
    log_every: int = 100
    heldout_texels: int = 1024

    def model_config(self, channels: int, M: int) -> mdl.ModelConfig:
        if self.grid_channels is not None:
            grid = tuple(self.grid_channels)
        elif self.profile in mdl.PROFILES:
            grid = mdl.PROFILES[self.profile]["grid_channels"]
        else:
            raise ValueError(f"profile {self.profile!r} needs explicit grid_channels")
        return mdl.ModelConfig(
            channels=channels, mips=M, latent_channels=self.latent_channels,
            encoder_width=self.encoder_width, encoder_res_blocks=self.encoder_res_blocks,
            grid_channels=grid, bits=(self.bits, self.bits), synth_width=self.synth_width,
            synth_depth=self.synth_depth, pe_freqs=self.pe_freqs, activation=self.activation,
            variant=self.variant,
        )

    def schedule(self, h: int, w: int) -> list:
        if self.stages:
            return parse_stages(self.stages)
        return default_schedule(h, w, steps=self.steps, lr=self.learning_rate)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def desk_config(seed: int = 0, **overrides) -> TrainConfig:
    return replace(TrainConfig(seed=seed, **DESK_OVERRIDES), **overrides)


def _coerce(name, raw: str):
    ints = {"seed", "batch_size", "texels_per_crop", "latent_channels", "encoder_width",
            "encoder_res_blocks", "bits", "synth_width", "synth_depth", "pe_freqs", "steps",
            "log_every", "heldout_texels"}
    if name in ints:
        return int(raw)
    if name == "learning_rate":
        return float(raw)
    if name == "grid_channels":
        return tuple(int(v) for v in raw.replace(" ", "").split(","))
    return raw


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Plain ``key=value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    cfg = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, value)
    return replace(cfg, **updates)


@dataclass
class TrainResult:
    config: mdl.ModelConfig
    train_config: TrainConfig
    params: dict  # name -> np.ndarray
    grid_codes: list  # per level: (codes0, codes1)
    losses: list = field(default_factory=list)  # dicts: step, stage, loss, lr
    heldout: list = field(default_factory=list)  # (step, loss)
    mode_trace: list = field(default_factory=list)  # (step, mode) at every change
    h: int = 0
    w: int = 0
    channel_labels: list = field(default_factory=list)


def _crop_targets(values: np.ndarray, n_levels: int):
    return pyramid(values, n_levels)


def _draw_crop(rng, h, w, size):
    if size >= h and size >= w:
        return 0, 0, h, w
    size = min(size, h, w)
    row = 8 * int(rng.integers(0, (h - size) // 8 + 1))
    col = 8 * int(rng.integers(0, (w - size) // 8 + 1))
    if size >= 64:
        CropSpec(row, col, size)  # validates alignment/size
    return row, col, size, size


def _draw_texels(rng, h_m, w_m, n):
    total = h_m * w_m
    if total <= n:
        idx = np.arange(total)
    else:
        idx = rng.integers(0, total, size=n)
    return idx // w_m, idx % w_m


def _export_grids(values, params, config):
    """Hard-quantized grid codes for the full texture."""
    dt = params[next(iter(params))].dtype
    pre = mdl.build_grids(values.astype(dt), params, config, "none")
    return [tuple(quantize(g.data, q) for g, q in zip(pair, config.quantizers)) for pair in pre]


def train(texture: TextureSet, cfg: TrainConfig, progress=None) -> TrainResult:
    """Fit the codec to one texture set. Deterministic for a given ``cfg.seed``."""
    texture.validate_extents()
    values = np.asarray(texture.values, dtype=np.float64)
    c, h, w = values.shape
    M = num_mips(h, w)
    config = cfg.model_config(c, M)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    params = mdl.init_params(config, rng, grid_shape=(h // 8, w // 8))
    opt_state = ad.AdamState()
    stages = cfg.schedule(h, w)
    log.info("resolved config:\n%s", cfg.to_text())
    log.info("schedule: %s", stages)

    full_levels = int(math.log2(max(h, w))) + 1  # down to 1 texel on the long axis
    full_pyr = [v.astype(np.float32) for v in pyramid(values, full_levels)]

    held_rng = np.random.Generator(np.random.Philox(cfg.seed + 1))
    held_ms = MipSampler(M).sample(held_rng, cfg.heldout_texels)
    held_x, held_y = [], []
    for m in held_ms:
        hm, wm = max(h >> m, 1), max(w >> m, 1)
        r, cc = int(held_rng.integers(0, hm)), int(held_rng.integers(0, wm))
        x, y = mdl.texel_centers(r, cc, hm, wm)
        held_x.append(x)
        held_y.append(y)
    held = (np.array(held_x), np.array(held_y), held_ms)

    result = TrainResult(config=config, train_config=cfg, params={}, grid_codes=[],
                         h=h, w=w, channel_labels=list(texture.channel_labels))
    mode = None
    step = 0
    for si, stage in enumerate(stages):
        if stage.quantizer_mode != mode:
            mode = stage.quantizer_mode
            result.mode_trace.append((step, mode))
        lo, hi = stage.mip_range
        sampler = MipSampler(hi - lo)
        for _ in range(stage.steps):
            loss = _train_step(params, config, values, full_pyr, stage, sampler, lo, cfg, rng, mode)
            ad.adam_step(params, {k: p.grad for k, p in params.items()}, opt_state, stage.learning_rate)
            if cfg.variant == "no_encoder":
                for i, q in enumerate(config.quantizers):
                    np.clip(params[f"grid{i}"].data, q.lo, q.hi, out=params[f"grid{i}"].data)
            for p in params.values():
                p.grad = None
            if not np.isfinite(loss):
                raise TrainingError(step, loss)
            if step % cfg.log_every == 0 or step == sum(s.steps for s in stages) - 1:
                result.losses.append({"step": step, "stage": si, "loss": float(loss), "lr": stage.learning_rate})
                hl = float(mdl.forward_loss(full_pyr, params, config, *held, "hard").data)
                if not np.isfinite(hl):
                    raise TrainingError(step, hl)
                result.heldout.append((step, hl))
                if progress:
                    progress(step, si, float(loss), hl)
            step += 1

    result.params = mdl.params_to_numpy(params)
    result.grid_codes = _export_grids(values, params, config)
    return result


def _train_step(params, config, values, full_pyr, stage, sampler, mip_lo, cfg, rng, mode):
    _, h, w = values.shape
    dt = np.float32
    groups = {}
    for _ in range(cfg.batch_size):
        crop = _draw_crop(rng, h, w, stage.crop_size)
        m = mip_lo + sampler.sample(rng)
        ch, cw = crop[2], crop[3]
        hm, wm = max(ch >> m, 1), max(cw >> m, 1)
        rows, cols = _draw_texels(rng, hm, wm, cfg.texels_per_crop)
        groups.setdefault(crop, []).append((m, rows, cols, hm, wm))
    preds, targets = [], []
    for crop, items in groups.items():
        row, col, ch, cw = crop
        if (ch, cw) == (h, w):
            pyr = full_pyr
        else:
            n_levels = max(m for m, *_ in items) + 1
            pyr = [v.astype(dt) for v in pyramid(values[:, row : row + ch, col : col + cw], n_levels)]
        window = (row // 8, col // 8, ch // 8, cw // 8)
        max_level = int(math.log2(min(ch, cw) // 8)) if config.variant == "multires" else None
        grids = mdl.build_grids(pyr[0], params, config, mode, rng, max_level=max_level, grid_window=window)
        for m, rows, cols, hm, wm in items:
            xs, ys = mdl.texel_centers(rows, cols, hm, wm)
            ms = np.full(xs.shape, m)
            if config.variant == "multires":
                # a crop too small for this mip's level falls back to its coarsest level
                lv = min(int(mdl.mip_to_level(m)), len(grids) - 1)
                g = [grids[lv]] * (int(mdl.mip_to_level(m)) + 1)
                preds.append(mdl.predict(g, params, config, xs, ys, ms))
            else:
                preds.append(mdl.predict(grids, params, config, xs, ys, ms))
            targets.append(pyr[m][:, rows, cols].T)
    pred = preds[0] if len(preds) == 1 else ad.concat(preds, axis=0)
    loss = ad.mse(pred, np.concatenate(targets).astype(dt))
    loss.backward()
    return float(loss.data)
