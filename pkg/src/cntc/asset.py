"""NTCA container: bit-packed grid codes + binary16 synthesizer weights, and random-access decode.

Layout (all integers little-endian)::

    "NTCA" | u32 version | u32 h | u32 w | u16 c | u16 M | u16 c_g0 | u16 c_g1
    | u8 B_0 | u8 B_1 | u8 F | u8 variant | u8 flags | u8 activation
    | u16 n_dims | u32 dims[n_dims]                      synthesizer layer widths
    | u16 n_labels | (u8 len, utf-8 bytes) * n_labels
    | per grid level l, per grid i: codes packed LSB-first at B_i bits,
      channel-major then row-major, padded to a whole byte
    | per synthesizer layer: weight (out x in, row-major) then bias, binary16
    | [checkpoint flag only] u32 n | (u16 len, name, u8 ndim, u32 dims, f32 data) * n
    | u32 CRC-32 of everything before it
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from .quantization import QuantizerSpec
from .texture import TextureSet

MAGIC = b"NTCA"
VERSION = 1
FLAG_CHECKPOINT = 1
VARIANT_CODES = {"full": 0, "no_encoder": 1, "multires": 2}
ACTIVATION_CODES = {"gelu": 0, "half-tanh": 1}


class AssetError(ValueError):
    pass


class ChecksumError(AssetError):
    pass


class SerializationError(AssetError):
    pass


class MipRangeError(IndexError):
    pass


# ---------------------------------------------------------------------------
# bit packing
# ---------------------------------------------------------------------------

def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack non-negative integer codes at ``bits`` bits each, LSB first."""
    flat = np.asarray(codes).reshape(-1).astype(np.uint32)
    if flat.size and flat.max() >= (1 << bits):
        raise SerializationError(f"code {flat.max()} does not fit in {bits} bits")
    if bits == 4:
        if flat.size % 2:
            flat = np.append(flat, 0)
        return (flat[0::2] | (flat[1::2] << 4)).astype(np.uint8).tobytes()
    shifts = np.arange(bits, dtype=np.uint32)
    bitmat = ((flat[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def packed_size(n: int, bits: int) -> int:
    return (n * bits + 7) // 8


def read_codes(buf: np.ndarray, index: np.ndarray, bits: int) -> np.ndarray:
    """Random-access read of codes at element indices from a packed buffer.

    ``buf`` must carry two trailing zero bytes so a 24-bit window never overruns.
    """
    pos = np.asarray(index, dtype=np.int64) * bits
    byte = pos >> 3
    shift = (pos & 7).astype(np.uint32)
    word = buf[byte].astype(np.uint32) | (buf[byte + 1].astype(np.uint32) << 8) | (buf[byte + 2].astype(np.uint32) << 16)
    return (word >> shift) & ((1 << bits) - 1)


def unpack_codes(data: bytes, n: int, bits: int) -> np.ndarray:
    buf = np.frombuffer(data + b"\0\0", dtype=np.uint8)
    return read_codes(buf, np.arange(n), bits)


# ---------------------------------------------------------------------------
# container
# ---------------------------------------------------------------------------

@dataclass
class CompressedAsset:
    h: int
    w: int
    c: int
    M: int
    grid_channels: tuple
    bits: tuple
    pe_freqs: int
    synth_dims: list
    grid_codes: list  # per level: (codes0, codes1) integer arrays c_gi x h_l x w_l
    weights: list  # per layer: (weight, bias) float16 arrays
    channel_labels: list = field(default_factory=list)
    variant: str = "full"
    activation: str = "gelu"
    version: int = VERSION
    checkpoint: dict | None = None  # name -> float32 array

    @property
    def synth_depth(self) -> int:
        return len(self.synth_dims) - 3

    def model_config(self) -> mdl.ModelConfig:
        return mdl.ModelConfig(
            channels=self.c, mips=self.M, grid_channels=self.grid_channels, bits=self.bits,
            synth_width=self.synth_dims[1], synth_depth=self.synth_depth, pe_freqs=self.pe_freqs,
            activation=self.activation, variant=self.variant,
        )

    @property
    def n_weight_params(self) -> int:
        return sum(wt.size + b.size for wt, b in self.weights)


def asset_from_training(result, checkpoint: bool = False) -> CompressedAsset:
    cfg = result.config
    weights = []
    for name in mdl.synth_layer_names(cfg):
        weights.append((result.params[f"{name}.weight"].astype(np.float16),
                        result.params[f"{name}.bias"].astype(np.float16)))
    return CompressedAsset(
        h=result.h, w=result.w, c=cfg.channels, M=cfg.mips, grid_channels=cfg.grid_channels,
        bits=cfg.bits, pe_freqs=cfg.pe_freqs, synth_dims=cfg.synth_dims,
        grid_codes=[tuple(np.asarray(c) for c in pair) for pair in result.grid_codes],
        weights=weights, channel_labels=list(result.channel_labels), variant=cfg.variant,
        activation=cfg.activation,
        checkpoint={k: v.astype(np.float32) for k, v in result.params.items()} if checkpoint else None,
    )


def grid_level_shape(asset_or_h, w=None, level=0):
    h = asset_or_h
    return (h // 8) >> level, (w // 8) >> level


def serialize(asset: CompressedAsset) -> bytes:
    out = bytearray()
    flags = FLAG_CHECKPOINT if asset.checkpoint is not None else 0
    out += MAGIC
    out += struct.pack("<III", asset.version, asset.h, asset.w)
    out += struct.pack("<HHHH", asset.c, asset.M, *asset.grid_channels)
    out += struct.pack("<BBBBBB", *asset.bits, asset.pe_freqs, VARIANT_CODES[asset.variant], flags,
                       ACTIVATION_CODES[asset.activation])
    out += struct.pack("<H", len(asset.synth_dims))
    out += struct.pack(f"<{len(asset.synth_dims)}I", *asset.synth_dims)
    out += struct.pack("<H", len(asset.channel_labels))
    for label in asset.channel_labels:
        raw = label.encode("utf-8")
        if len(raw) > 255:
            raise SerializationError(f"label {label!r} longer than 255 bytes")
        out += struct.pack("<B", len(raw)) + raw
    for lvl, pair in enumerate(asset.grid_codes):
        hz, wz = grid_level_shape(asset.h, asset.w, lvl)
        for i, codes in enumerate(pair):
            codes = np.asarray(codes)
            if not np.issubdtype(codes.dtype, np.integer):
                raise SerializationError("grid must be hard-quantized integer codes")
            if codes.shape != (asset.grid_channels[i], hz, wz):
                raise SerializationError(f"grid {i} level {lvl} has shape {codes.shape}, expected "
                                         f"{(asset.grid_channels[i], hz, wz)}")
            out += pack_codes(codes, asset.bits[i])
    dims = asset.synth_dims
    if len(asset.weights) != len(dims) - 1:
        raise SerializationError("weight list does not match synthesizer dims")
    for (wt, b), n_in, n_out in zip(asset.weights, dims[:-1], dims[1:]):
        if wt.shape != (n_out, n_in) or b.shape != (n_out,):
            raise SerializationError(f"layer shape {wt.shape}/{b.shape} vs ({n_out}, {n_in})")
        out += np.asarray(wt, dtype="<f2").tobytes() + np.asarray(b, dtype="<f2").tobytes()
    if asset.checkpoint is not None:
        out += struct.pack("<I", len(asset.checkpoint))
        for name, arr in asset.checkpoint.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr, dtype="<f4")
            out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
            out += struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise AssetError("truncated asset")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data: bytes) -> CompressedAsset:
    if len(data) < 8 or data[:4] != MAGIC:
        raise AssetError("not an NTCA asset")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("CRC-32 mismatch")
    r = _Reader(body)
    r.take(4)
    version, h, w = r.unpack("<III")
    if version != VERSION:
        raise AssetError(f"unsupported version {version}")
    c, M, cg0, cg1 = r.unpack("<HHHH")
    b0, b1, F, variant_code, flags, act_code = r.unpack("<BBBBBB")
    (n_dims,) = r.unpack("<H")
    dims = list(r.unpack(f"<{n_dims}I"))
    (n_labels,) = r.unpack("<H")
    labels = []
    for _ in range(n_labels):
        (n,) = r.unpack("<B")
        labels.append(r.take(n).decode("utf-8"))
    variant = {v: k for k, v in VARIANT_CODES.items()}[variant_code]
    activation = {v: k for k, v in ACTIVATION_CODES.items()}[act_code]
    n_levels = max(M - 2, 1) if variant == "multires" else 1
    grids = []
    for lvl in range(n_levels):
        hz, wz = grid_level_shape(h, w, lvl)
        pair = []
        for cg, bits in ((cg0, b0), (cg1, b1)):
            n = cg * hz * wz
            codes = unpack_codes(r.take(packed_size(n, bits)), n, bits)
            pair.append(codes.astype(np.uint8 if bits <= 8 else np.uint16).reshape(cg, hz, wz))
        grids.append(tuple(pair))
    weights = []
    for n_in, n_out in zip(dims[:-1], dims[1:]):
        wt = np.frombuffer(r.take(2 * n_in * n_out), dtype="<f2").reshape(n_out, n_in).astype(np.float16)
        b = np.frombuffer(r.take(2 * n_out), dtype="<f2").astype(np.float16)
        weights.append((wt, b))
    checkpoint = None
    if flags & FLAG_CHECKPOINT:
        checkpoint = {}
        (n,) = r.unpack("<I")
        for _ in range(n):
            (ln,) = r.unpack("<H")
            name = r.take(ln).decode("utf-8")
            (nd,) = r.unpack("<B")
            shape = r.unpack(f"<{nd}I")
            count = int(np.prod(shape))
            checkpoint[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(body):
        raise AssetError(f"{len(body) - r.pos} trailing bytes")
    return CompressedAsset(h=h, w=w, c=c, M=M, grid_channels=(cg0, cg1), bits=(b0, b1), pe_freqs=F,
                           synth_dims=dims, grid_codes=grids, weights=weights, channel_labels=labels,
                           variant=variant, activation=activation, version=version, checkpoint=checkpoint)


def save_asset(asset: CompressedAsset, path):
    with open(path, "wb") as f:
        f.write(serialize(asset))


def load_asset(path) -> CompressedAsset:
    with open(path, "rb") as f:
        return deserialize(f.read())


# ---------------------------------------------------------------------------
# bit accounting
# ---------------------------------------------------------------------------

def bits_of(asset: CompressedAsset) -> dict:
    """Exact bit counts of the serialized layout.

    ``grid_bits`` counts B_i bits per stored element; ``grid_padding_bits`` the
    byte-alignment filler. ``formula_grid_bits`` evaluates the shorthand
    c_gi * h * w / 32 expression for comparison; with h/8 x w/8 grids at B bits
    the true count is c_gi * h * w * B / 64, so the two disagree unless B = 2.
    """
    grid_bits = padded = 0
    for lvl, pair in enumerate(asset.grid_codes):
        for i, codes in enumerate(pair):
            n = int(np.asarray(codes).size)
            grid_bits += n * asset.bits[i]
            padded += 8 * packed_size(n, asset.bits[i])
    n_params = asset.n_weight_params
    weight_bits = 16 * n_params
    total = 8 * len(serialize(asset))
    ckpt_bits = 0
    if asset.checkpoint is not None:
        ckpt_bits = total - 8 * len(serialize(_without_checkpoint(asset)))
    header_bits = total - padded - weight_bits - ckpt_bits
    formula = sum(cg * asset.h * asset.w / 32 for cg in asset.grid_channels)
    base_grid_bits = sum(int(np.asarray(c).size) * b for c, b in zip(asset.grid_codes[0], asset.bits))
    return {
        "total_bits": total,
        "grid_bits": grid_bits,
        "grid_padding_bits": padded - grid_bits,
        "weight_bits": weight_bits,
        "weight_bits_fp32": 32 * n_params,
        "n_weight_params": n_params,
        "header_bits": header_bits,
        "checkpoint_bits": ckpt_bits,
        "formula_grid_bits": formula,
        "formula_ratio": base_grid_bits / formula if formula else float("nan"),
    }


def _without_checkpoint(asset):
    from dataclasses import replace

    return replace(asset, checkpoint=None)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

class AccessCounter:
    """Counts grid feature scalars read from packed storage."""

    def __init__(self):
        self.scalars = 0

    def reset(self):
        self.scalars = 0


def _dense(x, weight, bias):
    # einsum keeps each output row independent of batch size, so single-texel
    # and whole-image decodes agree bit for bit
    return np.einsum("nk,ok->no", x, weight) + bias


def _gelu(x):
    c = np.float32(np.sqrt(2.0 / np.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * x * (np.float32(1.0) + np.float32(0.044715) * x * x)))


class Decoder:
    """Random-access texel decoder over a loaded asset.

    Grid features are read straight from the packed code buffers; nothing
    else in the asset is touched per texel besides the header-derived tables
    and the widened synthesizer weights.
    """

    def __init__(self, asset: CompressedAsset):
        self.asset = asset
        self.config = asset.model_config()
        self.counter = AccessCounter()
        self._buffers = []
        for lvl, pair in enumerate(asset.grid_codes):
            level = []
            for i, codes in enumerate(pair):
                bits = asset.bits[i]
                raw = pack_codes(codes, bits) + b"\0\0"
                table = QuantizerSpec(bits).levels.astype(np.float32)
                level.append((np.frombuffer(raw, dtype=np.uint8), np.asarray(codes).shape, bits, table))
            self._buffers.append(level)
        self._layers = [(wt.astype(np.float32), b.astype(np.float32)) for wt, b in asset.weights]

    def _features(self, level, i, rows, cols):
        buf, (cg, hz, wz), bits, table = self._buffers[level][i]
        idx = np.arange(cg)[None, :] * (hz * wz) + (rows * wz + cols)[:, None]
        self.counter.scalars += idx.size
        return table[read_codes(buf, idx, bits)]

    def decode(self, xs, ys, ms) -> np.ndarray:
        """Decode a batch of requests -> N x c float32."""
        xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
        ys = np.atleast_1d(np.asarray(ys, dtype=np.float64))
        ms = np.atleast_1d(np.asarray(ms, dtype=np.int64))
        if ms.size and (ms.min() < 0 or ms.max() > self.asset.M):
            raise MipRangeError(f"mip level outside 0..{self.asset.M}")
        cfg = self.config
        multires = cfg.variant == "multires"
        levels = mdl.mip_to_level(ms) if multires else np.zeros_like(ms)
        n = xs.size
        y0 = np.empty((n, 4 * cfg.grid_channels[0]), dtype=np.float32)
        y1 = np.empty((n, cfg.grid_channels[1]), dtype=np.float32)
        for lvl in np.unique(levels):
            sel = levels == lvl
            _, hz, wz = self._buffers[lvl][0][1]
            strides = np.ones(int(sel.sum()), dtype=np.int64) if multires else mdl.stride_for_mip(ms[sel])
            r0, r1, c0, c1, fu, fv = mdl.lattice_indices(hz, wz, xs[sel], ys[sel], strides)
            corners = ((r0, c0), (r0, c1), (r1, c0), (r1, c1))
            y0[sel] = np.concatenate([self._features(lvl, 0, r, c) for r, c in corners], axis=1)
            wts = [wt.astype(np.float32)[:, None] for wt in _bilinear_weights(fu, fv)]
            acc = None
            for wt, (r, c) in zip(wts, corners):
                term = wt * self._features(lvl, 1, r, c)
                acc = term if acc is None else acc + term
            y1[sel] = acc
        mcol = mdl.normalized_mip(ms, cfg.mips).astype(np.float32)[:, None]
        parts = [y0, y1, mcol]
        if cfg.pe_freqs:
            parts.append(mdl.positional_encode(xs, ys, cfg.pe_freqs).astype(np.float32))
        h = np.concatenate(parts, axis=1)
        act = _gelu if cfg.activation == "gelu" else (lambda v: np.float32(0.5) * np.tanh(v))
        layers = self._layers
        h = act(_dense(h, *layers[0]))
        for wt, b in layers[1:-1]:
            h = h + act(_dense(h, wt, b))
        return np.clip(_dense(h, *layers[-1]), np.float32(0.0), np.float32(1.0))

    def decode_texel(self, x: float, y: float, m: int) -> np.ndarray:
        return self.decode([x], [y], [m])[0]

    def mip_extent(self, m: int):
        if not 0 <= m <= self.asset.M:
            raise MipRangeError(f"mip {m} outside 0..{self.asset.M}")
        return max(self.asset.h >> m, 1), max(self.asset.w >> m, 1)

    def decode_tile(self, m: int, row: int, col: int, height: int, width: int, chunk: int = 16384) -> np.ndarray:
        """c x height x width block of mip m starting at (row, col)."""
        hm, wm = self.mip_extent(m)
        if row < 0 or col < 0 or height < 1 or width < 1 or row + height > hm or col + width > wm:
            raise MipRangeError(f"rect ({row}, {col}, {height}, {width}) outside mip {m} extent {hm}x{wm}")
        rr, cc = np.meshgrid(np.arange(row, row + height), np.arange(col, col + width), indexing="ij")
        xs, ys = mdl.texel_centers(rr.reshape(-1), cc.reshape(-1), hm, wm)
        out = np.empty((xs.size, self.asset.c), dtype=np.float32)
        for s in range(0, xs.size, chunk):
            out[s : s + chunk] = self.decode(xs[s : s + chunk], ys[s : s + chunk], np.full(min(chunk, xs.size - s), m))
        return out.T.reshape(self.asset.c, height, width)

    def decode_mip_image(self, m: int) -> np.ndarray:
        hm, wm = self.mip_extent(m)
        return self.decode_tile(m, 0, 0, hm, wm)

    def decode_chain(self) -> list:
        return [self.decode_mip_image(m) for m in range(self.asset.M + 1)]


def _bilinear_weights(fu, fv):
    return ((1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv), fu * fv)


def decode_texel(asset, x, y, m) -> np.ndarray:
    dec = asset if isinstance(asset, Decoder) else Decoder(asset)
    return dec.decode_texel(x, y, m)


def decode_tile(asset, m, rect) -> np.ndarray:
    """``rect`` is (row, col, height, width) at mip m."""
    dec = asset if isinstance(asset, Decoder) else Decoder(asset)
    return dec.decode_tile(m, *rect)


def decode_mip_image(asset, m) -> TextureSet:
    dec = asset if isinstance(asset, Decoder) else Decoder(asset)
    vals = dec.decode_mip_image(m)
    labels = list(dec.asset.channel_labels)
    return TextureSet(np.clip(vals, 0.0, 1.0), labels)
