"""Texture sets, box-filtered mip chains, crops, and image I/O (PNG + NTXR raw planes)."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NTXR_MAGIC = b"NTXR"


class TextureInputError(ValueError):
    pass


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def num_mips(h: int, w: int) -> int:
    """Index of the coarsest mip, whose larger axis is 4 texels."""
    return int(np.log2(max(h, w))) - 2


@dataclass
class TextureSet:
    values: np.ndarray  # c x h x w in [0, 1]
    channel_labels: list = field(default_factory=list)

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise TextureInputError(f"expected c x h x w array, got shape {v.shape}")
        if v.size and (np.nanmin(v) < 0 or np.nanmax(v) > 1 or np.isnan(v).any()):
            raise TextureInputError("texture values must lie in [0, 1]")
        self.values = v
        if self.channel_labels and len(self.channel_labels) != v.shape[0]:
            raise TextureInputError(f"{len(self.channel_labels)} labels for {v.shape[0]} channels")

    @property
    def c(self) -> int:
        return self.values.shape[0]

    @property
    def h(self) -> int:
        return self.values.shape[1]

    @property
    def w(self) -> int:
        return self.values.shape[2]

    def validate_extents(self):
        if not (_is_pow2(self.h) and _is_pow2(self.w)) or min(self.h, self.w) < 4:
            raise TextureInputError(f"extents must be powers of two >= 4, got {self.h}x{self.w}")


@dataclass
class MipChain:
    levels: list  # of TextureSet

    @property
    def M(self) -> int:
        return len(self.levels) - 1

    def __getitem__(self, m):
        return self.levels[m]

    def __len__(self):
        return len(self.levels)


@dataclass(frozen=True)
class CropSpec:
    row: int
    col: int
    size: int

    def __post_init__(self):
        if not _is_pow2(self.size) or self.size < 64:
            raise TextureInputError(f"crop size must be a power of two >= 64, got {self.size}")
        if self.row % 8 or self.col % 8:
            raise TextureInputError("crop origin must be a multiple of 8")


def downsample(values: np.ndarray) -> np.ndarray:
    """2x2 box filter. An axis already at extent 1 is left alone."""
    c, h, w = values.shape
    fh, fw = (2 if h > 1 else 1), (2 if w > 1 else 1)
    return values.reshape(c, h // fh, fh, w // fw, fw).mean(axis=(2, 4))


def pyramid(values: np.ndarray, n_levels: int) -> list:
    out = [values]
    for _ in range(n_levels - 1):
        out.append(downsample(out[-1]))
    return out


def generate_mip_chain(t: TextureSet) -> MipChain:
    t.validate_extents()
    arrays = pyramid(t.values, num_mips(t.h, t.w) + 1)
    return MipChain([TextureSet(np.clip(a, 0.0, 1.0), list(t.channel_labels)) for a in arrays])


def random_crop(chain: MipChain, spec: CropSpec) -> MipChain:
    """Window every level of ``chain``; the result has its own coarsest level at 4 texels."""
    base = chain[0]
    if spec.row + spec.size > base.h or spec.col + spec.size > base.w:
        raise TextureInputError(f"crop {spec} exceeds {base.h}x{base.w}")
    labels = list(base.channel_labels)
    if spec.size == base.h == base.w:
        return MipChain([TextureSet(lv.values.copy(), labels) for lv in chain.levels])
    levels = []
    for m in range(num_mips(spec.size, spec.size) + 1):
        f = 1 << m
        if spec.row % f == 0 and spec.col % f == 0:
            r, c, s = spec.row // f, spec.col // f, spec.size // f
            levels.append(TextureSet(chain[m].values[:, r : r + s, c : c + s].copy(), labels))
        else:
            # window not aligned at this level: filter the crop itself
            levels.append(TextureSet(downsample(levels[-1].values), labels))
    return MipChain(levels)


def crop_values(t: np.ndarray, spec: CropSpec) -> np.ndarray:
    return t[:, spec.row : spec.row + spec.size, spec.col : spec.col + spec.size]


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def write_ntxr(path, values: np.ndarray):
    values = np.asarray(values, dtype="<f4")
    c, h, w = values.shape
    with open(path, "wb") as f:
        f.write(NTXR_MAGIC + struct.pack("<III", c, h, w))
        f.write(values.tobytes(order="C"))


def read_ntxr(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != NTXR_MAGIC:
        raise TextureInputError(f"{path}: not an NTXR file")
    c, h, w = struct.unpack("<III", data[4:16])
    n = c * h * w
    if len(data) != 16 + 4 * n:
        raise TextureInputError(f"{path}: expected {n} float32 values")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(c, h, w).astype(np.float64)


def read_image(path) -> np.ndarray:
    """Read PNG (8/16-bit) or NTXR into a c x h x w float64 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        head = f.read(4)
    if head == NTXR_MAGIC:
        return np.clip(read_ntxr(path), 0.0, 1.0)
    from PIL import Image

    with Image.open(path) as im:
        mode = im.mode
        arr = np.array(im)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype in (np.uint16, np.int32) or mode.startswith("I"):
        scale = 65535.0
    else:
        raise TextureInputError(f"{path}: unsupported pixel type {arr.dtype} ({mode})")
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return arr.astype(np.float64) / scale


def write_image(path, values: np.ndarray, bits: int = 8):
    """Write a c x h x w array in [0,1]. ``.ntxr`` gets raw float; otherwise PNG.

    PNG handles 1, 3 or 4 channel arrays; 16-bit output only for one channel.
    """
    path = Path(path)
    values = np.asarray(values)
    if path.suffix.lower() == ".ntxr":
        write_ntxr(path, values)
        return
    from PIL import Image

    v = np.clip(values, 0.0, 1.0)
    c = v.shape[0]
    if bits == 16:
        if c != 1:
            raise TextureInputError("16-bit PNG output supports a single channel")
        Image.fromarray(np.round(v[0] * 65535).astype(np.uint16)).save(path)
        return
    q = np.round(v * 255).astype(np.uint8)
    if c == 1:
        Image.fromarray(q[0], mode="L").save(path)
    elif c in (3, 4):
        Image.fromarray(np.moveaxis(q, 0, -1), mode="RGB" if c == 3 else "RGBA").save(path)
    else:
        raise TextureInputError(f"PNG output needs 1, 3 or 4 channels, got {c}; use .ntxr")


def parse_manifest(path) -> list:
    """Lines of ``path label [label ...]``; relative paths resolve against the manifest's folder."""
    path = Path(path)
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        img = Path(parts[0])
        if not img.is_absolute():
            img = path.parent / img
        entries.append((img, parts[1:]))
    if not entries:
        raise TextureInputError(f"{path}: manifest lists no images")
    return entries


def load_texture_set(sources) -> TextureSet:
    """Stack images channel-wise in the given order.

    ``sources`` is a list of ``(path, labels)`` pairs. ``labels`` may be empty
    (default names ``<stem>.<i>``) or name the first len(labels) channels of the
    image, in which case only those are kept.
    """
    planes, labels = [], []
    shape = None
    for path, names in sources:
        arr = read_image(path)
        if shape is None:
            shape = arr.shape[1:]
        elif arr.shape[1:] != shape:
            raise TextureInputError(f"{path}: extent {arr.shape[1:]} differs from {shape}")
        if names:
            if len(names) > arr.shape[0]:
                raise TextureInputError(f"{path}: {len(names)} labels for {arr.shape[0]} channels")
            arr = arr[: len(names)]
            labels.extend(names)
        else:
            labels.extend(f"{Path(path).stem}.{i}" for i in range(arr.shape[0]))
        planes.append(arr)
    if not planes:
        raise TextureInputError("no sources given")
    t = TextureSet(np.concatenate(planes, axis=0), labels)
    t.validate_extents()
    return t


def procedural_texture(size: int = 64, channels: int = 6, seed: int = 0, octaves: int = 3) -> TextureSet:
    """Seeded value-noise mixture: each channel is a random blend of smooth noise octaves."""
    rng = np.random.default_rng(seed)
    base = []
    for o in range(octaves):
        cells = 4 * 2 ** o
        lattice = rng.uniform(0, 1, size=(channels, cells + 1, cells + 1))
        t = np.linspace(0, cells, size, endpoint=False)
        i = np.floor(t).astype(int)
        f = t - i
        f = f * f * (3 - 2 * f)
        rows = lattice[:, i] * (1 - f)[None, :, None] + lattice[:, i + 1] * f[None, :, None]
        noise = rows[:, :, i] * (1 - f)[None, None, :] + rows[:, :, i + 1] * f[None, None, :]
        base.append(noise * 0.5 ** o)
    stack = np.sum(base, axis=0) / sum(0.5 ** o for o in range(octaves))
    mix = rng.normal(size=(channels, channels)) * 0.3 + np.eye(channels)
    vals = np.tensordot(mix, stack - 0.5, axes=([1], [0]))
    lo, hi = vals.min(axis=(1, 2), keepdims=True), vals.max(axis=(1, 2), keepdims=True)
    vals = 0.05 + 0.9 * (vals - lo) / (hi - lo)
    return TextureSet(vals, [f"noise.{i}" for i in range(channels)])
