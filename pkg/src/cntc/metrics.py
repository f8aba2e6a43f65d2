"""Mip-chain PSNR/SSIM, BPPC, Bjontegaard delta rate, and RD CSV I/O."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, interpolate, ndimage


class MetricInputError(ValueError):
    pass


class EvaluationError(ValueError):
    pass


def _levels(chain):
    return [np.asarray(getattr(lv, "values", lv), dtype=np.float64) for lv in getattr(chain, "levels", chain)]


def _check_pair(ref, rec):
    if len(ref) != len(rec):
        raise MetricInputError(f"chains have {len(ref)} and {len(rec)} levels")
    for a, b in zip(ref, rec):
        if a.shape != b.shape:
            raise MetricInputError(f"shape mismatch {a.shape} vs {b.shape}")


def _psnr_from_mse(mse: float) -> float:
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


def psnr_mips(ref, rec) -> float:
    """Joint PSNR over every texel of every mip and channel, peak 1."""
    ref, rec = _levels(ref), _levels(rec)
    _check_pair(ref, rec)
    se = sum(float(np.sum((a - b) ** 2)) for a, b in zip(ref, rec))
    n = sum(a.size for a in ref)
    return _psnr_from_mse(se / n)


def psnr_single(ref, rec) -> float:
    a = np.asarray(getattr(ref, "values", ref), dtype=np.float64)
    b = np.asarray(getattr(rec, "values", rec), dtype=np.float64)
    if a.shape != b.shape:
        raise MetricInputError(f"shape mismatch {a.shape} vs {b.shape}")
    return _psnr_from_mse(float(np.mean((a - b) ** 2)))


SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WIN = 0.01, 0.03, 1.5, 11


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_plane(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM of two single-channel planes (valid-window filtering, dynamic range 1).

    Planes smaller than 11 texels on an axis use a uniform window of
    min(extent, 11) texels instead of the Gaussian. The mean is clipped to [0, 1].
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h, w = a.shape
    if min(h, w) >= SSIM_WIN:
        g = _gaussian_window()
        kernels = (g, g)
    else:
        kh, kw = min(h, SSIM_WIN), min(w, SSIM_WIN)
        kernels = (np.full(kh, 1.0 / kh), np.full(kw, 1.0 / kw))

    def filt(x):
        y = ndimage.correlate1d(x, kernels[0], axis=0, mode="constant")
        y = ndimage.correlate1d(y, kernels[1], axis=1, mode="constant")
        lh, lw = len(kernels[0]), len(kernels[1])
        oh, ow = lh // 2, lw // 2
        return y[oh : h - (lh - 1 - oh), ow : w - (lw - 1 - ow)]

    c1, c2 = SSIM_K1 ** 2, SSIM_K2 ** 2
    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a * mu_a
    sbb = filt(b * b) - mu_b * mu_b
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    return float(np.clip(np.mean(num / den), 0.0, 1.0))


def ssim_mips(ref, rec) -> float:
    """Area-weighted mean of per-channel per-mip SSIM."""
    ref, rec = _levels(ref), _levels(rec)
    _check_pair(ref, rec)
    total = weight = 0.0
    for a, b in zip(ref, rec):
        c, h, w = a.shape
        for i in range(c):
            total += h * w * ssim_plane(a[i], b[i])
        weight += c * h * w
    return total / weight


def bppc(breakdown: dict, h: int, w: int, c: int, include_header: bool = False) -> float:
    """Bits per mip-0 pixel per channel."""
    if h <= 0 or w <= 0 or c <= 0:
        raise MetricInputError("extents must be positive")
    bits = breakdown["grid_bits"] + breakdown["weight_bits"]
    if include_header:
        bits += breakdown.get("header_bits", 0) + breakdown.get("grid_padding_bits", 0)
    return bits / (h * w * c)


# ---------------------------------------------------------------------------
# rate-distortion
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RDPoint:
    bppc: float
    quality: float

    def __post_init__(self):
        if not (math.isfinite(self.bppc) and self.bppc > 0):
            raise MetricInputError(f"bppc must be finite and positive, got {self.bppc}")


class RDCurve:
    def __init__(self, points):
        pts = sorted(points, key=lambda p: p.bppc)
        for a, b in zip(pts, pts[1:]):
            if not b.bppc > a.bppc:
                raise MetricInputError("RD curve rates must be strictly increasing")
        self.points = pts

    @property
    def rates(self):
        return np.array([p.bppc for p in self.points])

    @property
    def qualities(self):
        return np.array([p.quality for p in self.points])

    def __len__(self):
        return len(self.points)


def _integral(fit_q, fit_r, lo, hi, piecewise):
    if piecewise:
        order = np.argsort(fit_q)
        q, r = fit_q[order], fit_r[order]
        samples = np.linspace(lo, hi, num=100)
        vals = interpolate.pchip_interpolate(q, r, samples)
        return integrate.trapezoid(vals, samples)
    deg = min(3, len(fit_q) - 1)
    poly = np.polyint(np.polyfit(fit_q, fit_r, deg))
    return np.polyval(poly, hi) - np.polyval(poly, lo)


def bd_rate(anchor: RDCurve, test: RDCurve, piecewise: bool = False) -> float:
    """Average percent rate change of ``test`` vs ``anchor`` at equal quality."""
    if len(anchor) < 2 or len(test) < 2:
        raise EvaluationError("BD-rate needs at least two points per curve")
    qa, qt = anchor.qualities, test.qualities
    if not (np.all(np.isfinite(qa)) and np.all(np.isfinite(qt))):
        raise EvaluationError("BD-rate needs finite qualities")
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise EvaluationError("curves do not overlap in quality")
    ia = _integral(qa, np.log(anchor.rates), lo, hi, piecewise)
    it = _integral(qt, np.log(test.rates), lo, hi, piecewise)
    return (math.exp((it - ia) / (hi - lo)) - 1.0) * 100.0


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

RD_HEADER = ["label", "bppc", "psnr_db", "ssim"]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{float(v):.6g}"


def emit_rd_csv(points, extra_columns=()) -> str:
    """``points`` are dicts (or tuples) with label, bppc, psnr_db, ssim; rows sorted by (label, bppc)."""
    rows = []
    for p in points:
        if not isinstance(p, dict):
            p = dict(zip(RD_HEADER, p))
        rows.append(p)
    rows.sort(key=lambda r: (str(r["label"]), float(r["bppc"])))
    buf = io.StringIO()
    header = RD_HEADER + list(extra_columns)
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for r in rows:
        writer.writerow([r["label"]] + [_fmt(r.get(k)) for k in header[1:]])
    return buf.getvalue()


class CSVFormatError(ValueError):
    def __init__(self, line, msg):
        super().__init__(f"line {line}: {msg}")
        self.line = line


def parse_rd_csv(text: str) -> list:
    """Parse an RD CSV into dicts. Rows with a ``mip`` column other than ``all`` are skipped."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CSVFormatError(1, "empty file") from None
    missing = [k for k in RD_HEADER if k not in header]
    if missing:
        raise CSVFormatError(1, f"missing columns {missing}")
    idx = {k: header.index(k) for k in header}
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise CSVFormatError(lineno, f"expected {len(header)} fields, got {len(rec)}")
        if "mip" in idx and rec[idx["mip"]] not in ("all", ""):
            continue
        try:
            row = {"label": rec[idx["label"]], "bppc": float(rec[idx["bppc"]])}
            for k in ("psnr_db", "ssim"):
                raw = rec[idx[k]]
                row[k] = float(raw) if raw != "" else None
        except ValueError as e:
            raise CSVFormatError(lineno, str(e)) from None
        rows.append(row)
    return rows


def curve_from_rows(rows, metric: str = "psnr") -> RDCurve:
    key = {"psnr": "psnr_db", "ssim": "ssim"}[metric]
    pts = [RDPoint(r["bppc"], r[key]) for r in rows if r[key] is not None]
    return RDCurve(pts)


def channel_groups(labels, c: int) -> dict:
    """Map group name -> channel indices using the label prefix before the first dot."""
    if not labels:
        return {"all": list(range(c))}
    groups = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab.split(".", 1)[0], []).append(i)
    return groups


def mip_breakdown(ref, rec, labels=()) -> list:
    """Per-mip, per-channel-group PSNR/SSIM rows."""
    ref, rec = _levels(ref), _levels(rec)
    _check_pair(ref, rec)
    rows = []
    groups = channel_groups(list(labels), ref[0].shape[0])
    for m, (a, b) in enumerate(zip(ref, rec)):
        for name, idx in groups.items():
            rows.append({
                "mip": m,
                "resolution": f"{a.shape[1]}x{a.shape[2]}",
                "group": name,
                "psnr_db": psnr_single(a[idx], b[idx]),
                "ssim": float(np.mean([ssim_plane(a[i], b[i]) for i in idx])),
            })
    return rows
