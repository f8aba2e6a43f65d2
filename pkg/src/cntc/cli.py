"""Command-line entry points: encode, decode, eval, bdrate, ablate."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import asset as A
from . import metrics as mt
from .texture import (NTXR_MAGIC, TextureInputError, generate_mip_chain, load_texture_set,
                      parse_manifest, write_image, write_ntxr)
from .training import DESK_OVERRIDES, TrainConfig, TrainingError, parse_config_text, train

log = logging.getLogger("cntc")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_RANGE = 3
EXIT_SHAPE = 4
EXIT_OVERLAP = 5
EXIT_DIVERGED = 6

EXIT_CODES_HELP = """exit codes:
  0  success
  2  usage or input error (missing/unreadable file, malformed manifest/config/CSV, corrupt asset)
  3  mip level or rectangle out of range
  4  reference shape does not match the asset header
  5  RD curves do not overlap in quality
  6  training diverged (non-finite loss)
"""


class CLIError(Exception):
    def __init__(self, code, msg):
        super().__init__(msg)
        self.code = code


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _is_image(path: Path) -> bool:
    with open(path, "rb") as f:
        head = f.read(8)
    return head[:4] == NTXR_MAGIC or head == b"\x89PNG\r\n\x1a\n"


def resolve_sources(spec: str):
    """A manifest file, a directory holding ``manifest.txt``, or a single image."""
    path = Path(spec)
    if not path.exists():
        raise CLIError(EXIT_INPUT, f"input not found: {path}")
    if path.is_dir():
        manifest = path / "manifest.txt"
        if not manifest.exists():
            raise CLIError(EXIT_INPUT, f"input not found: {manifest}")
        path = manifest
    if _is_image(path):
        return [(path, [])]
    entries = parse_manifest(path)
    for img, _ in entries:
        if not img.exists():
            raise CLIError(EXIT_INPUT, f"input not found: {img}")
    return entries


def load_input(spec: str):
    try:
        return load_texture_set(resolve_sources(spec))
    except (TextureInputError, OSError) as e:
        if isinstance(e, CLIError):
            raise
        raise CLIError(EXIT_INPUT, str(e)) from e


def _load_asset(path):
    path = Path(path)
    if not path.exists():
        raise CLIError(EXIT_INPUT, f"asset not found: {path}")
    try:
        return A.load_asset(path)
    except A.AssetError as e:
        raise CLIError(EXIT_INPUT, f"{path}: {e}") from e


def build_train_config(args, variant="full", depth=None) -> TrainConfig:
    cfg = TrainConfig(seed=args.seed, variant=variant)
    if args.desk:
        cfg = replace(cfg, **DESK_OVERRIDES)
    if args.profile != "custom":
        cfg = replace(cfg, profile=args.profile)
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise CLIError(EXIT_INPUT, f"config not found: {p}")
        try:
            cfg = parse_config_text(p.read_text(), cfg)
        except ValueError as e:
            raise CLIError(EXIT_INPUT, f"{p}: {e}") from e
        # flags win over file contents
        cfg = replace(cfg, seed=args.seed, variant=variant)
        if args.profile != "custom":
            cfg = replace(cfg, profile=args.profile)
    if args.profile == "custom" and cfg.grid_channels is None:
        raise CLIError(EXIT_INPUT, "profile custom needs grid_channels in --config")
    if depth is not None:
        cfg = replace(cfg, synth_depth=depth)
    return cfg


def write_log_csv(path, losses):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["step", "stage", "loss", "lr"])
        for row in losses:
            wr.writerow([row["step"], row["stage"], f"{row['loss']:.8g}", f"{row['lr']:.6g}"])


def _run_training(args, cfg: TrainConfig):
    texture = load_input(args.input)
    log.info("resolved config:\n%s", cfg.to_text().rstrip())
    log.info("schedule: %s", cfg.schedule(texture.h, texture.w))

    def progress(step, stage, loss, held):
        log.info("step %d stage %d loss %.6g heldout %.6g", step, stage, loss, held)

    try:
        result = train(texture, cfg, progress=progress)
    except TrainingError as e:
        raise CLIError(EXIT_DIVERGED, f"training did not converge: {e}") from e
    asset = A.asset_from_training(result)
    out = Path(args.output)
    A.save_asset(asset, out)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.csv")
    write_log_csv(log_path, result.losses)
    if args.checkpoint:
        A.save_asset(A.asset_from_training(result, checkpoint=True), args.checkpoint)
    bits = A.bits_of(asset)
    print(f"wrote {out} ({bits['total_bits'] // 8} bytes, "
          f"bppc {mt.bppc(bits, asset.h, asset.w, asset.c):.4f}); log {log_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_encode(args):
    return _run_training(args, build_train_config(args))


def cmd_ablate(args):
    if args.mode == "depth":
        if args.depth is None:
            raise CLIError(EXIT_INPUT, "--mode depth needs --depth")
        cfg = build_train_config(args, depth=args.depth)
    else:
        cfg = build_train_config(args, variant=args.mode, depth=args.depth)
    return _run_training(args, cfg)


def cmd_decode(args):
    asset = _load_asset(args.asset)
    dec = A.Decoder(asset)
    m = args.mip
    if not 0 <= m <= asset.M:
        raise CLIError(EXIT_RANGE, f"mip {m} outside 0..{asset.M}")
    hm, wm = dec.mip_extent(m)
    if args.dump_grids:
        d = Path(args.dump_grids)
        d.mkdir(parents=True, exist_ok=True)
        from .quantization import QuantizerSpec, dequantize

        for lvl, pair in enumerate(asset.grid_codes):
            for i, codes in enumerate(pair):
                write_ntxr(d / f"grid{i}_l{lvl}.ntxr", dequantize(codes, QuantizerSpec(asset.bits[i])) + 0.5)
    if args.texel is not None or args.coord is not None:
        if args.texel is not None:
            col, row = args.texel
            if not (0 <= col < wm and 0 <= row < hm):
                raise CLIError(EXIT_RANGE, f"texel ({col}, {row}) outside mip {m} extent {wm}x{hm}")
            from .model import texel_centers

            x, y = texel_centers(row, col, hm, wm)
        else:
            x, y = args.coord
            if not (-1 <= x <= 1 and -1 <= y <= 1):
                raise CLIError(EXIT_RANGE, "coordinates must lie in [-1, 1]")
        vals = dec.decode_texel(float(x), float(y), m)
        print(" ".join(f"{float(v):.9g}" for v in vals))
        if not args.output:
            return EXIT_OK
    if not args.output:
        raise CLIError(EXIT_INPUT, "--output is required unless --texel/--coord is given")
    if args.rect:
        x0, y0, w, h = args.rect
        try:
            img = dec.decode_tile(m, y0, x0, h, w)
        except A.MipRangeError as e:
            raise CLIError(EXIT_RANGE, str(e)) from e
    else:
        img = dec.decode_mip_image(m)
    try:
        write_image(args.output, img)
    except TextureInputError as e:
        raise CLIError(EXIT_INPUT, str(e)) from e
    print(f"wrote {args.output} ({img.shape[0]}x{img.shape[1]}x{img.shape[2]})")
    return EXIT_OK


def cmd_eval(args):
    asset = _load_asset(args.asset)
    ref = load_input(args.reference)
    if (ref.c, ref.h, ref.w) != (asset.c, asset.h, asset.w):
        raise CLIError(EXIT_SHAPE, f"reference {ref.c}x{ref.h}x{ref.w} does not match asset "
                                   f"{asset.c}x{asset.h}x{asset.w}")
    wanted = {s.strip() for s in args.metrics.split(",") if s.strip()}
    unknown = wanted - {"psnr", "ssim", "bppc"}
    if unknown:
        raise CLIError(EXIT_INPUT, f"unknown metrics {sorted(unknown)}")
    ref_chain = generate_mip_chain(ref)
    rec = A.Decoder(asset).decode_chain()
    bits = A.bits_of(asset)
    rate = mt.bppc(bits, asset.h, asset.w, asset.c, include_header=args.include_header)
    label = args.label or Path(args.asset).stem
    overall = {
        "label": label,
        "bppc": rate if "bppc" in wanted else None,
        "psnr_db": mt.psnr_mips(ref_chain, rec) if "psnr" in wanted else None,
        "ssim": mt.ssim_mips(ref_chain, rec) if "ssim" in wanted else None,
        "mip": "all", "resolution": f"{asset.h}x{asset.w}", "group": "all",
    }
    rows = [overall]
    for r in mt.mip_breakdown(ref_chain, rec, asset.channel_labels or ref.channel_labels):
        rows.append({
            "label": label, "bppc": overall["bppc"],
            "psnr_db": r["psnr_db"] if "psnr" in wanted else None,
            "ssim": r["ssim"] if "ssim" in wanted else None,
            "mip": r["mip"], "resolution": r["resolution"], "group": r["group"],
        })
    text = _eval_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    else:
        sys.stdout.write(text)
    note = (f"grid bits {bits['grid_bits']} vs c_g*h*w/32 formula {bits['formula_grid_bits']:.0f} "
            f"(ratio {bits['formula_ratio']:.3g})")
    print(f"{label}: psnr {mt._fmt(overall['psnr_db'])} dB, ssim {mt._fmt(overall['ssim'])}, "
          f"bppc {mt._fmt(overall['bppc'])}; {note}", file=sys.stderr)
    return EXIT_OK


def _eval_csv(rows):
    import io

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    header = mt.RD_HEADER + ["mip", "resolution", "group"]
    wr.writerow(header)
    for r in rows:
        wr.writerow([r["label"], mt._fmt(r["bppc"]), mt._fmt(r["psnr_db"]), mt._fmt(r["ssim"]),
                     r["mip"], r["resolution"], r["group"]])
    return buf.getvalue()


def cmd_bdrate(args):
    curves = []
    for p in (args.anchor, args.test):
        path = Path(p)
        if not path.exists():
            raise CLIError(EXIT_INPUT, f"CSV not found: {path}")
        try:
            rows = mt.parse_rd_csv(path.read_text())
            curves.append(mt.curve_from_rows(rows, args.metric))
        except mt.CSVFormatError as e:
            raise CLIError(EXIT_INPUT, f"{path}: {e}") from e
        except mt.MetricInputError as e:
            raise CLIError(EXIT_INPUT, f"{path}: {e}") from e
    try:
        value = mt.bd_rate(curves[0], curves[1], piecewise=args.piecewise)
    except mt.EvaluationError as e:
        raise CLIError(EXIT_OVERLAP, str(e)) from e
    print(f"{value:.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_train_args(p):
    p.add_argument("--input", required=True, help="manifest file, directory with manifest.txt, or one image")
    p.add_argument("--profile", default="cntc16", choices=["cntc16", "cntc32", "cntc64", "custom"])
    p.add_argument("--config", help="key=value training config file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", required=True, help="asset path (.ntca)")
    p.add_argument("--log", help="training log CSV (default: <output>.log.csv)")
    p.add_argument("--checkpoint", help="also write a checkpoint container with all parameters")
    p.add_argument("--desk", action="store_true",
                   help="short CPU schedule for small textures (%s); --config still overrides" %
                        ", ".join(f"{k}={v}" for k, v in DESK_OVERRIDES.items()))


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cntc", description="Random-access neural texture codec.",
        epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="train and write an asset", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_train_args(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("ablate", help="train an ablation variant", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_train_args(p)
    p.add_argument("--mode", required=True, choices=["no_encoder", "multires", "depth"])
    p.add_argument("--depth", type=int, help="synthesizer residual blocks")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("decode", help="decode a mip, tile or texel", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--asset", required=True)
    p.add_argument("--mip", type=int, default=0)
    p.add_argument("--rect", type=int, nargs=4, metavar=("X0", "Y0", "W", "H"))
    p.add_argument("--texel", type=int, nargs=2, metavar=("COL", "ROW"), help="print one texel")
    p.add_argument("--coord", type=float, nargs=2, metavar=("X", "Y"), help="print the texel at (x, y) in [-1, 1]")
    p.add_argument("--output", help=".png (1/3/4 channels) or .ntxr")
    p.add_argument("--dump-grids", help="directory for dequantized grid planes (NTXR, offset by +0.5)")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="quality and rate of an asset", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--asset", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--metrics", default="psnr,ssim,bppc")
    p.add_argument("--csv")
    p.add_argument("--label")
    p.add_argument("--include-header", action="store_true", help="count header bits in BPPC")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate between two RD CSVs", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--metric", default="psnr", choices=["psnr", "ssim"])
    p.add_argument("--piecewise", action="store_true", help="PCHIP interpolation instead of cubic fit")
    p.set_defaults(func=cmd_bdrate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.info("command %s: %s", args.command, vars(args))
    try:
        return args.func(args)
    except CLIError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
