"""Overfit the codec on a seeded procedural texture set and report per-mip quality.

    python3 scripts/desk_overfit.py --seed 0 --out runs/desk
"""
import argparse
import json
import logging
import time
from dataclasses import asdict
from pathlib import Path

from cntc import asset as A
from cntc import metrics as mt
from cntc.texture import generate_mip_chain, procedural_texture
from cntc.training import desk_config, train


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--channels", type=int, default=6)
    ap.add_argument("--steps", type=int, default=None, help="override the desk step count")
    ap.add_argument("--profile", default="cntc16")
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texture = procedural_texture(args.size, args.channels, seed=args.seed)
    overrides = {"profile": args.profile, "log_every": 250}
    if args.steps:
        overrides["steps"] = args.steps
    cfg = desk_config(seed=args.seed, **overrides)
    logging.info("config:\n%s", cfg.to_text())

    t0 = time.time()
    result = train(texture, cfg, progress=lambda s, st, l, h: logging.info("step %5d stage %d loss %.3e held %.3e", s, st, l, h))
    asset = A.asset_from_training(result)
    A.save_asset(asset, out / "desk.ntca")

    ref = generate_mip_chain(texture)
    rec = A.Decoder(asset).decode_chain()
    bits = A.bits_of(asset)
    summary = {
        "config": asdict(cfg),
        "seconds": time.time() - t0,
        "psnr_mip0": mt.psnr_single(ref[0], rec[0]),
        "psnr_chain": mt.psnr_mips(ref, rec),
        "ssim_chain": mt.ssim_mips(ref, rec),
        "per_mip_psnr": [mt.psnr_single(a, b) for a, b in zip(ref.levels, rec)],
        "bppc": mt.bppc(bits, texture.h, texture.w, texture.c),
        "bits": bits,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, default=float))
    print(f"mip-0 {summary['psnr_mip0']:.2f} dB, chain {summary['psnr_chain']:.2f} dB, "
          f"ssim {summary['ssim_chain']:.4f}, {summary['seconds']:.0f}s -> {out}")


if __name__ == "__main__":
    main()
