"""Train the full model and its ablations on one desk-scale texture set; write an RD CSV.

Variants: full (R=4), synthesizer depth R=0 and R=2, no encoder (free grids),
and per-mip multiresolution grids.

    python3 scripts/ablations.py --seed 0 --out runs/ablations
    cntc bdrate --anchor runs/ablations/rd.csv --test ...   # compare against another sweep
"""
import argparse
import logging
import time
from pathlib import Path

from cntc import asset as A
from cntc import metrics as mt
from cntc.texture import generate_mip_chain, procedural_texture
from cntc.training import desk_config, train

VARIANTS = {
    "full": {},
    "depth0": {"synth_depth": 0},
    "depth2": {"synth_depth": 2},
    "no_encoder": {"variant": "no_encoder"},
    "multires": {"variant": "multires"},
}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seed", type=int, required=True)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--channels", type=int, default=6)
    ap.add_argument("--only", nargs="*", choices=sorted(VARIANTS), help="subset of variants")
    ap.add_argument("--out", default="runs/ablations")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    texture = procedural_texture(args.size, args.channels, seed=args.seed)
    ref = generate_mip_chain(texture)
    rows = []
    for name in args.only or VARIANTS:
        cfg = desk_config(seed=args.seed, log_every=1000, **VARIANTS[name])
        t0 = time.time()
        asset = A.asset_from_training(train(texture, cfg))
        A.save_asset(asset, out / f"{name}.ntca")
        rec = A.Decoder(asset).decode_chain()
        row = {
            "label": name,
            "bppc": mt.bppc(A.bits_of(asset), texture.h, texture.w, texture.c),
            "psnr_db": mt.psnr_mips(ref, rec),
            "ssim": mt.ssim_mips(ref, rec),
            "psnr_mip0": mt.psnr_single(ref[0], rec[0]),
        }
        rows.append(row)
        logging.info("%s: chain %.2f dB, mip-0 %.2f dB, bppc %.3f (%.0fs)", name, row["psnr_db"],
                     row["psnr_mip0"], row["bppc"], time.time() - t0)
    (out / "rd.csv").write_text(mt.emit_rd_csv(rows, extra_columns=["psnr_mip0"]))
    print((out / "rd.csv").read_text(), end="")


if __name__ == "__main__":
    main()
