"""Train one denoiser per regularization weight on a shared corpus and VAE, then print a trend table.

Usage: python scripts/lambda_sweep.py --out runs/sweep [--lambdas 0,1,3,5,10] [--modes cfg,none] [--epochs 30]

Reuses data, VAE and diffusion checkpoints already present in --out.
"""
import argparse
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from attrdiff import cli
from attrdiff.metrics import DIRECTIONS, METRICS


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--lambdas", default="0,1,3,5,10")
    ap.add_argument("--modes", default="cfg")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seeds", default="1,2,3")
    args = ap.parse_args()
    cfg = cli.RunConfig(epochs=args.epochs, seeds=[int(s) for s in args.seeds.split(",")])
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "run_config.txt").write_text(cfg.to_text())
    if not (args.out / "vae.ckpt").exists():
        cli.stage_gen_data(cfg, args.out)
        cli.stage_train_vae(cfg, args.out)
    print("lambda\tmode\t" + "\t".join(METRICS) + "\tstep_ms", flush=True)
    for lam in (float(x) for x in args.lambdas.split(",")):
        t0 = time.perf_counter()
        if not (args.out / cli.lam_tag(lam) / "diff.ckpt").exists():
            cli.stage_train_diff(cfg, args.out, lam)
        for mode in args.modes.split(","):
            mcfg = replace(cfg, mode=mode)
            step = cli.stage_sample(mcfg, args.out, lam)
            rep = cli.stage_eval(mcfg, args.out, lam)
            vals = [np.mean([rep.mean[d][m] for d in DIRECTIONS]) for m in METRICS]
            print(f"{lam:g}\t{mode}\t" + "\t".join(f"{v:.4f}" for v in vals) + f"\t{step * 1e3:.2f}", flush=True)
        print(f"# lambda {lam:g} done in {time.perf_counter() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
