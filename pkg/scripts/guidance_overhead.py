"""Per-step sampling cost of classifier guidance against classifier-free guidance.

Usage: python scripts/guidance_overhead.py --out runs/sweep [--lambda 3] [--repeats 3]

Needs a run directory with a trained VAE and denoiser (see lambda_sweep.py or ``attrdiff pipeline``).
"""
import argparse
from pathlib import Path

import numpy as np

from attrdiff import cli
from attrdiff.metrics import generate
from attrdiff.sampler import GuidanceConfig, SampleTrace
from attrdiff.schedule import build_linear_schedule


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--lambda", dest="lam", type=float, default=3.0)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--ddim-steps", type=int, default=50)
    args = ap.parse_args()
    cfg = cli.RunConfig.from_text((args.out / "run_config.txt").read_text())
    corpus = cli.run_corpus(args.out)
    vae = cli.load_vae(cfg, args.out)
    den = cli.load_denoiser(cfg, args.out, args.lam)
    sched = build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    per_step = {}
    for mode in ("none", "cfg", "cg"):
        times = []
        for r in range(args.repeats):
            trace = SampleTrace()
            guidance = GuidanceConfig(mode, cfg.gamma, args.ddim_steps)
            generate(corpus.test, vae, den, sched, guidance, seed=r, trace=trace)
            times.extend(trace.step_seconds)
        per_step[mode] = float(np.median(times))
        print(f"{mode}\t{per_step[mode] * 1e3:.2f} ms/step (batch {len(corpus.test)})", flush=True)
    print(f"cg/cfg={per_step['cg'] / per_step['cfg']:.2f}x  cg/none={per_step['cg'] / per_step['none']:.2f}x")


if __name__ == "__main__":
    main()
